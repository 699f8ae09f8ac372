use pslnet::image::Image;
use pslnet::metrics::{psnr, rmse, ssim};
use pslnet::rng::seeded;
use rand::Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = seeded(seed);
    Image::from_planar(h, w, (0..3 * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

#[test]
fn metrics_are_symmetric() {
    for seed in 0..10 {
        let (a, b) = (random_image(24, 20, seed), random_image(24, 20, seed + 100));
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn identical_images_score_perfectly() {
    let a = random_image(16, 16, 1);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

/// More noise never scores better.
#[test]
fn scores_degrade_with_noise_level() {
    for seed in 0..50 {
        let clean = random_image(16, 16, seed);
        let mut rng = seeded(seed + 1000);
        let direction: Vec<f32> = (0..clean.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noisy = |s: f32| {
            let data = clean.data().iter().zip(&direction).map(|(c, d)| c + s * d).collect();
            Image::from_planar(16, 16, data).unwrap()
        };
        let (weak, strong) = (noisy(0.02), noisy(0.08));
        assert!(psnr(&clean, &weak).unwrap() > psnr(&clean, &strong).unwrap());
        assert!(rmse(&clean, &weak).unwrap() < rmse(&clean, &strong).unwrap());
        assert!(ssim(&clean, &weak).unwrap() > ssim(&clean, &strong).unwrap());
    }
}

#[test]
fn psnr_and_rmse_agree() {
    for seed in 0..20 {
        let (a, b) = (random_image(12, 18, seed), random_image(12, 18, seed + 7));
        let r = rmse(&a, &b).unwrap();
        let expected = 20.0 * (255.0 / r).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
    }
}

/// Every pixel off by half a grey level: MSE 0.25 on the 8-bit scale.
#[test]
fn half_level_error_has_known_psnr() {
    let a = Image::filled(8, 8, 0.5);
    let b = Image::filled(8, 8, 0.5 + 0.5 / 255.0);
    let p = psnr(&a, &b).unwrap();
    assert!((p - 10.0 * (255.0f64 * 255.0 / 0.25).log10()).abs() < 1e-3, "{p}");
    assert!((p - 54.1514).abs() < 1e-3, "{p}");
}

#[test]
fn ssim_rejects_images_smaller_than_window() {
    let a = Image::filled(10, 16, 0.2);
    assert!(ssim(&a, &a).is_err());
    assert!(psnr(&a, &Image::filled(10, 15, 0.2)).is_err());
}

/// Half the pixels off by two grey levels: MSE 2 on the 8-bit scale.
#[test]
fn half_pixels_off_by_two_levels() {
    let a = Image::filled(8, 8, 0.5);
    let mut b = a.clone();
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v += 2.0 / 255.0;
        }
    }
    let p = psnr(&a, &b).unwrap();
    assert!((p - 45.1205).abs() < 1e-3, "{p}");
}
