//! PSNR, RMSE (0–255 scale) and SSIM, plus corpus-level evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::checkpoint::{file_digest, load_model};
use crate::corpus::{load_samples, Access};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Ablation;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("image shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared difference on the 0–255 scale.
pub fn mse_255(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) * 255.0;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = mse_255(a, b)?;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    })
}

pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    Ok(mse_255(a, b)?.sqrt())
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Valid-region separable filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let r = &rows[(y + k) * ow..(y + k + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(r) {
                *o += t * v;
            }
        }
    }
    out
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> f64 {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, taps);
    let mu_b = filter_valid(&b, h, w, taps);
    let e_aa = filter_valid(&prod(&a, &a), h, w, taps);
    let e_bb = filter_valid(&prod(&b, &b), h, w, taps);
    let e_ab = filter_valid(&prod(&a, &b), h, w, taps);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    sum / mu_a.len() as f64
}

/// Mean local SSIM over all fully-inside window positions, averaged over
/// the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let taps = gaussian_taps();
    Ok((0..3).map(|c| ssim_plane(a.plane(c), b.plane(c), h, w, &taps)).sum::<f64>() / 3.0)
}

/// Serializes non-finite values as strings ("inf", "-inf", "nan").
pub mod float_or_inf {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> std::result::Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("bad number {other:?}"))),
            },
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
            use serde::ser::SerializeSeq;
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                #[derive(Serialize)]
                struct W(#[serde(with = "super")] f64);
                seq.serialize_element(&W(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }
}

/// Scores of one restored image against its reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    #[serde(with = "float_or_inf")]
    pub psnr_db: f64,
    pub rmse_255: f64,
    pub ssim: f64,
}

impl ImageScores {
    pub fn compute(output: &Image, reference: &Image) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(output, reference)?,
            rmse_255: rmse(output, reference)?,
            ssim: ssim(output, reference)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageScores>,
    #[serde(with = "float_or_inf")]
    pub psnr_db: f64,
    pub rmse_255: f64,
    pub ssim: f64,
}

impl MetricReport {
    /// Arithmetic means of the per-image scores.
    pub fn from_scores(per_image: Vec<ImageScores>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean = |f: fn(&ImageScores) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Self {
            psnr_db: mean(|s| s.psnr_db),
            rmse_255: mean(|s| s.rmse_255),
            ssim: mean(|s| s.ssim),
            per_image,
        }
    }
}

/// Restricts which manifest entries are evaluated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalFilter {
    pub sigma: Option<f32>,
    pub alpha: Option<f32>,
    pub limit: Option<usize>,
    pub ablation: Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub sigma: f32,
    pub alpha: f32,
    pub n: usize,
    #[serde(with = "float_or_inf")]
    pub psnr_mean: f64,
    pub rmse_mean: f64,
    pub ssim_mean: f64,
    #[serde(with = "float_or_inf::vec")]
    pub psnr_per_image: Vec<f64>,
    /// Mean PSNR of the degraded input against the clean image.
    #[serde(with = "float_or_inf")]
    pub input_psnr_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    pub checkpoint_digest: String,
    pub manifest_digest: String,
}

/// Runs the checkpoint on every selected entry and scores the clipped fused
/// output against the clean image, grouped by (σ, transparency).
pub fn evaluate_corpus(checkpoint: &Path, manifest: &Path, filter: &EvalFilter) -> Result<EvalReport> {
    let (model, _) = load_model(checkpoint)?;
    let (_, samples) = load_samples(manifest, Access::Evaluation)?;
    let mut groups: BTreeMap<(u32, u32), (Vec<ImageScores>, Vec<f64>)> = BTreeMap::new();
    let selected = samples
        .iter()
        .filter(|s| filter.sigma.is_none_or(|v| v == s.params_input.sigma))
        .filter(|s| filter.alpha.is_none_or(|v| v == s.params_input.transparency))
        .take(filter.limit.unwrap_or(usize::MAX));
    for s in selected {
        let clean = s.clean().ok_or_else(|| Error::Config("evaluation sample without clean image".into()))?;
        let out = model.infer_padded(&s.input, filter.ablation)?;
        let fused = out.fused.clipped();
        let g = groups
            .entry((s.params_input.sigma.to_bits(), s.params_input.transparency.to_bits()))
            .or_default();
        g.0.push(ImageScores::compute(&fused, clean)?);
        g.1.push(psnr(&s.input.clipped(), clean)?);
    }
    let mut cells: Vec<EvalCell> = groups
        .into_iter()
        .map(|((sigma, alpha), (scores, input_psnr))| {
            let report = MetricReport::from_scores(scores);
            EvalCell {
                sigma: f32::from_bits(sigma),
                alpha: f32::from_bits(alpha),
                n: report.per_image.len(),
                psnr_mean: report.psnr_db,
                rmse_mean: report.rmse_255,
                ssim_mean: report.ssim,
                psnr_per_image: report.per_image.iter().map(|s| s.psnr_db).collect(),
                input_psnr_mean: input_psnr.iter().sum::<f64>() / input_psnr.len() as f64,
            }
        })
        .collect();
    cells.sort_by(|a, b| a.sigma.total_cmp(&b.sigma).then(a.alpha.total_cmp(&b.alpha)));
    Ok(EvalReport {
        cells,
        checkpoint_digest: file_digest(checkpoint)?,
        manifest_digest: file_digest(manifest)?,
    })
}
