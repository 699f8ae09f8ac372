//! Procedural clean images and watermark glyphs for tests and smoke runs.

use rand::Rng as _;

use crate::degrade::WatermarkAsset;
use crate::image::Image;
use crate::rng::{stream, Rng};

/// Deterministic clean images of `size` (smooth gradients, shapes and
/// stripes) and watermarks (letter-like strokes or geometric outlines with
/// soft alpha) sized to roughly half the image.
pub fn generate_test_assets(
    n_images: usize,
    n_watermarks: usize,
    size: (usize, usize),
    seed: u64,
) -> (Vec<Image>, Vec<WatermarkAsset>) {
    let images = (0..n_images)
        .map(|i| clean_image(size, &mut stream(seed, i as u64, "synth.image")))
        .collect();
    let wm_size = (
        ((size.0 as f32 * 0.4).round() as usize).max(4),
        ((size.1 as f32 * 0.6).round() as usize).max(4),
    );
    let watermarks = (0..n_watermarks)
        .map(|i| watermark(i, wm_size, &mut stream(seed, i as u64, "synth.watermark")))
        .collect();
    (images, watermarks)
}

fn color(rng: &mut Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn clean_image((h, w): (usize, usize), rng: &mut Rng) -> Image {
    let corners = [color(rng), color(rng), color(rng), color(rng)];
    let mut img = Image::from_fn(h, w, |c, y, x| {
        let fy = y as f32 / (h.max(2) - 1) as f32;
        let fx = x as f32 / (w.max(2) - 1) as f32;
        let top = corners[0][c] * (1.0 - fx) + corners[1][c] * fx;
        let bot = corners[2][c] * (1.0 - fx) + corners[3][c] * fx;
        0.15 + 0.7 * (top * (1.0 - fy) + bot * fy)
    });

    let n_shapes = rng.gen_range(3..7);
    for _ in 0..n_shapes {
        let col = color(rng);
        let cy = rng.gen_range(0.0..h as f32);
        let cx = rng.gen_range(0.0..w as f32);
        let r = rng.gen_range(0.08..0.3) * h.min(w) as f32;
        let rect = rng.gen_bool(0.5);
        let aspect = rng.gen_range(0.5..2.0);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f32 + 0.5 - cy) / r;
                let dx = (x as f32 + 0.5 - cx) / (r * aspect);
                let d = if rect { dy.abs().max(dx.abs()) } else { (dy * dy + dx * dx).sqrt() };
                let cover = ((1.0 - d) * r).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for (c, &cv) in col.iter().enumerate() {
                        let v = img.get(c, y, x);
                        img.set(c, y, x, v * (1.0 - cover) + cv * cover);
                    }
                }
            }
        }
    }

    let freq = rng.gen_range(0.15..0.6);
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let amp = rng.gen_range(0.02..0.08);
    let (s, c) = angle.sin_cos();
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let t = (freq * (x as f32 * c + y as f32 * s)).sin() * amp;
                let v = img.get(ch, y, x) + t;
                img.set(ch, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn watermark(index: usize, (h, w): (usize, usize), rng: &mut Rng) -> WatermarkAsset {
    // Coordinates are (x, y) in pixels.
    let stroke = (h.min(w) as f32 * 0.09).max(1.0);
    let mut segments: Vec<((f32, f32), (f32, f32))> = Vec::new();
    let (fw, fh) = (w as f32, h as f32);
    let margin = stroke;
    if index % 2 == 0 {
        // letter-like glyphs laid out in a row
        let letters = rng.gen_range(2..5);
        let cell = (fw - 2.0 * margin) / letters as f32;
        for l in 0..letters {
            let x0 = margin + l as f32 * cell + cell * 0.15;
            let x1 = x0 + cell * 0.7;
            let (y0, y1) = (margin, fh - margin);
            let ym = (y0 + y1) / 2.0;
            let strokes = rng.gen_range(2..5);
            let candidates = [
                ((x0, y0), (x0, y1)),
                ((x1, y0), (x1, y1)),
                ((x0, y0), (x1, y0)),
                ((x0, y1), (x1, y1)),
                ((x0, ym), (x1, ym)),
                ((x0, y0), (x1, y1)),
                ((x0, y1), (x1, y0)),
            ];
            for _ in 0..strokes {
                segments.push(candidates[rng.gen_range(0..candidates.len())]);
            }
        }
    } else {
        // geometric outline: polygon with 3..=8 vertices around the centre
        let sides = rng.gen_range(3..9);
        let (cx, cy) = (fw / 2.0, fh / 2.0);
        let (rx, ry) = (fw / 2.0 - margin, fh / 2.0 - margin);
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let pts: Vec<(f32, f32)> = (0..sides)
            .map(|i| {
                let a = phase + i as f32 * std::f32::consts::TAU / sides as f32;
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect();
        for i in 0..sides {
            segments.push((pts[i], pts[(i + 1) % sides]));
        }
    }

    let tint = if rng.gen_bool(0.5) { [1.0, 1.0, 1.0] } else { color(rng) };
    let rgb = Image::from_fn(h, w, |c, _, _| tint[c]);
    let mut alpha = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let d = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f32::INFINITY, f32::min);
            // one-pixel soft edge
            alpha[y * w + x] = (stroke / 2.0 - d + 0.5).clamp(0.0, 1.0);
        }
    }
    WatermarkAsset::new(format!("wm{index:02}"), rgb, alpha).expect("watermark dims")
}
