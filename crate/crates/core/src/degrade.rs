//! Watermark blending, Gaussian noise and self-supervised pair construction.
//!
//! A training pair is two independent watermark draws on the same clean
//! image: the first (plus Gaussian noise) is the network input, the second
//! is the removal target. The clean image itself is never a training target.

use std::cell::Cell;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_rgba, save_rgba, Image};
use crate::rng::{derive_seed, seeded, stream, Rng};

/// Rejection-sampling budget for watermark placement.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// RGB watermark with a per-pixel alpha mask (zero outside the glyph).
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkAsset {
    pub id: String,
    pub rgb: Image,
    pub alpha: Vec<f32>,
}

impl WatermarkAsset {
    pub fn new(id: impl Into<String>, rgb: Image, alpha: Vec<f32>) -> Result<Self> {
        if alpha.len() != rgb.height() * rgb.width() {
            return Err(Error::Shape("alpha mask must match watermark size".into()));
        }
        if rgb.height() == 0 || rgb.width() == 0 {
            return Err(Error::Shape("empty watermark".into()));
        }
        Ok(Self {
            id: id.into(),
            rgb,
            alpha,
        })
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn alpha_at(&self, y: usize, x: usize) -> f32 {
        self.alpha[y * self.width() + x]
    }

    pub fn scaled_dims(&self, scale: f32) -> (usize, usize) {
        let s = |n: usize| ((n as f32 * scale).round() as usize).max(1);
        (s(self.height()), s(self.width()))
    }

    /// Bilinear resize (pixel-centre aligned) of colour and alpha.
    pub fn scaled(&self, scale: f32) -> Self {
        let (h, w) = self.scaled_dims(scale);
        if (h, w) == (self.height(), self.width()) {
            return self.clone();
        }
        let (sh, sw) = (self.height(), self.width());
        let ry = sh as f32 / h as f32;
        let rx = sw as f32 / w as f32;
        let taps = |d: usize, r: f32, n: usize| {
            let s = ((d as f32 + 0.5) * r - 0.5).clamp(0.0, (n - 1) as f32);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f32)
        };
        let sample = |plane: &dyn Fn(usize, usize) -> f32, y: usize, x: usize| {
            let (y0, y1, fy) = taps(y, ry, sh);
            let (x0, x1, fx) = taps(x, rx, sw);
            let top = plane(y0, x0) * (1.0 - fx) + plane(y0, x1) * fx;
            let bot = plane(y1, x0) * (1.0 - fx) + plane(y1, x1) * fx;
            top * (1.0 - fy) + bot * fy
        };
        let rgb = Image::from_fn(h, w, |c, y, x| sample(&|yy, xx| self.rgb.get(c, yy, xx), y, x));
        let mut alpha = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                alpha[y * w + x] = sample(&|yy, xx| self.alpha_at(yy, xx), y, x);
            }
        }
        Self {
            id: self.id.clone(),
            rgb,
            alpha,
        }
    }

    /// Reads an RGBA PNG; the id is the file stem.
    pub fn load_png(path: &Path) -> Result<Self> {
        let (rgb, alpha) = load_rgba(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(id, rgb, alpha)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_rgba(path, &self.rgb, &self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransparencyMode {
    /// One of a fixed set of values, uniformly.
    Fixed { values: Vec<f32> },
    /// Uniform on `[low, high]`.
    Blind { low: f32, high: f32 },
}

impl TransparencyMode {
    pub fn paper_set() -> Self {
        TransparencyMode::Fixed {
            values: vec![0.3, 0.5, 0.7, 1.0],
        }
    }

    pub fn blind() -> Self {
        TransparencyMode::Blind { low: 0.3, high: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f32| (0.0..=1.0).contains(&v);
        match self {
            TransparencyMode::Fixed { values } if values.is_empty() => {
                Err(Error::Parameter("empty transparency set".into()))
            }
            TransparencyMode::Fixed { values } if !values.iter().all(|&v| ok(v)) => {
                Err(Error::Parameter("transparency outside [0, 1]".into()))
            }
            TransparencyMode::Blind { low, high } if !(ok(*low) && ok(*high) && low <= high) => {
                Err(Error::Parameter("blind transparency range invalid".into()))
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut Rng) -> f32 {
        match self {
            TransparencyMode::Fixed { values } => values[rng.gen_range(0..values.len())],
            TransparencyMode::Blind { low, high } => uniform(rng, *low, *high),
        }
    }
}

fn uniform(rng: &mut Rng, low: f32, high: f32) -> f32 {
    if low == high {
        low
    } else {
        rng.gen_range(low..=high)
    }
}

/// One watermark draw. `sigma` is on the 0–255 scale; `seed` keys the noise
/// field added on top of this draw (unused when `sigma == 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub wm_id: String,
    pub transparency: f32,
    pub scale: f32,
    pub coverage_max: f32,
    pub position: (usize, usize),
    pub sigma: f32,
    pub seed: u64,
}

impl DegradationParams {
    /// Bounding box `(top, left, height, width)` of the placed watermark.
    pub fn footprint(&self, wm: &WatermarkAsset) -> (usize, usize, usize, usize) {
        let (h, w) = wm.scaled_dims(self.scale);
        (self.position.0, self.position.1, h, w)
    }
}

/// Distribution the two draws of a pair come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub sigma_set: Vec<f32>,
    pub transparency: TransparencyMode,
    pub scale_range: (f32, f32),
    pub coverage_max: f32,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            sigma_set: vec![0.0, 25.0, 50.0],
            transparency: TransparencyMode::paper_set(),
            scale_range: (0.5, 1.0),
            coverage_max: 0.4,
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        self.transparency.validate()?;
        if self.sigma_set.is_empty() || self.sigma_set.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Parameter("sigma set must be nonempty and nonnegative".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Parameter("scale range invalid".into()));
        }
        if !(self.coverage_max > 0.0 && self.coverage_max <= 1.0) {
            return Err(Error::Parameter("coverage_max must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `out(l) = ∂(l)·W(l) + (1 − ∂(l))·clean(l)` with `∂(l) = transparency · alpha(l)`
/// over the placed, scaled watermark; untouched elsewhere.
pub fn blend_watermark(clean: &Image, wm: &WatermarkAsset, params: &DegradationParams) -> Result<Image> {
    if !(0.0..=1.0).contains(&params.transparency) {
        return Err(Error::Parameter(format!(
            "transparency {} outside [0, 1]",
            params.transparency
        )));
    }
    if !(params.scale > 0.0 && params.scale.is_finite()) {
        return Err(Error::Parameter(format!("scale {} must be positive", params.scale)));
    }
    let (h, w) = clean.dims();
    let (top, left, sh, sw) = params.footprint(wm);
    if top + sh > h || left + sw > w {
        return Err(Error::Placement(format!(
            "{sh}x{sw} watermark at ({top},{left}) in {h}x{w} image"
        )));
    }
    let coverage = (sh * sw) as f64 / (h * w) as f64;
    if coverage > params.coverage_max as f64 {
        return Err(Error::Coverage {
            coverage,
            limit: params.coverage_max as f64,
        });
    }
    let placed = wm.scaled(params.scale);
    let t = params.transparency;
    let mut out = clean.clone();
    for c in 0..3 {
        for y in 0..sh {
            let wrow = placed.rgb.row(c, y);
            let arow = &placed.alpha[y * sw..(y + 1) * sw];
            let orow = &mut out.row_mut(c, top + y)[left..left + sw];
            for ((o, &wv), &a) in orow.iter_mut().zip(wrow).zip(arow) {
                let d = t * a;
                *o = d * wv + (1.0 - d) * *o;
            }
        }
    }
    Ok(out)
}

/// I.i.d. `N(0, (sigma/255)²)` values in planar image order.
pub fn noise_field(height: usize, width: usize, sigma: f32, seed: u64) -> Result<Vec<f32>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("noise sigma {sigma} must be >= 0")));
    }
    let len = 3 * height * width;
    if sigma == 0.0 {
        return Ok(vec![0.0; len]);
    }
    let std = sigma as f64 / 255.0;
    let mut rng = seeded(seed);
    Ok((0..len)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * std) as f32
        })
        .collect())
}

/// Adds Gaussian noise (sigma on the 0–255 scale). The result is not clipped.
pub fn add_gaussian_noise(img: &Image, sigma: f32, seed: u64) -> Result<Image> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let field = noise_field(img.height(), img.width(), sigma, seed)?;
    let mut out = img.clone();
    for (v, n) in out.data_mut().iter_mut().zip(field) {
        *v += n;
    }
    Ok(out)
}

thread_local! {
    static CLEAN_READS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`TrainingSample::clean`] reads on the current thread.
pub fn clean_reads() -> usize {
    CLEAN_READS.with(|c| c.get())
}

/// Noisy watermarked input, its noise-free version and an independently
/// watermarked reference, all from one clean image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: Image,
    pub denoise_target: Image,
    pub removal_target: Image,
    clean: Option<Image>,
    pub params_input: DegradationParams,
    pub params_target: DegradationParams,
    /// Offset of this sample within its source image.
    pub origin: (usize, usize),
}

impl TrainingSample {
    pub fn new(
        input: Image,
        denoise_target: Image,
        removal_target: Image,
        clean: Option<Image>,
        params_input: DegradationParams,
        params_target: DegradationParams,
    ) -> Self {
        Self {
            input,
            denoise_target,
            removal_target,
            clean,
            params_input,
            params_target,
            origin: (0, 0),
        }
    }

    /// Ground truth for evaluation. Training code must never call this;
    /// reads are counted per thread (see [`clean_reads`]).
    pub fn clean(&self) -> Option<&Image> {
        CLEAN_READS.with(|c| c.set(c.get() + 1));
        self.clean.as_ref()
    }

    pub fn has_clean(&self) -> bool {
        self.clean.is_some()
    }

    pub fn without_clean(mut self) -> Self {
        self.clean = None;
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        self.input.dims()
    }
}

fn find<'a>(pool: &'a [WatermarkAsset], id: &str) -> Result<&'a WatermarkAsset> {
    pool.iter()
        .find(|w| w.id == id)
        .ok_or_else(|| Error::Parameter(format!("unknown watermark id {id:?}")))
}

/// Draws watermark, scale, placement and transparency. Placement is uniform
/// over fully-inside offsets; draws whose bounding box exceeds the coverage
/// limit are rejected.
pub fn draw_params(
    height: usize,
    width: usize,
    pool: &[WatermarkAsset],
    cfg: &PairConfig,
    rng: &mut Rng,
) -> Result<DegradationParams> {
    if pool.is_empty() {
        return Err(Error::Parameter("watermark pool is empty".into()));
    }
    let limit = cfg.coverage_max as f64 * (height * width) as f64;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let wm = &pool[rng.gen_range(0..pool.len())];
        let scale = uniform(rng, cfg.scale_range.0, cfg.scale_range.1);
        let (sh, sw) = wm.scaled_dims(scale);
        if sh > height || sw > width || (sh * sw) as f64 > limit {
            continue;
        }
        let top = rng.gen_range(0..=height - sh);
        let left = rng.gen_range(0..=width - sw);
        let transparency = cfg.transparency.sample(rng);
        return Ok(DegradationParams {
            wm_id: wm.id.clone(),
            transparency,
            scale,
            coverage_max: cfg.coverage_max,
            position: (top, left),
            sigma: 0.0,
            seed: 0,
        });
    }
    Err(Error::Generation(format!(
        "no valid watermark placement in a {height}x{width} image after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )))
}

/// Builds a sample from two explicit draws: `input_params` (with its sigma
/// and noise seed) produces the input, `target_params` the reference.
pub fn pair_from_params(
    clean: &Image,
    pool: &[WatermarkAsset],
    input_params: &DegradationParams,
    target_params: &DegradationParams,
) -> Result<TrainingSample> {
    let denoise_target = blend_watermark(clean, find(pool, &input_params.wm_id)?, input_params)?;
    let removal_target = blend_watermark(clean, find(pool, &target_params.wm_id)?, target_params)?;
    let input = add_gaussian_noise(&denoise_target, input_params.sigma, input_params.seed)?;
    Ok(TrainingSample::new(
        input,
        denoise_target,
        removal_target,
        Some(clean.clone()),
        input_params.clone(),
        target_params.clone(),
    ))
}

/// Self-supervised pair: two independent draws from the same distribution
/// on the same clean image, noise on the first. Pure function of the seed.
pub fn make_pair(clean: &Image, pool: &[WatermarkAsset], cfg: &PairConfig, seed: u64) -> Result<TrainingSample> {
    cfg.validate()?;
    let (h, w) = clean.dims();
    let mut p_in = draw_params(h, w, pool, cfg, &mut stream(seed, 0, "draw.input"))?;
    let mut p_tg = draw_params(h, w, pool, cfg, &mut stream(seed, 0, "draw.target"))?;
    let mut rng = stream(seed, 0, "sigma");
    p_in.sigma = cfg.sigma_set[rng.gen_range(0..cfg.sigma_set.len())];
    p_in.seed = derive_seed(seed, 0, "noise");
    p_tg.sigma = 0.0;
    p_tg.seed = derive_seed(seed, 1, "noise");
    pair_from_params(clean, pool, &p_in, &p_tg)
}

/// Aligned `patch×patch` crops of every image in the sample on a regular
/// grid with the given stride.
pub fn extract_patches(sample: &TrainingSample, patch: usize, stride: usize) -> Result<Vec<TrainingSample>> {
    let (h, w) = sample.dims();
    if patch == 0 || stride == 0 {
        return Err(Error::Parameter("patch size and stride must be positive".into()));
    }
    if patch > h.min(w) {
        return Err(Error::Parameter(format!("patch {patch} larger than {h}x{w} image")));
    }
    let mut out = Vec::new();
    for top in (0..=h - patch).step_by(stride) {
        for left in (0..=w - patch).step_by(stride) {
            let crop = |img: &Image| img.crop(top, left, patch, patch);
            out.push(TrainingSample {
                input: crop(&sample.input)?,
                denoise_target: crop(&sample.denoise_target)?,
                removal_target: crop(&sample.removal_target)?,
                clean: sample.clean.as_ref().map(crop).transpose()?,
                params_input: sample.params_input.clone(),
                params_target: sample.params_target.clone(),
                origin: (sample.origin.0 + top, sample.origin.1 + left),
            });
        }
    }
    Ok(out)
}
