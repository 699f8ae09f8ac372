//! On-disk training corpora: 8-bit PNG samples plus a JSON manifest.
//!
//! Noisy inputs are stored for inspection, but loaders rebuild them as
//! `denoise_target + noise` from the recorded noise seed, so training sees
//! the unclipped additive model rather than a clipped, quantized PNG.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::{
    extract_patches, make_pair, noise_field, DegradationParams, PairConfig, TrainingSample, TransparencyMode,
    WatermarkAsset,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::derive_seed;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub seed: u64,
    pub patch_size: usize,
    pub stride: usize,
    pub pair: PairConfig,
}

impl GenerationConfig {
    /// Hex SHA-256 of the serialized config.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub input: String,
    pub denoise_target: String,
    pub removal_target: String,
    pub clean: String,
    pub sigma: f32,
    pub wm_id_input: String,
    pub wm_id_target: String,
    pub transparency_input: f32,
    pub transparency_target: f32,
    pub position_input: (usize, usize),
    pub position_target: (usize, usize),
    pub scale_input: f32,
    pub scale_target: f32,
    pub noise_seed: u64,
    pub source: String,
    pub source_size: (usize, usize),
    pub patch_offset: (usize, usize),
}

impl ManifestEntry {
    fn params(&self, coverage_max: f32) -> (DegradationParams, DegradationParams) {
        (
            DegradationParams {
                wm_id: self.wm_id_input.clone(),
                transparency: self.transparency_input,
                scale: self.scale_input,
                coverage_max,
                position: self.position_input,
                sigma: self.sigma,
                seed: self.noise_seed,
            },
            DegradationParams {
                wm_id: self.wm_id_target.clone(),
                transparency: self.transparency_target,
                scale: self.scale_target,
                coverage_max,
                position: self.position_target,
                sigma: 0.0,
                seed: 0,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub patch_size: usize,
    pub stride: usize,
    pub sigma_set: Vec<f32>,
    pub transparency_mode: TransparencyMode,
    pub coverage_max: f32,
    pub scale_range: (f32, f32),
    pub config_digest: String,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            seed: self.seed,
            patch_size: self.patch_size,
            stride: self.stride,
            pair: PairConfig {
                sigma_set: self.sigma_set.clone(),
                transparency: self.transparency_mode.clone(),
                scale_range: self.scale_range,
                coverage_max: self.coverage_max,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_slice(&bytes)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", m.version)));
        }
        if m.generation_config().digest() != m.config_digest {
            return Err(Error::Config(format!(
                "{}: config digest does not match its generation settings",
                path.display()
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// PNG files in `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn decode_all<T>(paths: &[PathBuf], load: impl Fn(&Path) -> Result<T>) -> Result<Vec<T>> {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for p in paths {
        match load(p) {
            Ok(v) => ok.push(v),
            Err(e) => bad.push((p.clone(), e.to_string())),
        }
    }
    if bad.is_empty() {
        Ok(ok)
    } else {
        Err(Error::UnreadableInputs(bad))
    }
}

/// Reads clean images and RGBA watermarks from two directories, then
/// delegates to [`build_corpus_from_assets`].
pub fn build_corpus(clean_dir: &Path, wm_dir: &Path, config: &GenerationConfig, out_dir: &Path) -> Result<CorpusManifest> {
    let clean_paths = list_pngs(clean_dir)?;
    let wm_paths = list_pngs(wm_dir)?;
    if clean_paths.is_empty() {
        return Err(Error::Parameter(format!("no PNG images in {}", clean_dir.display())));
    }
    if wm_paths.is_empty() {
        return Err(Error::Parameter(format!("no PNG watermarks in {}", wm_dir.display())));
    }
    let images = decode_all(&clean_paths, |p| {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Image::load_png(p).map(|img| (name, img))
    })?;
    let watermarks = decode_all(&wm_paths, WatermarkAsset::load_png)?;
    build_corpus_from_assets(&images, &watermarks, config, out_dir)
}

/// Writes one self-supervised pair per clean image, cut into patches, and
/// the manifest. Sample `i` is seeded from `(config.seed, i)` only.
pub fn build_corpus_from_assets(
    images: &[(String, Image)],
    watermarks: &[WatermarkAsset],
    config: &GenerationConfig,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    config.pair.validate()?;
    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut entries = Vec::new();
    for (idx, (name, clean)) in images.iter().enumerate() {
        let pair = make_pair(clean, watermarks, &config.pair, derive_seed(config.seed, idx as u64, "pair"))?;
        for (pi, patch) in extract_patches(&pair, config.patch_size, config.stride)?.iter().enumerate() {
            let stem = format!("{idx:05}_{pi:04}");
            let rel = |kind: &str, img: &Image| -> Result<String> {
                let rel = format!("samples/{stem}_{kind}.png");
                img.save_png(&out_dir.join(&rel))?;
                Ok(rel)
            };
            let clean_patch = patch.clean().expect("freshly generated pair").clone();
            entries.push(ManifestEntry {
                input: rel("input", &patch.input)?,
                denoise_target: rel("denoise", &patch.denoise_target)?,
                removal_target: rel("removal", &patch.removal_target)?,
                clean: rel("clean", &clean_patch)?,
                sigma: patch.params_input.sigma,
                wm_id_input: patch.params_input.wm_id.clone(),
                wm_id_target: patch.params_target.wm_id.clone(),
                transparency_input: patch.params_input.transparency,
                transparency_target: patch.params_target.transparency,
                position_input: patch.params_input.position,
                position_target: patch.params_target.position,
                scale_input: patch.params_input.scale,
                scale_target: patch.params_target.scale,
                noise_seed: patch.params_input.seed,
                source: name.clone(),
                source_size: clean.dims(),
                patch_offset: patch.origin,
            });
        }
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        seed: config.seed,
        patch_size: config.patch_size,
        stride: config.stride,
        sigma_set: config.pair.sigma_set.clone(),
        transparency_mode: config.pair.transparency.clone(),
        coverage_max: config.pair.coverage_max,
        scale_range: config.pair.scale_range,
        config_digest: config.digest(),
        entries,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Which files a loader reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    /// Input and the two self-supervised targets; the clean image is not read.
    Training,
    /// Everything, including the clean image.
    Evaluation,
}

/// Loads every entry of a manifest; paths resolve relative to its directory.
pub fn load_samples(manifest_path: &Path, access: Access) -> Result<(CorpusManifest, Vec<TrainingSample>)> {
    let manifest = CorpusManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        samples.push(load_entry(root, e, manifest.coverage_max, access)?);
    }
    Ok((manifest, samples))
}

fn load_entry(root: &Path, e: &ManifestEntry, coverage_max: f32, access: Access) -> Result<TrainingSample> {
    let denoise = Image::load_png(&root.join(&e.denoise_target))?;
    let removal = Image::load_png(&root.join(&e.removal_target))?;
    let (ph, pw) = denoise.dims();
    let input = if e.sigma == 0.0 {
        denoise.clone()
    } else {
        let (sh, sw) = e.source_size;
        let field = noise_field(sh, sw, e.sigma, e.noise_seed)?;
        let (top, left) = e.patch_offset;
        if top + ph > sh || left + pw > sw {
            return Err(Error::Config(format!("{}: patch outside its source image", e.input)));
        }
        let mut input = denoise.clone();
        for c in 0..3 {
            for y in 0..ph {
                let src = &field[(c * sh + top + y) * sw + left..][..pw];
                for (v, n) in input.row_mut(c, y).iter_mut().zip(src) {
                    *v += *n;
                }
            }
        }
        input
    };
    let clean = match access {
        Access::Evaluation => Some(Image::load_png(&root.join(&e.clean))?),
        Access::Training => None,
    };
    let (p_in, p_tg) = e.params(coverage_max);
    let mut s = TrainingSample::new(input, denoise, removal, clean, p_in, p_tg);
    s.origin = e.patch_offset;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::file_digest;
    use crate::degrade::clean_reads;
    use crate::synth::generate_test_assets;

    fn config(seed: u64) -> GenerationConfig {
        GenerationConfig {
            seed,
            patch_size: 32,
            stride: 32,
            pair: PairConfig {
                sigma_set: vec![25.0],
                ..PairConfig::default()
            },
        }
    }

    fn named(images: Vec<Image>) -> Vec<(String, Image)> {
        images.into_iter().enumerate().map(|(i, img)| (format!("img{i:03}"), img)).collect()
    }

    #[test]
    fn build_and_reload() {
        let (imgs, wms) = generate_test_assets(2, 3, (64, 64), 1);
        let dir = tempfile::tempdir().unwrap();
        let m = build_corpus_from_assets(&named(imgs), &wms, &config(3), dir.path()).unwrap();
        assert_eq!(m.entries.len(), 2 * 4);
        let path = dir.path().join(MANIFEST_FILE);
        let before = clean_reads();
        let (_, train) = load_samples(&path, Access::Training).unwrap();
        assert_eq!(train.len(), 8);
        assert!(train.iter().all(|s| !s.has_clean()));
        assert_eq!(clean_reads(), before);
        let (_, eval) = load_samples(&path, Access::Evaluation).unwrap();
        assert!(eval.iter().all(|s| s.has_clean()));
        // input is rebuilt unclipped: exactly target + noise
        let field = noise_field(64, 64, 25.0, m.entries[1].noise_seed).unwrap();
        let (top, left) = m.entries[1].patch_offset;
        let s = &train[1];
        assert_eq!(s.input.get(2, 3, 5), s.denoise_target.get(2, 3, 5) + field[(2 * 64 + top + 3) * 64 + left + 5]);
        assert!(s.input.data().iter().any(|&v| !(0.0..=1.0).contains(&v)));
    }

    #[test]
    fn manifest_is_reproducible() {
        let (imgs, wms) = generate_test_assets(2, 2, (32, 32), 4);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_corpus_from_assets(&named(imgs.clone()), &wms, &config(5), a.path()).unwrap();
        build_corpus_from_assets(&named(imgs), &wms, &config(5), b.path()).unwrap();
        assert_eq!(
            file_digest(&a.path().join(MANIFEST_FILE)).unwrap(),
            file_digest(&b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn tampered_config_is_rejected() {
        let (imgs, wms) = generate_test_assets(1, 2, (32, 32), 4);
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_corpus_from_assets(&named(imgs), &wms, &config(5), dir.path()).unwrap();
        m.seed += 1;
        let p = dir.path().join(MANIFEST_FILE);
        m.save(&p).unwrap();
        assert!(matches!(CorpusManifest::load(&p), Err(Error::Config(_))));
    }

    #[test]
    fn unreadable_inputs_are_listed() {
        let clean = tempfile::tempdir().unwrap();
        let wm = tempfile::tempdir().unwrap();
        fs::write(clean.path().join("broken.png"), b"not a png").unwrap();
        let (_, wms) = generate_test_assets(0, 1, (32, 32), 1);
        wms[0].save_png(&wm.path().join("w.png")).unwrap();
        let out = tempfile::tempdir().unwrap();
        match build_corpus(clean.path(), wm.path(), &config(1), out.path()) {
            Err(Error::UnreadableInputs(list)) => assert!(list[0].0.ends_with("broken.png")),
            other => panic!("expected unreadable input error, got {other:?}"),
        }
    }
}
