use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use pslnet::checkpoint::load_model;
use pslnet::corpus::{build_corpus, build_corpus_from_assets, load_samples, list_pngs, Access, GenerationConfig};
use pslnet::degrade::{blend_watermark, add_gaussian_noise, draw_params, DegradationParams, PairConfig, TransparencyMode, WatermarkAsset};
use pslnet::image::Image;
use pslnet::loss::LossType;
use pslnet::metrics::{evaluate_corpus, EvalFilter};
use pslnet::model::{summarize, Ablation, ModelConfig};
use pslnet::rng::{derive_seed, stream};
use pslnet::synth::generate_test_assets;
use pslnet::train::{fit_manifest, TrainConfig, TrainState, LOG_FILE};
use serde_json::json;

use crate::args::*;
use crate::run::{beside, Recorder};
use crate::UsageError;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

impl AblationArgs {
    fn ablation(&self) -> Ablation {
        Ablation {
            interactions: !self.no_interactions,
            enhancement: !self.no_em,
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let manifest = cli.run_manifest;
    match cli.command {
        Command::Dataset(DatasetCommand::Build(a)) => dataset_build(a, manifest),
        Command::Train(a) => train(a, manifest),
        Command::Eval(a) => eval(a, manifest),
        Command::Degrade(a) => degrade(a, manifest),
        Command::Infer(a) => infer(a, manifest),
        Command::Summary(a) => summary(a, manifest),
    }
}

fn dataset_build(a: DatasetBuildArgs, run_path: Option<std::path::PathBuf>) -> Result<()> {
    let mut rec = Recorder::start("dataset build");
    let seed = a.seed.seed.unwrap_or(0);
    let transparency = match (&a.alphas, &a.alpha_blind) {
        (Some(v), None) => TransparencyMode::Fixed { values: v.clone() },
        (None, Some(r)) => TransparencyMode::Blind { low: r[0], high: r[1] },
        (None, None) => TransparencyMode::paper_set(),
        (Some(_), Some(_)) => unreachable!("clap rejects --alphas with --alpha-blind"),
    };
    let mut pair = PairConfig {
        sigma_set: a.sigmas.clone(),
        transparency,
        coverage_max: a.coverage_max,
        ..PairConfig::default()
    };
    if let Some(r) = &a.scale_range {
        pair.scale_range = (r[0], r[1]);
    }
    pair.validate().map_err(|e| usage(e.to_string()))?;
    if a.patch_size == 0 || a.stride == Some(0) {
        return Err(usage("--patch-size and --stride must be positive"));
    }
    let config = GenerationConfig {
        seed,
        patch_size: a.patch_size,
        stride: a.stride.unwrap_or(a.patch_size),
        pair,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let manifest = match a.synthetic {
        Some(n) => {
            if n == 0 || a.synthetic_watermarks == 0 {
                return Err(usage("--synthetic and --synthetic-watermarks must be positive"));
            }
            let size = a.synthetic_size;
            let (images, wms) =
                generate_test_assets(n, a.synthetic_watermarks, (size, size), derive_seed(seed, 0, "synthetic"));
            let named: Vec<_> = images.into_iter().enumerate().map(|(i, img)| (format!("synthetic{i:04}"), img)).collect();
            build_corpus_from_assets(&named, &wms, &config, &a.out)?
        }
        None => {
            let (clean, wm) = (a.clean_dir.as_ref().expect("required"), a.wm_dir.as_ref().expect("required"));
            for p in list_pngs(clean)?.iter().chain(&list_pngs(wm)?) {
                rec.input(p)?;
            }
            build_corpus(clean, wm, &config, &a.out)?
        }
    };
    let manifest_path = a.out.join(pslnet::corpus::MANIFEST_FILE);
    rec.output(&manifest_path)?;
    rec.config(json!({ "generation": config, "synthetic": a.synthetic, "synthetic_size": a.synthetic_size, "synthetic_watermarks": a.synthetic_watermarks }))?;
    rec.seeds(json!({ "seed": seed }));
    println!("wrote {} samples to {}", manifest.entries.len(), manifest_path.display());
    rec.finish(&run_path.unwrap_or_else(|| a.out.join("run.json")))
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::preset(a.preset.name())?,
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = v; })* };
    }
    set!(batch_size, epochs, lr0, decay_every, decay_factor, lambda, checkpoint_every);
    if let Some(v) = a.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(l) = a.losstype {
        cfg.losstype = match l {
            LossArg::L1 => LossType::L1,
            LossArg::L2 => LossType::L2,
        };
    }
    if let Some(b) = a.base_channels {
        cfg.model = ModelConfig::with_base(b, cfg.model.depth);
    }
    if let Some(p) = &a.pn_weights {
        cfg.pn_weights = Some(p.clone());
    }
    if let Some(s) = a.seed.seed {
        cfg.seed = s;
    }
    cfg.toggles.interactions_on &= !a.no_interactions;
    cfg.toggles.em_on &= !a.no_em;
    cfg.toggles.texture_loss_on &= !a.no_texture_loss;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn train(a: TrainArgs, run_path: Option<std::path::PathBuf>) -> Result<()> {
    let mut rec = Recorder::start("train");
    let cfg = resolve_train_config(&a)?;
    rec.input(&a.data)?;
    if let Some(r) = &a.resume {
        rec.input(r)?;
        let (state, _) = TrainState::load(r)?;
        println!("resuming from step {}", state.step);
    }
    if let Some(p) = &cfg.pn_weights {
        rec.input(p)?;
    }
    rec.config(&cfg)?;
    rec.seeds(json!({ "seed": cfg.seed, "pn_seed": cfg.pn_seed }));
    let run_path = run_path.unwrap_or_else(|| a.out.join("run.json"));
    let result = fit_manifest(&a.data, &cfg, &a.out, a.resume.as_deref());
    let final_path = match result {
        Ok(p) => p,
        Err(e) => {
            // Record the failed run too; the divergence dump sits in the output directory.
            let _ = rec.finish(&run_path);
            return Err(e.into());
        }
    };
    rec.output(&final_path)?;
    rec.output(&a.out.join(LOG_FILE))?;
    println!("final checkpoint: {}", final_path.display());
    rec.finish(&run_path)
}

fn eval(a: EvalArgs, run_path: Option<std::path::PathBuf>) -> Result<()> {
    let mut rec = Recorder::start("eval");
    rec.input(&a.checkpoint)?;
    rec.input(&a.data)?;
    let filter = EvalFilter {
        sigma: a.sigma,
        alpha: a.alpha,
        limit: a.limit,
        ablation: a.ablation.ablation(),
    };
    let report = evaluate_corpus(&a.checkpoint, &a.data, &filter)?;
    ensure_parent(&a.out)?;
    write_json(&a.out, &report)?;
    rec.output(&a.out)?;
    println!("{:>6} {:>6} {:>5} {:>10} {:>10} {:>8} {:>8}", "sigma", "alpha", "n", "input_psnr", "psnr", "rmse", "ssim");
    for c in &report.cells {
        println!(
            "{:>6} {:>6} {:>5} {:>10.4} {:>10.4} {:>8.4} {:>8.4}",
            c.sigma, c.alpha, c.n, c.input_psnr_mean, c.psnr_mean, c.rmse_mean, c.ssim_mean
        );
    }
    if let Some(dir) = &a.grid_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let (model, _) = load_model(&a.checkpoint)?;
        let (_, samples) = load_samples(&a.data, Access::Evaluation)?;
        for (i, s) in samples.iter().take(a.grid_count).enumerate() {
            let clean = s.clean().context("evaluation sample without clean image")?;
            let out = model.infer_padded(&s.input, filter.ablation)?;
            let strip = Image::hstack(&[clean, &s.input.clipped(), &out.fused.clipped()])?;
            let p = dir.join(format!("grid_{i:03}.png"));
            strip.save_png(&p)?;
            rec.output(&p)?;
        }
    }
    rec.config(json!({ "sigma": a.sigma, "alpha": a.alpha, "limit": a.limit, "ablation": { "interactions": filter.ablation.interactions, "enhancement": filter.ablation.enhancement }, "grid_count": a.grid_count }))?;
    rec.finish(&run_path.unwrap_or_else(|| beside(&a.out)))
}

fn degrade(a: DegradeArgs, run_path: Option<std::path::PathBuf>) -> Result<()> {
    let mut rec = Recorder::start("degrade");
    let seed = a.seed.seed.unwrap_or(0);
    rec.input(&a.input)?;
    rec.input(&a.wm)?;
    let clean = Image::load_png(&a.input)?;
    let wm = WatermarkAsset::load_png(&a.wm)?;
    let (h, w) = clean.dims();
    let position = match &a.position {
        Some(p) => (p[0], p[1]),
        None => {
            let cfg = PairConfig {
                sigma_set: vec![a.sigma],
                transparency: TransparencyMode::Fixed { values: vec![a.alpha] },
                scale_range: (a.scale, a.scale),
                coverage_max: a.coverage_max,
            };
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            draw_params(h, w, std::slice::from_ref(&wm), &cfg, &mut stream(seed, 0, "draw.input"))?.position
        }
    };
    let params = DegradationParams {
        wm_id: wm.id.clone(),
        transparency: a.alpha,
        scale: a.scale,
        coverage_max: a.coverage_max,
        position,
        sigma: a.sigma,
        seed: derive_seed(seed, 0, "noise"),
    };
    let marked = blend_watermark(&clean, &wm, &params)?;
    let noisy = add_gaussian_noise(&marked, params.sigma, params.seed)?;
    ensure_parent(&a.out)?;
    noisy.save_png(&a.out)?;
    rec.output(&a.out)?;
    rec.config(&params)?;
    rec.seeds(json!({ "seed": seed, "noise_seed": params.seed }));
    rec.finish(&run_path.unwrap_or_else(|| beside(&a.out)))
}

fn infer(a: InferArgs, run_path: Option<std::path::PathBuf>) -> Result<()> {
    let mut rec = Recorder::start("infer");
    rec.input(&a.checkpoint)?;
    rec.input(&a.input)?;
    let (model, meta) = load_model(&a.checkpoint)?;
    let img = Image::load_png(&a.input)?;
    let out = model.infer_padded(&img, a.ablation.ablation())?;
    let chosen = match a.output {
        Branch::Fused => &out.fused,
        Branch::Upper => &out.upper,
        Branch::Lower => &out.lower,
    };
    ensure_parent(&a.out)?;
    chosen.clipped().save_png(&a.out)?;
    rec.output(&a.out)?;
    rec.config(json!({
        "model": meta.model,
        "output": format!("{:?}", a.output).to_lowercase(),
        "ablation": { "interactions": !a.ablation.no_interactions, "enhancement": !a.ablation.no_em },
    }))?;
    rec.finish(&run_path.unwrap_or_else(|| beside(&a.out)))
}

fn summary(a: SummaryArgs, run_path: Option<std::path::PathBuf>) -> Result<()> {
    let mut rec = Recorder::start("summary");
    let mut config = ModelConfig::preset(a.preset.name())?;
    if a.base_channels.is_some() || a.depth.is_some() {
        config = ModelConfig::with_base(a.base_channels.unwrap_or(config.base_channels), a.depth.unwrap_or(config.depth));
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    config.check_input(a.height, a.width).map_err(|e| usage(e.to_string()))?;
    let s = summarize(&config);
    let flops = s.flops_at(a.height, a.width);
    let report = json!({
        "config": config,
        "parameter_count": s.parameter_count,
        "conv_layers": s.conv_layers,
        "height": a.height,
        "width": a.width,
        "flops": flops,
    });
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        if a.layers {
            for l in s.layers() {
                println!("{:<32} {:>5} -> {:<5} k={} params={}", l.name, l.c_in, l.c_out, l.kernel, l.params());
            }
        }
        println!("parameters: {} ({:.3}M)", s.parameter_count, s.parameter_count as f64 / 1e6);
        println!("conv layers: {}", s.conv_layers);
        println!("FLOPs at {}x{}: {} ({:.3}G)", a.height, a.width, flops, flops as f64 / 1e9);
    }
    rec.config(&report)?;
    let run_path = match (&a.out, run_path) {
        (_, Some(p)) => Some(p),
        (Some(out), None) => Some(beside(out)),
        (None, None) => None,
    };
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        write_json(out, &report)?;
        rec.output(out)?;
    }
    match run_path {
        Some(p) => rec.finish(&p),
        None => Ok(()),
    }
}
