use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bivsr::config::RunConfig;
use bivsr::enhancer::{ExternalEnhancer, IdentityUpscaler, OracleEnhancer, ReferenceEnhancer, TinySrNet};
use bivsr::flow::{read_flow_dir, write_flow_dir, FlowField};
use bivsr::longvideo::run_long_vsr;
use bivsr::metrics::{evaluate, MetricReport};
use bivsr::model::ModelBundle;
use bivsr::rng::SeedTree;
use bivsr::sampling::{bidirectional_sample, unidirectional_sample, SamplerOptions};
use bivsr::schedule::NoiseSchedule;
use bivsr::tiling::TileOptions;
use bivsr::training::{
    degrade, synthesize_toy_videos, train_base, train_sr, train_stage1, train_stage2, train_stage3, train_vae,
    ReferenceSource, StageConfig, StageReport, ToyVideo, TrainingSet,
};
use bivsr::video::{png_files, VideoClip};
use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::{Cli, Command, EvalArgs, ReferenceArg, StageArg, SynthArgs, TrainArgs, UpscaleArgs, UsageError};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(p) = &cli.config {
        require_exists(p, "config file")?;
    }
    let mut cfg = RunConfig::load_or_default(cli.config.as_ref())?;
    if let Some(s) = cli.root_seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::SynthData(a) => synth_data(&cfg, &a),
        Command::Init(a) => {
            let bundle = ModelBundle::new(cfg.model.clone(), DType::F32, model_seed(&cfg))?;
            bundle.save(&a.out)?;
            log::info!("wrote untrained model to {}", a.out.display());
            Ok(())
        }
        Command::Train(a) => train(&cfg, &a),
        Command::Upscale(a) => upscale(&cfg, &a),
        Command::Eval(a) => eval(&cfg, &a),
        Command::PrintConfig => {
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn model_seed(cfg: &RunConfig) -> u64 {
    SeedTree::new(cfg.seed).child("model").seed()
}

fn video_dir_name(i: usize) -> String {
    format!("{i:04}")
}

fn synth_data(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    let d = &cfg.data;
    let root = SeedTree::new(cfg.seed).child("data");
    for (split, count) in [("train", d.count), ("held_out", d.held_out)] {
        let seeds = root.child(split);
        let videos = synthesize_toy_videos(count, d.frames, (d.height, d.width), &d.motion, seeds.seed())?;
        for (i, v) in videos.iter().enumerate() {
            let dir = a.out.join(split).join(video_dir_name(i));
            v.hq.write_dir(&dir.join("hq"))?;
            let mut rng = seeds.child("degrade").index(i as u64).rng();
            degrade(&v.hq, &cfg.degradation, &mut rng)?.write_dir(&dir.join("lq"))?;
            write_flow_dir(&dir.join("flows"), &v.flows)?;
        }
        log::info!("wrote {count} {split} videos");
    }
    std::fs::write(a.out.join("config.toml"), cfg.to_toml_string()?)
        .with_context(|| format!("writing {}", a.out.join("config.toml").display()))?;
    Ok(())
}

/// Sorted subdirectories of `dir`.
fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn load_videos(dir: &Path) -> Result<Vec<ToyVideo>> {
    let root = if dir.join("train").is_dir() { dir.join("train") } else { dir.to_path_buf() };
    let mut videos = Vec::new();
    for sub in subdirs(&root)? {
        let hq_dir = if sub.join("hq").is_dir() { sub.join("hq") } else { sub.clone() };
        let hq = VideoClip::read_dir(&hq_dir)?;
        let flows = if sub.join("flows").is_dir() { read_flow_dir(&sub.join("flows"))? } else { Vec::new() };
        videos.push(ToyVideo { hq, flows });
    }
    if videos.is_empty() {
        return Err(usage(format!("{} holds no video directories", root.display())));
    }
    Ok(videos)
}

fn stage_config(cfg: &RunConfig, a: &TrainArgs, name: &str) -> StageConfig {
    let s = &cfg.stages;
    let mut c = match a.stage {
        StageArg::Vae => s.vae.clone(),
        StageArg::Base => s.base.clone(),
        StageArg::Sr => s.sr.clone(),
        StageArg::One => s.stage1.clone(),
        StageArg::Two => s.stage2.clone(),
        StageArg::Three => s.stage3.clone(),
    };
    // The per-stage seed selects a stream under the root seed.
    c.seed = SeedTree::new(cfg.seed).child("train").child(name).index(c.seed).seed();
    if let Some(r) = a.reference {
        c.reference = match r {
            ReferenceArg::Gt => ReferenceSource::GroundTruth,
            ReferenceArg::Lq => ReferenceSource::UpscaledInput,
        };
    }
    if let Some(n) = a.iterations {
        c.iterations = n;
    }
    c
}

fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(p) = &a.data {
        require_exists(p, "dataset")?;
    }
    if let Some(p) = &a.init {
        require_exists(p, "checkpoint")?;
    }
    let videos = match &a.data {
        Some(d) => load_videos(d)?,
        None => {
            let d = &cfg.data;
            let seed = SeedTree::new(cfg.seed).child("data").child("train").seed();
            synthesize_toy_videos(d.count, d.frames, (d.height, d.width), &d.motion, seed)?
        }
    };
    let data = TrainingSet::new(videos, cfg.degradation.clone())?;
    let name = match a.stage {
        StageArg::Vae => "vae",
        StageArg::Base => "base",
        StageArg::Sr => "sr",
        StageArg::One => "1",
        StageArg::Two => "2",
        StageArg::Three => "3",
    };
    let sc = stage_config(cfg, a, name);

    if a.stage == StageArg::Sr {
        let net = match &a.init {
            Some(p) => TinySrNet::load(p)?,
            None => TinySrNet::new(
                cfg.enhancer.sr_width,
                cfg.degradation.downscale_factor,
                SeedTree::new(cfg.seed).child("sr").seed(),
            )?,
        };
        let report = train_sr(&net, &data, &sc, 1)?;
        log_report(&report);
        net.save(&a.out)?;
        return Ok(());
    }

    let mut bundle = match &a.init {
        Some(p) => {
            let b = ModelBundle::load(p)?;
            if b.config != cfg.model {
                log::warn!("checkpoint model config differs from the run config; using the checkpoint's");
            }
            b
        }
        None => ModelBundle::new(cfg.model.clone(), DType::F32, model_seed(cfg))?,
    };
    let report = match a.stage {
        StageArg::Vae => train_vae(&mut bundle, &data, &sc)?,
        StageArg::Base => train_base(&mut bundle, &data, &sc)?,
        StageArg::One => train_stage1(&mut bundle, &data, &sc)?,
        StageArg::Two => train_stage2(&mut bundle, &data, &sc)?,
        StageArg::Three => train_stage3(&mut bundle, &data, &sc)?,
        StageArg::Sr => unreachable!("handled above"),
    };
    log_report(&report);
    bundle.save(&a.out)?;
    Ok(())
}

fn log_report(r: &StageReport) {
    let (first, last) = r.window_means(0.1);
    log::info!(
        "stage {}: {} iterations, loss {first:.5} -> {last:.5}",
        r.stage,
        r.losses.len()
    );
    for w in &r.warnings {
        log::warn!("{w}");
    }
}

fn parse_enhancer(spec: &str, scale: usize) -> Result<Box<dyn ReferenceEnhancer>> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    Ok(match kind {
        "identity" => Box::new(IdentityUpscaler { scale }),
        "oracle" => {
            let dir = Path::new(arg);
            require_exists(dir, "oracle frame directory")?;
            Box::new(OracleEnhancer::new(VideoClip::read_dir(dir)?.into_frames(), scale)?)
        }
        "net" => {
            let path = Path::new(arg);
            require_exists(path, "enhancer checkpoint")?;
            let net = TinySrNet::load(path)?;
            if net.scale() != scale {
                return Err(usage(format!("enhancer network upscales by {}, not {scale}", net.scale())));
            }
            Box::new(net)
        }
        "external" if !arg.trim().is_empty() => Box::new(ExternalEnhancer::new(arg, scale)?),
        _ => {
            return Err(usage(format!(
                "unknown enhancer `{spec}`; expected identity, oracle:<dir>, net:<checkpoint> or external:<command>"
            )))
        }
    })
}

fn sampler_options(cfg: &RunConfig, a: &UpscaleArgs) -> SamplerOptions {
    let mut o = cfg.sampler.clone();
    if a.bidirectional {
        o.bidirectional = true;
    }
    if a.unidirectional {
        o.bidirectional = false;
    }
    if let Some(t) = a.tile_size {
        let mut tile = TileOptions::with_default_overlap(t);
        if let Some(ov) = a.tile_overlap {
            tile.overlap = ov;
        }
        o.tile = Some(tile);
    }
    if let Some(s) = a.steps {
        o.steps = s;
    }
    if let Some(s) = a.sdedit_strength {
        o.sdedit_strength = s;
    }
    if let Some(s) = a.seed {
        o.seed = s;
    }
    if a.no_vae_adapter {
        o.vae_adapter = false;
    }
    o
}

fn upscale(cfg: &RunConfig, a: &UpscaleArgs) -> Result<()> {
    if let Some(m) = &a.model {
        require_exists(m, "model checkpoint")?;
    }
    require_exists(&a.input, "input directory")?;
    let opts = sampler_options(cfg, a);
    opts.validate().map_err(|e| usage(e.to_string()))?;
    let scale = a.scale.unwrap_or(cfg.degradation.downscale_factor);
    let enhancer = parse_enhancer(&a.enhancer, scale)?;
    let bundle = match &a.model {
        Some(m) if !a.frame_by_frame => Some(ModelBundle::load(m)?),
        _ => None,
    };
    let lq = VideoClip::read_dir(&a.input)?;
    let Some(bundle) = bundle else {
        let frames = lq
            .frames()
            .iter()
            .enumerate()
            .map(|(i, f)| enhancer.enhance(f, i))
            .collect::<bivsr::Result<Vec<_>>>()?;
        let out = VideoClip::new(frames)?;
        out.write_dir(&a.output)?;
        log::info!("wrote {} enhanced frames to {}", out.len(), a.output.display());
        return Ok(());
    };
    let sched = NoiseSchedule::cosine(opts.steps)?;
    let k = bundle.config.frames;
    let out = if a.long {
        run_long_vsr(&lq, enhancer.as_ref(), &bundle, &sched, &opts)?
    } else {
        if lq.len() != k {
            return Err(usage(format!(
                "input has {} frames but the model takes clips of {k}; pass --long for other lengths",
                lq.len()
            )));
        }
        let start = enhancer.enhance(lq.first(), 0)?;
        if opts.bidirectional {
            let end = enhancer.enhance(lq.last(), k - 1)?;
            bidirectional_sample(&bundle, &lq, &start, &end, &sched, &opts)?
        } else {
            unidirectional_sample(&bundle, &lq, &start, &sched, &opts)?
        }
    };
    out.write_dir(&a.output)?;
    log::info!("wrote {} frames to {}", out.len(), a.output.display());
    Ok(())
}

/// `(id, frames, flows)` directories: the root itself when it holds frames,
/// otherwise one entry per subdirectory.
fn eval_entries(a: &EvalArgs) -> Result<Vec<(String, PathBuf, PathBuf, Option<PathBuf>)>> {
    let pick = |root: &Path, inner: &str| -> PathBuf {
        if root.join(inner).is_dir() {
            root.join(inner)
        } else {
            root.to_path_buf()
        }
    };
    if !png_files(&a.pred)?.is_empty() {
        let id = a
            .pred
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        let flows = a.flows.as_ref().map(|f| pick(f, "flows"));
        return Ok(vec![(id, a.pred.clone(), pick(&a.gt, "hq"), flows)]);
    }
    let mut out = Vec::new();
    for sub in subdirs(&a.pred)? {
        let id = sub.file_name().expect("subdirectory has a name").to_string_lossy().into_owned();
        let gt = a.gt.join(&id);
        require_exists(&gt, "ground-truth video")?;
        let flows = a.flows.as_ref().map(|f| pick(&f.join(&id), "flows"));
        out.push((id, pick(&sub, "hq"), pick(&gt, "hq"), flows));
    }
    if out.is_empty() {
        return Err(usage(format!("{} holds no frames or video directories", a.pred.display())));
    }
    Ok(out)
}

fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    require_exists(&a.pred, "prediction directory")?;
    require_exists(&a.gt, "ground-truth directory")?;
    if let Some(f) = &a.flows {
        require_exists(f, "flow directory")?;
    }
    let mut videos = Vec::new();
    for (id, pred, gt, flows) in eval_entries(a)? {
        let pred = VideoClip::read_dir(&pred)?;
        let gt = VideoClip::read_dir(&gt)?;
        let flows: Option<Vec<FlowField>> = flows.map(|f| read_flow_dir(&f)).transpose()?;
        videos.push(evaluate(&id, &pred, &gt, flows.as_deref()).with_context(|| format!("video {id}"))?);
    }
    let hash = hex(&Sha256::digest(cfg.to_toml_string()?.as_bytes())[..8]);
    let report = MetricReport::from_videos(videos, Some(hash))?;
    std::fs::write(&a.report, report.to_json()?).with_context(|| format!("writing {}", a.report.display()))?;
    log::info!(
        "psnr {:.3} dB, ssim {:.4}, e_warp {}",
        report.psnr,
        report.ssim,
        report.e_warp.map_or("n/a".to_string(), |e| format!("{e:.4}"))
    );
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
