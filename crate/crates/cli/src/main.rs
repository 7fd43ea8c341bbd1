//! `mtrans` command-line tool.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, out-of-range
//! selections), 2 for runtime failures (unreadable files, invalid configs,
//! failed gradient checks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use mtrans::autodiff::GradCheckOptions;
use mtrans::data::{build_dataset, load_volume, make_synthetic_pair, DegradedSample};
use mtrans::io::mtt::{read_tensor, write_tensor};
use mtrans::io::pgm::write_pgm16;
use mtrans::io::write_atomic;
use mtrans::kspace::{default_center_fraction, degrade_lr, fft2, make_mask, undersample, zero_fill, MaskKind, SamplingMask};
use mtrans::model::{attention_map, load_checkpoint, Branch, Checkpoint, MTrans};
use mtrans::train::{evaluate, gradient_check, run_ablation, run_training, AblationMatrix, TrainConfig};
use mtrans::{ComplexGrid, DType, Image, Scalar, Tensor};

#[derive(Parser, Debug)]
#[command(name = "mtrans", version, about = "Multi-modal transformer for accelerated MR imaging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a column undersampling mask as a rank-1 .mtt tensor.
    Mask {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["4", "6", "8"]))]
        accel: String,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fully sampled center fraction (default depends on --accel).
        #[arg(long)]
        center_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic paired-modality volumes (fully sampled and degraded).
    Dataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Undersample (recon) or truncate (sr) the k-space of an image or volume.
    Degrade {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long = "in")]
        input: PathBuf,
        /// Mask .mtt for --task recon.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Scale factor for --task sr.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config; writes train.log, report.json, config.cfg and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out samples of a config.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluation threads.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        jobs: u64,
    },
    /// Finite-difference check of the full objective; exits 2 when it fails.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of an ablation matrix and compare them sample by sample.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export attention maps of a checkpoint for one sample.
    ///
    /// With --stage and --head, --out names one PGM file; otherwise --out is
    /// a directory receiving every stage, branch and head. Each PGM comes
    /// with an .mtt holding the raw attention weights.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: u64,
        #[arg(long, requires = "head")]
        stage: Option<usize>,
        #[arg(long, requires = "stage")]
        head: Option<usize>,
        #[arg(long, value_enum, default_value_t = BranchArg::Tar)]
        branch: BranchArg,
        /// Query token (default: the token at the centre of the grid).
        #[arg(long)]
        query: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Random,
    Equispaced,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Recon,
    Sr,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BranchArg {
    Tar,
    Aux,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] mtrans::Error),
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| mtrans::Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn to_json<S: serde::Serialize>(value: &S) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| mtrans::Error::InvalidArgument(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn stack(images: &[Image<f64>]) -> mtrans::Result<Tensor<f64>> {
    let (h, w) = images[0].dims();
    let data = images.iter().flat_map(|i| i.data().iter().copied()).collect();
    Tensor::new(vec![images.len(), h, w], data)
}

fn cmd_mask(kind: KindArg, accel: &str, width: usize, seed: u64, cf: Option<f64>, out: &Path) -> CliResult<()> {
    let accel: u32 = accel.parse().map_err(|_| usage(format!("bad --accel {accel}")))?;
    if width == 0 || !width.is_power_of_two() {
        return Err(usage(format!("--width must be a power of two, got {width}")));
    }
    let kind = match kind {
        KindArg::Random => MaskKind::Random,
        KindArg::Equispaced => MaskKind::Equispaced,
    };
    let cf = cf.or_else(|| default_center_fraction(accel)).expect("accel is 4, 6 or 8");
    let mask = make_mask(kind, accel, cf, width, seed)?;
    write_tensor(out, &mask.to_tensor::<f32>())?;
    println!("{} of {} columns sampled", mask.count(), width);
    Ok(())
}

fn cmd_dataset(config: Option<&Path>, count: usize, seed: Option<u64>, out: &Path) -> CliResult<()> {
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let cfg = load_config(config, seed)?;
    let spec = cfg.dataset_spec();
    let samples: Vec<DegradedSample<f64>> = build_dataset(&spec, 0..count as u64)?;
    let pairs: Vec<(Image<f64>, Image<f64>)> = (0..count as u64).map(|i| make_synthetic_pair(&spec.phantom, i)).collect();
    let aux: Vec<Image<f64>> = pairs.iter().map(|p| p.0.clone()).collect();
    let target: Vec<Image<f64>> = pairs.iter().map(|p| p.1.clone()).collect();
    let inputs: Vec<Image<f64>> = samples.iter().map(|s| s.target_input.clone()).collect();
    let aux_inputs: Vec<Image<f64>> = samples.iter().map(|s| s.aux_input.clone()).collect();
    create_dir(out)?;
    write_tensor(&out.join("target.mtt"), &stack(&target)?)?;
    write_tensor(&out.join("aux.mtt"), &stack(&aux)?)?;
    write_tensor(&out.join("target_input.mtt"), &stack(&inputs)?)?;
    write_tensor(&out.join("aux_input.mtt"), &stack(&aux_inputs)?)?;
    write_atomic(&out.join("config.cfg"), cfg.to_text().as_bytes())?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn cmd_degrade(task: TaskArg, input: &Path, mask: Option<&Path>, scale: Option<usize>, out: &Path) -> CliResult<()> {
    let op: Box<dyn Fn(&ComplexGrid<f64>) -> mtrans::Result<Image<f64>>> = match (task, mask, scale) {
        (TaskArg::Recon, Some(m), None) => {
            let mask = SamplingMask::from_tensor(&read_tensor::<f64>(m)?)?;
            Box::new(move |k| zero_fill(&undersample(k, &mask)?))
        }
        (TaskArg::Sr, None, Some(s)) => {
            if s == 0 || !s.is_power_of_two() {
                return Err(usage(format!("--scale must be a power of two, got {s}")));
            }
            Box::new(move |k| degrade_lr(k, s))
        }
        (TaskArg::Recon, _, _) => return Err(usage("--task recon takes --mask and no --scale")),
        (TaskArg::Sr, _, _) => return Err(usage("--task sr takes --scale and no --mask")),
    };
    let rank = read_tensor::<f64>(input)?.rank();
    let images: Vec<Image<f64>> = load_volume(input)?;
    let degraded = images
        .iter()
        .map(|img| op(&fft2(&ComplexGrid::from_real(img))?))
        .collect::<mtrans::Result<Vec<_>>>()?;
    let t = if rank == 2 {
        let (h, w) = degraded[0].dims();
        Tensor::new(vec![h, w], degraded[0].data().to_vec())?
    } else {
        stack(&degraded)?
    };
    write_tensor(out, &t)?;
    Ok(())
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let cfg = load_config(Some(config), seed)?;
    let (report, elapsed) = run_training(&cfg, Some(out))?;
    println!(
        "loss {:.6} -> {:.6}; held-out psnr {:.3} dB (input {:.3} dB)",
        report.initial_loss, report.final_loss, report.eval.model.psnr.mean, report.eval.input.psnr.mean
    );
    eprintln!("trained {} steps in {:.2}s", cfg.steps, elapsed.as_secs_f64());
    Ok(())
}

fn cmd_eval(ckpt: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>, jobs: usize) -> CliResult<()> {
    let manifest = Checkpoint::read_manifest(ckpt)?;
    let mut cfg = load_config(config, seed)?;
    if config.is_none() {
        cfg.model = manifest.config.clone();
    }
    fn go<T: Scalar>(ckpt: &Path, cfg: &TrainConfig, out: &Path, jobs: usize) -> CliResult<()> {
        let model: MTrans<T> = load_checkpoint(ckpt, Some(&cfg.model))?;
        let start = cfg.train_size as u64;
        let samples: Vec<DegradedSample<T>> = build_dataset(&cfg.dataset_spec(), start..start + cfg.eval_size as u64)?;
        let t0 = Instant::now();
        let (eval, outputs) = evaluate(&model, &samples, jobs)?;
        eprintln!("evaluated {} samples in {:.2}s", samples.len(), t0.elapsed().as_secs_f64());
        create_dir(out)?;
        let json = to_json(&eval)?;
        write_atomic(&out.join("eval.json"), json.as_bytes())?;
        let outputs: Vec<Image<f64>> = outputs.iter().map(|o| o.cast()).collect();
        write_tensor(&out.join("predictions.mtt"), &stack(&outputs)?)?;
        println!(
            "psnr {:.3} ± {:.3} dB, ssim {:.4}, nmse {:.5} (input psnr {:.3} dB)",
            eval.model.psnr.mean, eval.model.psnr.std, eval.model.ssim.mean, eval.model.nmse.mean, eval.input.psnr.mean
        );
        Ok(())
    }
    match manifest.dtype {
        DType::F32 => go::<f32>(ckpt, &cfg, out, jobs),
        _ => go::<f64>(ckpt, &cfg, out, jobs),
    }
}

fn cmd_gradcheck(
    config: &Path,
    seed: Option<u64>,
    coords: usize,
    eps: f64,
    tolerance: f64,
    out: Option<&Path>,
) -> CliResult<bool> {
    if coords == 0 || !(eps > 0.0) || !(tolerance > 0.0) {
        return Err(usage("--coords, --eps and --tolerance must be positive"));
    }
    let cfg = load_config(Some(config), seed)?;
    let opts = GradCheckOptions {
        eps,
        coords_per_param: coords,
        seed: mtrans::rng::derive_seed(cfg.seed, mtrans::rng::Stream::GradCheck, 0),
        ..GradCheckOptions::default()
    };
    let t0 = Instant::now();
    let report = gradient_check(&cfg, opts)?;
    for p in &report.params {
        println!(
            "{:<40} checked {:>3} excluded {:>3} max_rel_err {:.3e}",
            p.name, p.checked, p.excluded, p.max_rel_err
        );
    }
    let err = report.max_rel_err();
    let pass = err < tolerance;
    println!(
        "max_rel_err {err:.3e} over {} coordinates: {}",
        report.checked(),
        if pass { "pass" } else { "FAIL" }
    );
    eprintln!("gradient check took {:.2}s", t0.elapsed().as_secs_f64());
    if let Some(path) = out {
        let json = to_json(&report)?;
        write_atomic(path, json.as_bytes())?;
    }
    Ok(pass)
}

fn cmd_ablate(matrix: &Path, out: &Path) -> CliResult<()> {
    let matrix = AblationMatrix::from_file(matrix)?;
    create_dir(out)?;
    let report = run_ablation(&matrix, Some(out))?;
    print!("{}", report.to_text());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_attn(
    ckpt: &Path,
    config: Option<&Path>,
    sample: u64,
    stage: Option<usize>,
    head: Option<usize>,
    branch: BranchArg,
    query: Option<usize>,
    out: &Path,
) -> CliResult<()> {
    let manifest = Checkpoint::read_manifest(ckpt)?;
    let mut cfg = load_config(config, None)?;
    cfg.model = manifest.config.clone();
    let model_cfg = &cfg.model;
    let branch = match branch {
        BranchArg::Tar => Branch::Target,
        BranchArg::Aux => Branch::Aux,
    };
    if let (Some(k), Some(j)) = (stage, head) {
        if k >= model_cfg.encoders {
            return Err(usage(format!("--stage {k} out of range (0..{})", model_cfg.encoders)));
        }
        if j >= model_cfg.heads {
            return Err(usage(format!("--head {j} out of range (0..{})", model_cfg.heads)));
        }
    }
    let geometry = model_cfg.validate()?;
    let branches: Vec<Branch> = match (stage, geometry.aux.is_some()) {
        (Some(_), false) if branch == Branch::Aux => return Err(usage("this model has no auxiliary branch")),
        (Some(_), _) => vec![branch],
        (None, true) => vec![Branch::Target, Branch::Aux],
        (None, false) => vec![Branch::Target],
    };

    let model: MTrans<f64> = match manifest.dtype {
        DType::F32 => {
            let m: MTrans<f32> = manifest.load(ckpt, None)?;
            let params = m.params().iter().map(|(n, t)| (n.to_string(), t.cast::<f64>()));
            let mut store = mtrans::ParamStore::new();
            for (n, t) in params {
                store.insert(n, t)?;
            }
            MTrans::from_params(model_cfg.clone(), store)?
        }
        _ => manifest.load(ckpt, None)?,
    };
    let s: DegradedSample<f64> = cfg.dataset_spec().sample(sample)?;
    let pred = model.predict(&s.target_input, &s.aux_input, true)?;
    let (h, w) = (model_cfg.height, model_cfg.width);

    let export = |k: usize, j: usize, b: Branch, pgm: &Path| -> CliResult<()> {
        let rec = pred
            .attention
            .iter()
            .find(|r| r.stage == k && r.head == j && r.branch == b)
            .ok_or_else(|| usage(format!("no attention for stage {k} head {j} branch {b}")))?;
        let rows = rec.weights.shape()[0];
        let q = query.unwrap_or_else(|| {
            let (gh, gw) = rec.own_grid;
            (gh / 2) * gw + gw / 2
        });
        if q >= rows {
            return Err(usage(format!("--query {q} out of range (0..{rows})")));
        }
        let map = attention_map(&pred.attention, k, j, b, q, h, w)?;
        write_pgm16(pgm, w, h, map.data())?;
        write_tensor(&pgm.with_extension("mtt"), &rec.weights)?;
        Ok(())
    };

    match (stage, head) {
        (Some(k), Some(j)) => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            export(k, j, branches[0], out)?;
        }
        _ => {
            create_dir(out)?;
            let mut n = 0;
            for k in 0..model_cfg.encoders {
                for &b in &branches {
                    for j in 0..model_cfg.heads {
                        export(k, j, b, &out.join(format!("stage{k}_{b}_head{j}.pgm")))?;
                        n += 1;
                    }
                }
            }
            println!("wrote {n} attention maps to {}", out.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::Mask {
            kind,
            accel,
            width,
            seed,
            center_fraction,
            out,
        } => cmd_mask(kind, &accel, width, seed, center_fraction, &out)?,
        Command::Dataset { config, count, seed, out } => cmd_dataset(config.as_deref(), count, seed, &out)?,
        Command::Degrade {
            task,
            input,
            mask,
            scale,
            out,
        } => cmd_degrade(task, &input, mask.as_deref(), scale, &out)?,
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed)?,
        Command::Eval {
            ckpt,
            config,
            out,
            seed,
            jobs,
        } => cmd_eval(&ckpt, config.as_deref(), &out, seed, jobs as usize)?,
        Command::Gradcheck {
            config,
            seed,
            coords,
            eps,
            tolerance,
            out,
        } => return cmd_gradcheck(&config, seed, coords, eps, tolerance, out.as_deref()),
        Command::Ablate { matrix, out } => cmd_ablate(&matrix, &out)?,
        Command::Attn {
            ckpt,
            config,
            sample,
            stage,
            head,
            branch,
            query,
            out,
        } => cmd_attn(&ckpt, config.as_deref(), sample, stage, head, branch, query, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
