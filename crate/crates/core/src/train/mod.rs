//! SGD training, evaluation, gradient checking and ablation runs.
//!
//! A run is fully determined by its [`TrainConfig`]: sample `i` of the
//! dataset, the initial weights and the batch order are all derived from
//! `seed`. Per-sample gradients are summed in batch order, so results are
//! bit-identical across runs.

pub mod ablation;
pub mod config;

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

pub use ablation::{run_ablation, AblationCell, AblationMatrix, AblationReport, CellSummary, Comparison};
pub use config::{TrainConfig, DATA_KEYS};

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Probe, Tape};
use crate::data::{build_dataset, DegradedSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::write_atomic;
use crate::metrics::{summarize, MetricSummary};
use crate::model::{objective, save_checkpoint, MTrans};
use crate::params::ParamStore;
use crate::rng::{derive_seed, rng_from_seed, Stream};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

/// `p ← p − lr·g` for every tensor.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: T) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.tensors().iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
    }
    for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
        for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *v = *v - lr * d;
        }
    }
    Ok(())
}

/// Objective value of one sample, without gradients.
pub fn sample_loss<T: Scalar>(model: &MTrans<T>, s: &DegradedSample<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.register_frozen(model.params());
    let loss = record_loss(model, &mut tape, &pv, s)?;
    Ok(tape.value(loss).item().to_f64_lossy())
}

/// Objective value and parameter gradients of one sample.
pub fn sample_loss_and_grads<T: Scalar>(model: &MTrans<T>, s: &DegradedSample<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let pv = tape.register_params(model.params());
    let loss = record_loss(model, &mut tape, &pv, s)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item().to_f64_lossy(), pv.gradients(&grads)))
}

fn record_loss<T: Scalar>(
    model: &MTrans<T>,
    tape: &mut Tape<T>,
    pv: &crate::params::ParamVars,
    s: &DegradedSample<T>,
) -> Result<crate::autodiff::Var> {
    let cfg = model.config();
    let out = model.forward(tape, pv, &s.target_input, &s.aux_input, false)?;
    objective(
        tape,
        out.target,
        &s.target_gt.to_tensor(),
        out.aux,
        &s.aux_gt.to_tensor(),
        cfg.alpha,
        cfg.loss_reduction,
    )
}

/// Batch-mean loss and gradients, summed in the given order.
pub fn batch_loss_and_grads<T: Scalar>(model: &MTrans<T>, batch: &[&DegradedSample<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor<T>>> = None;
    for s in batch {
        let (l, g) = sample_loss_and_grads(model, s)?;
        total += l;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    for (u, &v) in x.data_mut().iter_mut().zip(y.data()) {
                        *u = *u + v;
                    }
                }
            }
        }
    }
    let m = batch.len() as f64;
    let inv = T::lit(1.0 / m);
    let grads = acc
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.map(|v| v * inv))
        .collect();
    Ok((total / m, grads))
}

/// Mean objective over a whole dataset.
pub fn dataset_loss<T: Scalar>(model: &MTrans<T>, samples: &[DegradedSample<T>]) -> Result<f64> {
    let total: f64 = samples.iter().map(|s| sample_loss(model, s)).sum::<Result<f64>>()?;
    Ok(total / samples.len().max(1) as f64)
}

/// Epoch-wise shuffled sample order; batches may straddle epochs.
#[derive(Debug)]
pub struct BatchOrder {
    seed: u64,
    n: usize,
    epoch: u64,
    queue: Vec<usize>,
}

impl BatchOrder {
    pub fn new(seed: u64, n: usize) -> Self {
        BatchOrder {
            seed,
            n,
            epoch: 0,
            queue: Vec::new(),
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.queue.is_empty() {
                let mut perm: Vec<usize> = (0..self.n).collect();
                perm.shuffle(&mut rng_from_seed(derive_seed(self.seed, Stream::Order, self.epoch)));
                self.epoch += 1;
                perm.reverse();
                self.queue = perm;
            }
            out.push(self.queue.pop().expect("non-empty queue"));
        }
        out
    }
}

/// Held-out evaluation of the target branch.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Evaluation {
    /// Network output against the fully sampled target.
    pub model: MetricSummary,
    /// Degraded input (nearest-upsampled for SR) against the same target.
    pub input: MetricSummary,
}

/// Target-branch predictions and metrics; `jobs > 1` splits the samples
/// over threads (results are identical).
pub fn evaluate<T: Scalar>(
    model: &MTrans<T>,
    samples: &[DegradedSample<T>],
    jobs: usize,
) -> Result<(Evaluation, Vec<Image<T>>)> {
    let predict = |chunk: &[DegradedSample<T>]| -> Result<Vec<Image<T>>> {
        chunk
            .iter()
            .map(|s| Ok(model.predict(&s.target_input, &s.aux_input, false)?.target))
            .collect()
    };
    let outputs: Vec<Image<T>> = if jobs <= 1 || samples.len() < 2 {
        predict(samples)?
    } else {
        let size = samples.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples.chunks(size).map(|c| scope.spawn(move || predict(c))).collect();
            let mut all = Vec::with_capacity(samples.len());
            for h in handles {
                all.extend(h.join().expect("evaluation thread panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let gts: Vec<Image<T>> = samples.iter().map(|s| s.target_gt.clone()).collect();
    let inputs: Vec<Image<T>> = samples
        .iter()
        .map(|s| s.target_input.upsample_nearest(s.target_gt.width() / s.target_input.width()))
        .collect();
    Ok((
        Evaluation {
            model: summarize(&outputs, &gts)?,
            input: summarize(&inputs, &gts)?,
        },
        outputs,
    ))
}

/// Sub-seeds actually used by a run.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub init: u64,
    /// Per-sample data, mask and noise seeds are `derive_seed(seed, stream, index)`.
    pub data_stream: u64,
    pub mask_stream: u64,
    pub noise_stream: u64,
    pub order_stream: u64,
}

impl SeedReport {
    pub fn new(seed: u64) -> Self {
        SeedReport {
            seed,
            init: derive_seed(seed, Stream::Init, 0),
            data_stream: Stream::Data as u64,
            mask_stream: Stream::Mask as u64,
            noise_stream: Stream::Noise as u64,
            order_stream: Stream::Order as u64,
        }
    }
}

/// Summary of one training run. Contains no timing, so equal configs give
/// byte-identical reports.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub config: std::collections::BTreeMap<String, String>,
    pub seeds: SeedReport,
    pub parameter_count: usize,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    /// Mean objective over the training set before the first and after the last step.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub eval: Evaluation,
}

impl TrainReport {
    /// `step i loss v` lines.
    pub fn loss_log(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "initial_loss {}", self.initial_loss);
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "step {i} loss {l}");
        }
        let _ = writeln!(s, "final_loss {}", self.final_loss);
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::invalid(e.to_string()))
    }
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub model: MTrans<T>,
    pub report: TrainReport,
    pub wall_clock: Duration,
}

fn norms_summary<T: Scalar>(params: &ParamStore<T>) -> String {
    let mut s = String::from("parameter norms:");
    for (name, t) in params.iter() {
        let _ = write!(s, " {name}={:.3e}", t.l2_norm().to_f64_lossy());
    }
    s
}

/// Trains from scratch per `cfg`.
pub fn train<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let start = Instant::now();
    cfg.validate()?;
    let spec = cfg.dataset_spec();
    let n_train = cfg.train_size as u64;
    let train_set: Vec<DegradedSample<T>> = build_dataset(&spec, 0..n_train)?;
    let eval_set: Vec<DegradedSample<T>> = build_dataset(&spec, n_train..n_train + cfg.eval_size as u64)?;
    let seeds = SeedReport::new(cfg.seed);
    let mut model = MTrans::<T>::new(cfg.model.clone(), seeds.init)?;

    let initial_loss = dataset_loss(&model, &train_set)?;
    let lr = T::lit(cfg.lr);
    let mut order = BatchOrder::new(cfg.seed, train_set.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&DegradedSample<T>> = order.next_batch(cfg.batch).into_iter().map(|i| &train_set[i]).collect();
        let (loss, grads) = batch_loss_and_grads(&model, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: norms_summary(model.params()),
            });
        }
        sgd_step(model.params_mut(), &grads, lr)?;
        log::debug!("step {step} loss {loss}");
        losses.push(loss);
    }
    let final_loss = dataset_loss(&model, &train_set)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: cfg.steps,
            detail: norms_summary(model.params()),
        });
    }
    let (eval, _) = evaluate(&model, &eval_set, 1)?;
    let report = TrainReport {
        config: cfg.to_map(),
        seeds,
        parameter_count: model.params().numel(),
        losses,
        initial_loss,
        final_loss,
        eval,
    };
    Ok(TrainOutcome {
        model,
        report,
        wall_clock: start.elapsed(),
    })
}

/// Writes `train.log`, `report.json`, `config.cfg` and the `model.ckpt`
/// checkpoint into `dir`.
pub fn write_outputs<T: Scalar>(dir: &Path, model: &MTrans<T>, report: &TrainReport, cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("train.log"), report.loss_log().as_bytes())?;
    write_atomic(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    write_atomic(&dir.join("config.cfg"), cfg.to_text().as_bytes())?;
    save_checkpoint(model, &dir.join("model.ckpt"))
}

/// Trains at the precision named in the config and optionally writes the
/// outputs; returns the report and the wall-clock time.
pub fn run_training(cfg: &TrainConfig, out: Option<&Path>) -> Result<(TrainReport, Duration)> {
    fn go<T: Scalar>(cfg: &TrainConfig, out: Option<&Path>) -> Result<(TrainReport, Duration)> {
        let o = train::<T>(cfg)?;
        if let Some(dir) = out {
            write_outputs(dir, &o.model, &o.report, cfg)?;
        }
        Ok((o.report, o.wall_clock))
    }
    match cfg.dtype {
        DType::F32 => go::<f32>(cfg, out),
        _ => go::<f64>(cfg, out),
    }
}

/// Finite-difference check of the full objective on training sample 0 with
/// freshly initialized weights, always in f64.
pub fn gradient_check(cfg: &TrainConfig, opts: GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    let sample: DegradedSample<f64> = cfg.dataset_spec().sample(0)?;
    let model = MTrans::<f64>::new(cfg.model.clone(), SeedReport::new(cfg.seed).init)?;
    let (_, analytic) = sample_loss_and_grads(&model, &sample)?;
    let f = |p: &ParamStore<f64>| -> Result<Probe> {
        let mut tape = Tape::new();
        let pv = tape.register_frozen(p);
        let loss = record_loss(&model, &mut tape, &pv, &sample)?;
        Ok(Probe {
            value: tape.value(loss).item(),
            kink_signature: tape.kink_signature(),
        })
    };
    grad_check(f, model.params(), &analytic, opts)
}
