//! The dual-branch network: conv heads, multi-scale patch tokens with
//! learned positions, cascaded cross transformer encoders, conv tails, and
//! the weighted two-modality L1 objective.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod layout;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{blob_path, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{BranchGeom, FusionVariant, Geometry, LossReduction, MTransConfig, Task};
pub use layout::{Init, Layout, ParamSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Target,
    Aux,
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::Target => "tar",
            Branch::Aux => "aux",
        })
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tar" | "target" => Ok(Branch::Target),
            "aux" => Ok(Branch::Aux),
            other => Err(Error::config(format!("unknown branch {other:?} (expected tar|aux)"))),
        }
    }
}

/// Attention weights of one head in one encoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub stage: usize,
    pub branch: Branch,
    pub head: usize,
    /// `[own tokens × (own + other tokens)]`; for self-attention `[own × own]`.
    pub weights: Tensor<T>,
    pub own_grid: (usize, usize),
    pub other_grid: Option<(usize, usize)>,
}

/// Tape handles of one forward pass.
#[derive(Debug)]
pub struct ForwardVars<T> {
    /// `[1×H×W]`
    pub target: Var,
    /// `[1×H×W]`
    pub aux: Var,
    pub attention: Vec<AttentionRecord<T>>,
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub target: Image<T>,
    pub aux: Image<T>,
    pub attention: Vec<AttentionRecord<T>>,
}

#[derive(Clone, Debug)]
pub struct MTrans<T> {
    config: MTransConfig,
    geometry: Geometry,
    layout: Layout,
    params: ParamStore<T>,
}

impl<T: Scalar> MTrans<T> {
    /// Freshly initialized model.
    pub fn new(config: MTransConfig, seed: u64) -> Result<Self> {
        let layout = Layout::new(&config)?;
        let params = layout.init(seed)?;
        Self::from_params(config, params)
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: MTransConfig, params: ParamStore<T>) -> Result<Self> {
        let geometry = config.validate()?;
        let layout = Layout::new(&config)?;
        if params.len() != layout.specs.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                layout.specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in layout.specs.iter().zip(params.iter()) {
            if spec.name != name {
                return Err(Error::config(format!("expected parameter {}, found {name}", spec.name)));
            }
            if spec.shape != t.shape() {
                return Err(Error::shape("parameter", &spec.shape, t.shape()));
            }
        }
        Ok(MTrans {
            config,
            geometry,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &MTransConfig {
        &self.config
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Records the full pipeline on `tape` using parameter handles `pv`.
    /// With `capture`, every head's attention matrix is copied out.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        target_input: &Image<T>,
        aux_input: &Image<T>,
        capture: bool,
    ) -> Result<ForwardVars<T>> {
        let cfg = &self.config;
        let (th, tw) = cfg.target_input_dims();
        if target_input.dims() != (th, tw) {
            return Err(Error::shape("target input", &[th, tw], &[target_input.height(), target_input.width()]));
        }
        if aux_input.dims() != (cfg.height, cfg.width) {
            return Err(Error::shape(
                "aux input",
                &[cfg.height, cfg.width],
                &[aux_input.height(), aux_input.width()],
            ));
        }
        let eps = T::lit(cfg.eps_ln);
        let g = self.geometry;
        let lay = &self.layout;

        let tar_in = match g.aux {
            Some(_) => tape.constant(target_input.to_tensor()),
            None => {
                let mut stacked = target_input.upsample_nearest(cfg.scale).into_data();
                stacked.extend_from_slice(aux_input.data());
                tape.constant(Tensor::new(vec![2, cfg.height, cfg.width], stacked)?)
            }
        };
        let f_tar = layers::conv_stack(tape, pv, &lay.target.head, tar_in)?;
        let seq = layers::patchify(tape, f_tar, g.target.patch)?;
        let mut z_tar = tape.add(seq, pv.var(lay.target.position))?;

        let mut z_aux = match (&lay.aux, &g.aux) {
            (Some(ids), Some(ag)) => {
                let x = tape.constant(aux_input.to_tensor());
                let f = layers::conv_stack(tape, pv, &ids.head, x)?;
                let seq = layers::patchify(tape, f, ag.patch)?;
                Some(tape.add(seq, pv.var(ids.position))?)
            }
            _ => None,
        };

        let mut attention = Vec::new();
        for (stage, enc) in lay.encoders.iter().enumerate() {
            let (next_tar, w_tar) = layers::encoder_branch(tape, pv, &enc.target, z_tar, z_aux, cfg.heads, eps)?;
            let mut w_aux = Vec::new();
            let next_aux = match (z_aux, &enc.aux) {
                (Some(za), Some(ids)) => {
                    let (n, w) = layers::encoder_branch(tape, pv, ids, za, Some(z_tar), cfg.heads, eps)?;
                    w_aux = w;
                    Some(n)
                }
                _ => None,
            };
            if capture {
                let other = g.aux.map(|a| a.grid);
                for (head, &w) in w_tar.iter().enumerate() {
                    attention.push(AttentionRecord {
                        stage,
                        branch: Branch::Target,
                        head,
                        weights: tape.value(w).clone(),
                        own_grid: g.target.grid,
                        other_grid: other,
                    });
                }
                if let Some(ag) = g.aux {
                    for (head, &w) in w_aux.iter().enumerate() {
                        attention.push(AttentionRecord {
                            stage,
                            branch: Branch::Aux,
                            head,
                            weights: tape.value(w).clone(),
                            own_grid: ag.grid,
                            other_grid: Some(g.target.grid),
                        });
                    }
                }
            }
            z_tar = next_tar;
            z_aux = next_aux;
        }

        let c = cfg.channels;
        let tail = |tape: &mut Tape<T>, z: Var, ids: &layout::BranchIds, bg: &BranchGeom| -> Result<Var> {
            let f = layers::unpatchify(tape, z, c, bg.height, bg.width, bg.patch)?;
            let out = layers::conv_stack(tape, pv, &ids.tail, f)?;
            if bg.shuffle > 1 {
                tape.pixel_shuffle(out, bg.shuffle)
            } else {
                Ok(out)
            }
        };
        let out_tar = tail(tape, z_tar, &lay.target, &g.target)?;
        let (target, aux) = match (z_aux, &lay.aux, &g.aux) {
            (Some(za), Some(ids), Some(ag)) => (out_tar, tail(tape, za, ids, ag)?),
            _ => {
                // Early fusion: channel 0 restores the target, channel 1 the auxiliary.
                let n = cfg.height * cfg.width;
                let shape = [1, cfg.height, cfg.width];
                let t = tape.gather(out_tar, (0..n).collect(), &shape)?;
                let a = tape.gather(out_tar, (n..2 * n).collect(), &shape)?;
                (t, a)
            }
        };
        Ok(ForwardVars {
            target,
            aux,
            attention,
        })
    }

    /// Inference on a throwaway tape without gradient bookkeeping.
    pub fn predict(&self, target_input: &Image<T>, aux_input: &Image<T>, capture: bool) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let pv = tape.register_frozen(&self.params);
        let out = self.forward(&mut tape, &pv, target_input, aux_input, capture)?;
        Ok(Prediction {
            target: Image::from_tensor(tape.value(out.target))?,
            aux: Image::from_tensor(tape.value(out.aux))?,
            attention: out.attention,
        })
    }
}

/// `α·ℓ(x'_tar, x_tar) + (1 − α)·ℓ(x'_aux, x_aux)` with `ℓ` the per-image L1
/// term under the given reduction.
pub fn objective<T: Scalar>(
    tape: &mut Tape<T>,
    out_target: Var,
    gt_target: &Tensor<T>,
    out_aux: Var,
    gt_aux: &Tensor<T>,
    alpha: f64,
    reduction: LossReduction,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut l1 = |x: Var, gt: &Tensor<T>| match reduction {
        LossReduction::Mean => tape.mean_abs_error(x, gt),
        LossReduction::Sum => tape.sum_abs_error(x, gt),
    };
    let lt = l1(out_target, gt_target)?;
    let la = l1(out_aux, gt_aux)?;
    let lt = tape.scale(lt, T::lit(alpha));
    let la = tape.scale(la, T::lit(1.0 - alpha));
    tape.add(lt, la)
}

/// Heat map of one query token's attention over the other branch's tokens
/// (own tokens for self-attention), bilinearly resized to `height×width`
/// and divided by its maximum.
pub fn attention_map<T: Scalar>(
    records: &[AttentionRecord<T>],
    stage: usize,
    head: usize,
    branch: Branch,
    query: usize,
    height: usize,
    width: usize,
) -> Result<Image<T>> {
    let stages = records.iter().map(|r| r.stage + 1).max().unwrap_or(0);
    if stage >= stages {
        return Err(Error::invalid(format!("stage {stage} out of range (0..{stages})")));
    }
    let heads = records.iter().filter(|r| r.stage == stage && r.branch == branch).count();
    let rec = records
        .iter()
        .find(|r| r.stage == stage && r.head == head && r.branch == branch)
        .ok_or_else(|| Error::invalid(format!("head {head} of {branch} branch out of range (0..{heads})")))?;
    let (rows, cols) = rec.weights.dims2("attention_map")?;
    if query >= rows {
        return Err(Error::invalid(format!("query token {query} out of range (0..{rows})")));
    }
    let row = &rec.weights.data()[query * cols..(query + 1) * cols];
    let ((gh, gw), values) = match rec.other_grid {
        Some(grid) => (grid, &row[rows..]),
        None => (rec.own_grid, row),
    };
    let coarse = Image::new(gh, gw, values.to_vec())?;
    let map = coarse.resize_bilinear(height, width);
    let max = map.max();
    Ok(if max > T::zero() { map.map(|v| v / max) } else { map })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(cfg: &MTransConfig) -> (Image<f64>, Image<f64>) {
        let (th, tw) = cfg.target_input_dims();
        let t = Image::from_fn(th, tw, |y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        let a = Image::from_fn(cfg.height, cfg.width, |y, x| ((y + 2 * x) % 5) as f64 / 4.0);
        (t, a)
    }

    #[test]
    fn output_shapes_for_all_variants_and_tasks() {
        for variant in [
            FusionVariant::MTrans,
            FusionVariant::EarlyFusion,
            FusionVariant::SingleScaleLarge,
            FusionVariant::SingleScaleSmall,
        ] {
            for (task, scale) in [(Task::Reconstruction, 1), (Task::SuperResolution, 2)] {
                let cfg = MTransConfig {
                    height: 16,
                    width: 16,
                    encoders: 1,
                    variant,
                    task,
                    scale,
                    ..MTransConfig::toy()
                };
                let model = MTrans::<f64>::new(cfg.clone(), 1).unwrap();
                let (t, a) = inputs(&cfg);
                let p = model.predict(&t, &a, true).unwrap();
                assert_eq!(p.target.dims(), (16, 16));
                assert_eq!(p.aux.dims(), (16, 16));
                let per_stage = if variant == FusionVariant::EarlyFusion { 2 } else { 4 };
                assert_eq!(p.attention.len(), per_stage);
            }
        }
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let cfg = MTransConfig {
            height: 16,
            width: 16,
            encoders: 1,
            ..MTransConfig::toy()
        };
        let model = MTrans::<f64>::new(cfg, 1).unwrap();
        let bad = Image::zeros(8, 8);
        let ok = Image::zeros(16, 16);
        assert!(model.predict(&bad, &ok, false).is_err());
        assert!(model.predict(&ok, &bad, false).is_err());
    }

    #[test]
    fn dead_network_outputs_zero() {
        let cfg = MTransConfig {
            height: 16,
            width: 16,
            encoders: 1,
            ..MTransConfig::toy()
        };
        let mut model = MTrans::<f64>::new(cfg.clone(), 2).unwrap();
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            if name.starts_with("head.") || name.starts_with("tail.") || name.starts_with("pos.") {
                let t = model.params_mut().by_name_mut(&name).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (t, a) = inputs(&cfg);
        let p = model.predict(&t, &a, false).unwrap();
        assert!(p.target.data().iter().all(|&v| v == 0.0));
        assert!(p.aux.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_hand_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 2], 0.2));
        let y = tape.constant(Tensor::full(&[1, 2, 2], 0.1));
        let zeros = Tensor::zeros(&[1, 2, 2]);
        let l = objective(&mut tape, x, &zeros, y, &zeros, 0.9, LossReduction::Mean).unwrap();
        assert!((tape.value(l).item() - 0.19).abs() < 1e-15);
        let l = objective(&mut tape, x, &zeros, y, &zeros, 0.9, LossReduction::Sum).unwrap();
        assert!((tape.value(l).item() - 0.76).abs() < 1e-15);
        let exact = tape.value(x).clone();
        let l = objective(&mut tape, x, &exact, x, &exact, 0.5, LossReduction::Mean).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(objective(&mut tape, x, &zeros, y, &zeros, 1.5, LossReduction::Mean).is_err());
    }

    fn record(weights: Tensor<f64>, other: Option<(usize, usize)>) -> AttentionRecord<f64> {
        AttentionRecord {
            stage: 0,
            branch: Branch::Target,
            head: 0,
            weights,
            own_grid: (1, 2),
            other_grid: other,
        }
    }

    #[test]
    fn uniform_attention_gives_constant_map() {
        // 2 own tokens, 4 other tokens on a 2×2 grid.
        let w = Tensor::from_fn(&[2, 6], |_| 1.0 / 6.0);
        let map = attention_map(&[record(w, Some((2, 2)))], 0, 0, Branch::Target, 1, 8, 8).unwrap();
        assert!(map.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn one_hot_attention_peaks_in_its_tile() {
        let mut w = Tensor::zeros(&[2, 6]);
        w.data_mut()[2 + 3] = 1.0; // row 0, other token 3 = tile (1, 1)
        let map = attention_map(&[record(w, Some((2, 2)))], 0, 0, Branch::Target, 0, 8, 8).unwrap();
        assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for y in 0..8 {
            for x in 0..8 {
                let in_tile = y >= 4 && x >= 4;
                if !in_tile {
                    assert!(map.get(y, x) < 1.0);
                }
            }
        }
        assert_eq!(map.get(7, 7), 1.0);
        assert_eq!(map.get(0, 0), 0.0);
    }

    #[test]
    fn attention_map_range_errors() {
        let w = Tensor::from_fn(&[2, 6], |_| 1.0 / 6.0);
        let recs = [record(w, Some((2, 2)))];
        assert!(attention_map(&recs, 1, 0, Branch::Target, 0, 4, 4).is_err());
        assert!(attention_map(&recs, 0, 1, Branch::Target, 0, 4, 4).is_err());
        assert!(attention_map(&recs, 0, 0, Branch::Target, 2, 4, 4).is_err());
        assert!(attention_map(&recs, 0, 0, Branch::Aux, 0, 4, 4).is_err());
    }
}
