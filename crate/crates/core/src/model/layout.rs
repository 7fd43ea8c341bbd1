//! Parameter naming, shapes and initialization.
//!
//! The layout is derived from the configuration alone, so a checkpoint can be
//! validated against it before any tensor is touched.

use crate::error::Result;
use crate::model::config::{BranchGeom, MTransConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::{normal, rng_from_seed, uniform};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Std of the learned position embeddings.
pub const POSITION_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Normal { std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub ln_q: NormIds,
    /// Absent for self-attention.
    pub ln_kv: Option<NormIds>,
    pub out: LinearIds,
}

/// One branch of one cross transformer encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBranchIds {
    pub align: LinearIds,
    pub attn: AttentionIds,
    pub ln_ffn: NormIds,
    pub ffn1: LinearIds,
    pub ffn2: LinearIds,
    pub exit: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderIds {
    pub target: EncoderBranchIds,
    pub aux: Option<EncoderBranchIds>,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchIds {
    pub head: [ConvIds; 3],
    pub position: ParamId,
    pub tail: [ConvIds; 3],
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub target: BranchIds,
    pub aux: Option<BranchIds>,
    pub encoders: Vec<EncoderIds>,
    pub specs: Vec<ParamSpec>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.specs.push(ParamSpec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) -> ConvIds {
        let weight = self.push(
            format!("{prefix}.weight"),
            vec![c_out, c_in, k, k],
            Init::Xavier {
                fan_in: c_in * k * k,
                fan_out: c_out * k * k,
            },
        );
        let bias = self.push(format!("{prefix}.bias"), vec![c_out], Init::Zeros);
        ConvIds { weight, bias }
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> LinearIds {
        let weight = self.push(
            format!("{prefix}.weight"),
            vec![d_in, d_out],
            Init::Xavier {
                fan_in: d_in,
                fan_out: d_out,
            },
        );
        let bias = self.push(format!("{prefix}.bias"), vec![d_out], Init::Zeros);
        LinearIds { weight, bias }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        let gain = self.push(format!("{prefix}.gain"), vec![d], Init::Ones);
        let bias = self.push(format!("{prefix}.bias"), vec![d], Init::Zeros);
        NormIds { gain, bias }
    }

    fn head(&mut self, branch: &str, g: &BranchGeom, c: usize) -> [ConvIds; 3] {
        [
            self.conv(&format!("head.{branch}.conv0"), g.in_channels, c, 3),
            self.conv(&format!("head.{branch}.conv1"), c, c, 3),
            self.conv(&format!("head.{branch}.conv2"), c, c, 3),
        ]
    }

    fn tail(&mut self, branch: &str, g: &BranchGeom, c: usize) -> [ConvIds; 3] {
        [
            self.conv(&format!("tail.{branch}.conv0"), c, c, 3),
            self.conv(&format!("tail.{branch}.conv1"), c, c, 3),
            self.conv(&format!("tail.{branch}.conv2"), c, g.out_channels, 1),
        ]
    }

    /// `own` is the branch's token dim, `work` the dim it attends in.
    fn encoder_branch(&mut self, prefix: &str, own: usize, work: usize, cross: bool, ffn_mult: usize) -> EncoderBranchIds {
        let align = self.linear(&format!("{prefix}.align"), own, work);
        let ln_q = self.norm(&format!("{prefix}.attn.ln_q"), work);
        let ln_kv = cross.then(|| self.norm(&format!("{prefix}.attn.ln_kv"), work));
        let out = self.linear(&format!("{prefix}.attn.out"), work, work);
        let ln_ffn = self.norm(&format!("{prefix}.ln_ffn"), work);
        let ffn1 = self.linear(&format!("{prefix}.ffn1"), work, ffn_mult * work);
        let ffn2 = self.linear(&format!("{prefix}.ffn2"), ffn_mult * work, work);
        let exit = self.linear(&format!("{prefix}.exit"), work, own);
        EncoderBranchIds {
            align,
            attn: AttentionIds { ln_q, ln_kv, out },
            ln_ffn,
            ffn1,
            ffn2,
            exit,
        }
    }
}

impl Layout {
    pub fn new(config: &MTransConfig) -> Result<Self> {
        let geom = config.validate()?;
        let c = config.channels;
        let mut b = Builder { specs: Vec::new() };

        let tar = geom.target;
        let tar_head = b.head("tar", &tar, c);
        let aux_head = geom.aux.as_ref().map(|a| b.head("aux", a, c));
        let tar_pos = b.push(
            "pos.tar".into(),
            vec![tar.tokens(), tar.dim],
            Init::Normal { std: POSITION_STD },
        );
        let aux_pos = geom.aux.as_ref().map(|a| {
            b.push(
                "pos.aux".into(),
                vec![a.tokens(), a.dim],
                Init::Normal { std: POSITION_STD },
            )
        });

        let encoders = (0..config.encoders)
            .map(|i| match &geom.aux {
                Some(a) => EncoderIds {
                    // Each branch is aligned to the other's token dim before attending.
                    target: b.encoder_branch(&format!("enc{i}.tar"), tar.dim, a.dim, true, config.ffn_mult),
                    aux: Some(b.encoder_branch(&format!("enc{i}.aux"), a.dim, tar.dim, true, config.ffn_mult)),
                },
                None => EncoderIds {
                    target: b.encoder_branch(&format!("enc{i}.tar"), tar.dim, tar.dim, false, config.ffn_mult),
                    aux: None,
                },
            })
            .collect();

        let tar_tail = b.tail("tar", &tar, c);
        let aux_tail = geom.aux.as_ref().map(|a| b.tail("aux", a, c));

        Ok(Layout {
            target: BranchIds {
                head: tar_head,
                position: tar_pos,
                tail: tar_tail,
            },
            aux: match (aux_head, aux_pos, aux_tail) {
                (Some(head), Some(position), Some(tail)) => Some(BranchIds { head, position, tail }),
                _ => None,
            },
            encoders,
            specs: b.specs,
        })
    }

    pub fn numel(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Draws every parameter in f64 from one seeded stream, then casts.
    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        for spec in &self.specs {
            let n: usize = spec.shape.iter().product();
            let values: Vec<f64> = match spec.init {
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| uniform(&mut rng, -a, a)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal { std } => (0..n).map(|_| normal(&mut rng, 0.0, std)).collect(),
            };
            store.insert(spec.name.clone(), Tensor::from_f64(&spec.shape, &values)?)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::FusionVariant;

    #[test]
    fn names_are_unique_and_ordered() {
        let layout = Layout::new(&MTransConfig::toy()).unwrap();
        let mut names: Vec<_> = layout.specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names[0], "head.tar.conv0.weight");
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn aligned_dims_cross_between_branches() {
        let cfg = MTransConfig::toy();
        let layout = Layout::new(&cfg).unwrap();
        let spec = |name: &str| layout.specs.iter().find(|s| s.name == name).unwrap().shape.clone();
        assert_eq!(spec("enc0.tar.align.weight"), vec![64, 256]);
        assert_eq!(spec("enc0.aux.align.weight"), vec![256, 64]);
        assert_eq!(spec("enc1.tar.exit.weight"), vec![256, 64]);
        assert_eq!(spec("enc1.aux.ffn1.weight"), vec![64, 128]);
        assert_eq!(spec("pos.aux"), vec![16, 256]);
        assert_eq!(spec("tail.aux.conv2.weight"), vec![1, 4, 1, 1]);
    }

    #[test]
    fn early_fusion_has_one_branch() {
        let cfg = MTransConfig {
            variant: FusionVariant::EarlyFusion,
            ..MTransConfig::toy()
        };
        let layout = Layout::new(&cfg).unwrap();
        assert!(layout.aux.is_none());
        assert!(layout.specs.iter().all(|s| !s.name.contains(".aux")));
        assert!(layout.specs.iter().all(|s| !s.name.contains("ln_kv")));
        let first = &layout.specs[0];
        assert_eq!(first.shape, vec![4, 2, 3, 3]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let layout = Layout::new(&MTransConfig::toy()).unwrap();
        let a: ParamStore<f64> = layout.init(3).unwrap();
        let b: ParamStore<f64> = layout.init(3).unwrap();
        let c: ParamStore<f64> = layout.init(4).unwrap();
        assert_eq!(a.tensors(), b.tensors());
        assert_ne!(a.tensors(), c.tensors());
        assert_eq!(a.numel(), layout.numel());
        for (spec, (_, t)) in layout.specs.iter().zip(a.iter()) {
            match spec.init {
                Init::Xavier { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    assert!(t.data().iter().all(|v| v.abs() <= bound));
                }
                Init::Zeros => assert!(t.data().iter().all(|&v| v == 0.0)),
                Init::Ones => assert!(t.data().iter().all(|&v| v == 1.0)),
                Init::Normal { .. } => {}
            }
        }
    }
}
