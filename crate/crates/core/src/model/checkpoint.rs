//! Parameter checkpoints: a text manifest plus one flat `.mtt` blob.
//!
//! ```text
//! format = mtrans-checkpoint-1
//! blob = model.mtt
//! dtype = f64
//! config.height = 32
//! ...
//! param.head.tar.conv0.weight = 0/4x1x3x3/f64
//! ```
//!
//! Parameter values are `offset/shape/dtype`, with the offset counted in
//! elements into the rank-1 blob.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::kv::parse_kv;
use crate::io::mtt::{read_mtt, MttFile};
use crate::io::write_atomic;
use crate::model::{MTrans, MTransConfig};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const FORMAT: &str = "mtrans-checkpoint-1";

/// Blob path belonging to a manifest: same stem, `.mtt` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("mtt")
}

/// Manifest text for `model` whose blob is named `blob_name`.
pub fn encode_manifest<T: Scalar>(model: &MTrans<T>, blob_name: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format = {FORMAT}");
    let _ = writeln!(out, "blob = {blob_name}");
    let _ = writeln!(out, "dtype = {}", T::DTYPE);
    for (k, v) in model.config().to_kv() {
        let _ = writeln!(out, "config.{k} = {v}");
    }
    let mut offset = 0;
    for (name, t) in model.params().iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(out, "param.{name} = {offset}/{}/{}", shape.join("x"), T::DTYPE);
        offset += t.len();
    }
    out
}

/// Writes the manifest at `manifest` and the blob next to it.
pub fn save_checkpoint<T: Scalar>(model: &MTrans<T>, manifest: &Path) -> Result<()> {
    let blob = blob_path(manifest);
    if blob == manifest {
        return Err(Error::invalid(format!(
            "checkpoint manifest {} must not use the .mtt extension",
            manifest.display()
        )));
    }
    let blob_name = blob
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("bad checkpoint path {}", manifest.display())))?
        .to_string();
    let flat: Vec<T> = model
        .params()
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let n = flat.len();
    let bytes = MttFile::from_tensor(&Tensor::new(vec![n], flat)?).encode()?;
    write_atomic(&blob, &bytes)?;
    write_atomic(manifest, encode_manifest(model, &blob_name).as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
struct ParamEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
    dtype: DType,
}

/// Parsed manifest before the blob is read.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: MTransConfig,
    pub blob: PathBuf,
    pub dtype: DType,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn read_manifest(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let doc = parse_kv(&text, manifest)?;
        if !doc.sections.is_empty() {
            return Err(Error::format(manifest, "unexpected section in checkpoint manifest"));
        }
        let bad = |m: String| Error::format(manifest, m);
        let mut format = None;
        let mut blob = None;
        let mut dtype = None;
        let mut config = MTransConfig::default();
        let mut params = Vec::new();
        for e in &doc.base {
            if let Some(key) = e.key.strip_prefix("config.") {
                if !config.set_kv(key, &e.value).map_err(|err| bad(format!("line {}: {err}", e.line)))? {
                    return Err(bad(format!("line {}: unknown config key {key}", e.line)));
                }
            } else if let Some(name) = e.key.strip_prefix("param.") {
                let parts: Vec<&str> = e.value.split('/').collect();
                let [offset, shape, dt] = parts.as_slice() else {
                    return Err(bad(format!("line {}: expected offset/shape/dtype", e.line)));
                };
                let offset = offset
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad offset {offset:?}", e.line)))?;
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("line {}: bad shape {shape:?}", e.line)))?;
                let dtype = DType::parse(dt).ok_or_else(|| bad(format!("line {}: bad dtype {dt:?}", e.line)))?;
                params.push(ParamEntry {
                    name: name.to_string(),
                    offset,
                    shape,
                    dtype,
                });
            } else {
                match e.key.as_str() {
                    "format" => format = Some(e.value.clone()),
                    "blob" => blob = Some(e.value.clone()),
                    "dtype" => {
                        dtype = Some(DType::parse(&e.value).ok_or_else(|| bad(format!("bad dtype {:?}", e.value)))?)
                    }
                    other => return Err(bad(format!("line {}: unknown key {other}", e.line))),
                }
            }
        }
        if format.as_deref() != Some(FORMAT) {
            return Err(bad(format!("missing or unsupported format (expected {FORMAT})")));
        }
        let blob = blob.ok_or_else(|| bad("missing blob".into()))?;
        let dtype = dtype.ok_or_else(|| bad("missing dtype".into()))?;
        let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
        Ok(Checkpoint {
            config,
            blob: dir.join(blob),
            dtype,
            params,
        })
    }

    /// Reads the blob and rebuilds the model, checking every entry against
    /// the layout implied by `expected` (or by the stored config).
    pub fn load<T: Scalar>(&self, manifest: &Path, expected: Option<&MTransConfig>) -> Result<MTrans<T>> {
        let config = expected.cloned().unwrap_or_else(|| self.config.clone());
        let layout = crate::model::Layout::new(&config)?;
        let bad = |m: String| Error::format(manifest, m);
        if self.params.len() != layout.specs.len() {
            return Err(bad(format!(
                "checkpoint holds {} tensors, configuration needs {}",
                self.params.len(),
                layout.specs.len()
            )));
        }
        let file = read_mtt(&self.blob)?;
        if file.data.dtype() != self.dtype {
            return Err(Error::format(
                &self.blob,
                format!("blob dtype {} differs from manifest dtype {}", file.data.dtype(), self.dtype),
            ));
        }
        let flat: Tensor<T> = file.to_tensor()?;
        if flat.rank() != 1 {
            return Err(Error::format(&self.blob, "checkpoint blob must be rank 1"));
        }
        let mut store = ParamStore::new();
        let mut offset = 0;
        for (spec, entry) in layout.specs.iter().zip(&self.params) {
            if spec.name != entry.name {
                return Err(bad(format!("expected parameter {}, found {}", spec.name, entry.name)));
            }
            if spec.shape != entry.shape {
                return Err(bad(format!(
                    "parameter {} has shape {:?}, configuration needs {:?}",
                    entry.name, entry.shape, spec.shape
                )));
            }
            if entry.offset != offset || entry.dtype != self.dtype {
                return Err(bad(format!("parameter {} has inconsistent offset or dtype", entry.name)));
            }
            let n: usize = spec.shape.iter().product();
            let data = flat
                .data()
                .get(offset..offset + n)
                .ok_or_else(|| Error::format(&self.blob, "blob is shorter than the manifest"))?
                .to_vec();
            store.insert(entry.name.clone(), Tensor::new(spec.shape.clone(), data)?)?;
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::format(&self.blob, "blob is longer than the manifest"));
        }
        MTrans::from_params(config, store)
    }
}

/// Reads a checkpoint; with `expected`, every shape is validated against
/// that configuration instead of the stored one.
pub fn load_checkpoint<T: Scalar>(manifest: &Path, expected: Option<&MTransConfig>) -> Result<MTrans<T>> {
    Checkpoint::read_manifest(manifest)?.load(manifest, expected)
}
