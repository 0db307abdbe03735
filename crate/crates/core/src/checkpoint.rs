//! Tensor checkpoints: a directory holding `manifest.txt` and one raw
//! little-endian binary file per tensor.
//!
//! Manifest lines are `name shape dtype file`, with the shape written as
//! `AxB` (`scalar` for rank 0) and dtype `f32` or `u32`. Lines starting with
//! `#` are comments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{format, Error, Result};
use crate::nn::{Activation, Dense, DenseNet, AdamState};
use crate::real::Real;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    fn dtype(&self) -> &'static str {
        match self.data {
            TensorData::F32(_) => "f32",
            TensorData::U32(_) => "u32",
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn file_name(name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{clean}.bin")
}

/// Named tensors in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn put_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(
            name.to_string(),
            Tensor {
                shape: shape.to_vec(),
                data: TensorData::F32(data),
            },
        );
    }

    pub fn put_u32(&mut self, name: &str, shape: &[usize], data: Vec<u32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(
            name.to_string(),
            Tensor {
                shape: shape.to_vec(),
                data: TensorData::U32(data),
            },
        );
    }

    pub fn put_u64s(&mut self, name: &str, values: &[u64]) {
        let words = values.iter().flat_map(|v| [*v as u32, (v >> 32) as u32]).collect();
        self.put_u32(name, &[values.len(), 2], words);
    }

    /// 64-bit floats stored bit-exactly as pairs of words.
    pub fn put_f64s(&mut self, name: &str, values: &[f64]) {
        let bits: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        self.put_u64s(name, &bits);
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format {
                path: PathBuf::from(name),
                detail: "tensor missing from checkpoint".into(),
            })
    }

    pub fn get_f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let t = self.get(name)?;
        match &t.data {
            TensorData::F32(v) => Ok((&t.shape, v)),
            _ => Err(format(name, "expected f32 tensor")),
        }
    }

    pub fn get_u32(&self, name: &str) -> Result<(&[usize], &[u32])> {
        let t = self.get(name)?;
        match &t.data {
            TensorData::U32(v) => Ok((&t.shape, v)),
            _ => Err(format(name, "expected u32 tensor")),
        }
    }

    pub fn get_u64s(&self, name: &str) -> Result<Vec<u64>> {
        let (shape, w) = self.get_u32(name)?;
        if shape.len() != 2 || shape[1] != 2 {
            return Err(format(name, "expected an n×2 word tensor"));
        }
        Ok(w.chunks(2).map(|c| c[0] as u64 | (c[1] as u64) << 32).collect())
    }

    pub fn get_f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get_u64s(name)?.into_iter().map(f64::from_bits).collect())
    }

    /// Stores layer weights, biases and activation codes under `prefix`.
    pub fn put_net<T: Real>(&mut self, prefix: &str, net: &DenseNet<T>) {
        let mut codes = Vec::with_capacity(net.layers().len());
        for (i, l) in net.layers().iter().enumerate() {
            self.put_f32(
                &format!("{prefix}.layer{i}.weight"),
                &[l.in_width(), l.out_width()],
                l.weight.iter().map(|v| v.as_f64() as f32).collect(),
            );
            self.put_f32(
                &format!("{prefix}.layer{i}.bias"),
                &[l.out_width()],
                l.bias.iter().map(|v| v.as_f64() as f32).collect(),
            );
            codes.push(match l.activation {
                Activation::Linear => 0,
                Activation::Relu => 1,
                Activation::Tanh => 2,
            });
        }
        self.put_u32(&format!("{prefix}.activations"), &[codes.len()], codes);
    }

    pub fn get_net<T: Real>(&self, prefix: &str) -> Result<DenseNet<T>> {
        let (_, codes) = self.get_u32(&format!("{prefix}.activations"))?;
        let mut layers = Vec::with_capacity(codes.len());
        for (i, &code) in codes.iter().enumerate() {
            let activation = match code {
                0 => Activation::Linear,
                1 => Activation::Relu,
                2 => Activation::Tanh,
                c => return Err(format(prefix, format!("unknown activation code {c}"))),
            };
            let wname = format!("{prefix}.layer{i}.weight");
            let (shape, w) = self.get_f32(&wname)?;
            if shape.len() != 2 {
                return Err(format(wname, "weight must be rank 2"));
            }
            let weight = ndarray::Array2::from_shape_vec((shape[0], shape[1]), w.iter().map(|&v| T::of(v as f64)).collect())
                .map_err(|e| format(&wname, e.to_string()))?;
            let (_, b) = self.get_f32(&format!("{prefix}.layer{i}.bias"))?;
            let bias = ndarray::Array1::from(b.iter().map(|&v| T::of(v as f64)).collect::<Vec<_>>());
            layers.push(Dense { weight, bias, activation });
        }
        DenseNet::from_layers(layers).map_err(|e| format(prefix, e.to_string()))
    }

    pub fn put_adam(&mut self, prefix: &str, adam: &AdamState<f32>) {
        self.put_f32(&format!("{prefix}.m"), &[adam.m.len()], adam.m.clone());
        self.put_f32(&format!("{prefix}.v"), &[adam.v.len()], adam.v.clone());
        self.put_u64s(&format!("{prefix}.t"), &[adam.t]);
    }

    pub fn get_adam(&self, prefix: &str) -> Result<AdamState<f32>> {
        let (_, m) = self.get_f32(&format!("{prefix}.m"))?;
        let (_, v) = self.get_f32(&format!("{prefix}.v"))?;
        let t = self.get_u64s(&format!("{prefix}.t"))?;
        let mut adam = AdamState::new(m.len());
        if v.len() != m.len() || t.len() != 1 {
            return Err(format(prefix, "inconsistent optimizer state"));
        }
        adam.m = m.to_vec();
        adam.v = v.to_vec();
        adam.t = t[0];
        Ok(adam)
    }

    /// Writes the manifest and tensor files into an existing directory.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        let mut manifest = String::from("# name shape dtype file (raw little-endian)\n");
        for (name, t) in &self.tensors {
            let file = file_name(name);
            let bytes: Vec<u8> = match &t.data {
                TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                TensorData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            };
            fs::write(dir.join(&file), bytes)?;
            manifest.push_str(&format!("{name} {} {} {file}\n", shape_text(&t.shape), t.dtype()));
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn read_from(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    path: mpath.clone(),
                    hint: "not a checkpoint directory (run `train` first)".into(),
                }
            } else {
                Error::Io(e)
            }
        })?;
        let mut store = TensorStore::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, dtype, file] = parts[..] else {
                return Err(format(&mpath, format!("malformed manifest line {line:?}")));
            };
            let shape: Vec<usize> = if shape == "scalar" {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| format(&mpath, format!("bad shape for {name}")))?
            };
            let count: usize = shape.iter().product();
            let bytes = fs::read(dir.join(file))?;
            if bytes.len() != count * 4 {
                return Err(format(dir.join(file), format!("expected {} bytes, found {}", count * 4, bytes.len())));
            }
            let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            match dtype {
                "f32" => store.put_f32(name, &shape, words.map(f32::from_le_bytes).collect()),
                "u32" => store.put_u32(name, &shape, words.map(u32::from_le_bytes).collect()),
                other => return Err(format(&mpath, format!("unknown dtype {other}"))),
            }
            if store.get(name)?.len() != count {
                return Err(format(&mpath, format!("size mismatch for {name}")));
            }
        }
        Ok(store)
    }
}

/// Builds a directory under a temporary name next to `path` and renames it
/// into place once `fill` succeeds. An existing directory at `path` is
/// replaced.
pub fn write_dir_atomic(path: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let base = path.file_name().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let tmp = parent.join(format!(".{base}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if path.exists() {
        let old = parent.join(format!(".{base}.old-{}", std::process::id()));
        fs::rename(path, &old)?;
        fs::rename(&tmp, path)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, path)?;
    }
    Ok(())
}
