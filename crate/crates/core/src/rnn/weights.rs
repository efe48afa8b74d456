use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Arch, ModelConfig, RnnError};

pub const FORMAT_VERSION: u32 = 1;

/// One recurrent layer with all gates packed side by side.
///
/// Pre-activations are computed as `x·u + h·w + b`, so `u` is
/// `input_dim x (G·H)` and `w` is `H x (G·H)`; gate `k` owns columns
/// `k·H..(k+1)·H`. Row `i` of a gate block of `w` holds the projections
/// from unit `i` to every unit of that gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub arch: Arch,
    pub hidden: usize,
    pub u: Array2<f64>,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LayerWeights {
    pub fn zeros(arch: Arch, input: usize, hidden: usize) -> Self {
        let g = arch.n_gates() * hidden;
        Self {
            arch,
            hidden,
            u: Array2::zeros((input, g)),
            w: Array2::zeros((hidden, g)),
            b: Array1::zeros(g),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.u.nrows()
    }

    fn cols(&self, gate: usize) -> std::ops::Range<usize> {
        gate * self.hidden..(gate + 1) * self.hidden
    }

    /// Input-to-gate block of gate `gate` (index into [`Arch::gate_names`]).
    pub fn u_gate(&self, gate: usize) -> ArrayView2<'_, f64> {
        self.u.slice(s![.., self.cols(gate)])
    }

    /// Hidden-to-gate block: rows are source units, columns target units.
    pub fn w_gate(&self, gate: usize) -> ArrayView2<'_, f64> {
        self.w.slice(s![.., self.cols(gate)])
    }

    pub fn w_gate_mut(&mut self, gate: usize) -> ArrayViewMut2<'_, f64> {
        let cols = self.cols(gate);
        self.w.slice_mut(s![.., cols])
    }

    pub fn b_gate(&self, gate: usize) -> &[f64] {
        &self.b.as_slice().expect("contiguous bias")[self.cols(gate)]
    }

    pub fn b_gate_mut(&mut self, gate: usize) -> &mut [f64] {
        let cols = self.cols(gate);
        &mut self.b.as_slice_mut().expect("contiguous bias")[cols]
    }
}

/// All parameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `vocab x embed`.
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    /// `hidden_top x vocab`.
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl Weights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut input = config.embed_dim;
        let mut layers = Vec::with_capacity(config.hidden.len());
        for &h in &config.hidden {
            layers.push(LayerWeights::zeros(config.arch, input, h));
            input = h;
        }
        Self {
            embedding: Array2::zeros((config.vocab_size, config.embed_dim)),
            layers,
            out_w: Array2::zeros((input, config.vocab_size)),
            out_b: Array1::zeros(config.vocab_size),
        }
    }

    /// Every entry drawn from `U(-scale, scale)`; biases start at zero.
    pub fn random(config: &ModelConfig, scale: f64, seed: u64) -> Self {
        let mut w = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if scale > 0.0 {
            let dist = Uniform::new_inclusive(-scale, scale).expect("finite scale");
            let mut fill = |a: &mut Array2<f64>| a.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            fill(&mut w.embedding);
            for l in &mut w.layers {
                fill(&mut l.u);
                fill(&mut l.w);
            }
            fill(&mut w.out_w);
        }
        w
    }

    /// Flat views of every tensor in a fixed order, for optimizers and
    /// gradient checks.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embedding.as_slice().expect("standard layout")];
        for l in &self.layers {
            out.push(l.u.as_slice().expect("standard layout"));
            out.push(l.w.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        out.push(self.out_w.as_slice().expect("standard layout"));
        out.push(self.out_b.as_slice().expect("standard layout"));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embedding.as_slice_mut().expect("standard layout")];
        for l in &mut self.layers {
            out.push(l.u.as_slice_mut().expect("standard layout"));
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.out_w.as_slice_mut().expect("standard layout"));
        out.push(self.out_b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Checks every tensor shape against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<(), RnnError> {
        let expect = Self::zeros(config);
        let check = |name: String, want: &[usize], got: &[usize]| {
            if want == got {
                Ok(())
            } else {
                Err(RnnError::ShapeMismatch {
                    name,
                    expected: want.to_vec(),
                    found: got.to_vec(),
                })
            }
        };
        check("embedding".into(), expect.embedding.shape(), self.embedding.shape())?;
        if self.layers.len() != expect.layers.len() {
            return Err(RnnError::ShapeMismatch {
                name: "layers".into(),
                expected: vec![expect.layers.len()],
                found: vec![self.layers.len()],
            });
        }
        for (l, (a, b)) in expect.layers.iter().zip(&self.layers).enumerate() {
            if b.arch != config.arch {
                return Err(RnnError::InvalidConfig(format!(
                    "layer {l} is {} but config says {}",
                    b.arch, config.arch
                )));
            }
            check(format!("layer{l}.U"), a.u.shape(), b.u.shape())?;
            check(format!("layer{l}.W"), a.w.shape(), b.w.shape())?;
            check(format!("layer{l}.b"), a.b.shape(), b.b.shape())?;
        }
        check("output.W".into(), expect.out_w.shape(), self.out_w.shape())?;
        check("output.b".into(), expect.out_b.shape(), self.out_b.shape())
    }

    /// Named tensors in file order, each as `(name, shape, row-major data)`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = vec![(
            "embedding".to_string(),
            self.embedding.shape().to_vec(),
            self.embedding.iter().copied().collect(),
        )];
        for (li, l) in self.layers.iter().enumerate() {
            let names = l.arch.gate_names();
            for (g, name) in names.iter().enumerate() {
                let u = l.u_gate(g);
                out.push((
                    format!("layer{li}.U_{name}"),
                    u.shape().to_vec(),
                    u.iter().copied().collect(),
                ));
            }
            for (g, name) in names.iter().enumerate() {
                let w = l.w_gate(g);
                out.push((
                    format!("layer{li}.W_{name}"),
                    w.shape().to_vec(),
                    w.iter().copied().collect(),
                ));
            }
            for (g, name) in names.iter().enumerate() {
                out.push((format!("layer{li}.b_{name}"), vec![l.hidden], l.b_gate(g).to_vec()));
            }
        }
        out.push((
            "output.W".into(),
            self.out_w.shape().to_vec(),
            self.out_w.iter().copied().collect(),
        ));
        out.push(("output.b".into(), self.out_b.shape().to_vec(), self.out_b.to_vec()));
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    byte_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    checksum: u32,
}

/// Serializes to the weight file layout: a one-line JSON manifest, a
/// newline, then the little-endian f64 payload.
pub fn encode_weights(config: &ModelConfig, weights: &Weights) -> Result<Vec<u8>, RnnError> {
    weights.validate(config)?;
    let mut payload = Vec::with_capacity(weights.n_params() * 8);
    let mut tensors = Vec::new();
    for (name, shape, data) in weights.named_tensors() {
        let offset = payload.len();
        for v in &data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f64".into(),
            offset,
            byte_len: data.len() * 8,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        tensors,
        checksum: crc32fast::hash(&payload),
    };
    let mut out = serde_json::to_vec(&manifest).map_err(|e| RnnError::Malformed(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<(ModelConfig, Weights), RnnError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| RnnError::Malformed("no manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl]).map_err(|e| RnnError::Malformed(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(RnnError::Malformed(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let payload = &bytes[nl + 1..];
    let actual = crc32fast::hash(payload);
    if actual != manifest.checksum {
        return Err(RnnError::Checksum {
            expected: manifest.checksum,
            actual,
        });
    }
    let config = manifest.config;
    config.validate()?;
    let mut weights = Weights::zeros(&config);
    let expected = weights.named_tensors();
    if expected.len() != manifest.tensors.len() {
        return Err(RnnError::Malformed(format!(
            "expected {} tensors, found {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    let mut flat: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
    for ((name, shape, _), entry) in expected.iter().zip(&manifest.tensors) {
        if &entry.name != name {
            return Err(RnnError::Malformed(format!(
                "expected tensor `{name}`, found `{}`",
                entry.name
            )));
        }
        if entry.dtype != "f64" {
            return Err(RnnError::Malformed(format!(
                "tensor `{name}` has dtype {}",
                entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if &entry.shape != shape || entry.byte_len != numel * 8 {
            return Err(RnnError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        let raw = payload
            .get(entry.offset..entry.offset + entry.byte_len)
            .ok_or_else(|| RnnError::Malformed(format!("tensor `{name}` lies outside the payload")))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RnnError::NonFinite(name.clone()));
        }
        flat.push(data);
    }
    let mut it = flat.into_iter();
    let mut next = || it.next().expect("tensor count checked");
    weights
        .embedding
        .as_slice_mut()
        .expect("standard layout")
        .copy_from_slice(&next());
    for l in &mut weights.layers {
        let n = l.arch.n_gates();
        for g in 0..n {
            let block = next();
            let h = l.hidden;
            let mut dst = l.u.slice_mut(s![.., g * h..(g + 1) * h]);
            let dim = dst.raw_dim();
            dst.assign(&ArrayView2::from_shape(dim, &block).expect("shape checked"));
        }
        for g in 0..n {
            let block = next();
            let mut dst = l.w_gate_mut(g);
            let dim = dst.raw_dim();
            dst.assign(&ArrayView2::from_shape(dim, &block).expect("shape checked"));
        }
        for g in 0..n {
            l.b_gate_mut(g).copy_from_slice(&next());
        }
    }
    weights
        .out_w
        .as_slice_mut()
        .expect("standard layout")
        .copy_from_slice(&next());
    weights
        .out_b
        .as_slice_mut()
        .expect("standard layout")
        .copy_from_slice(&next());
    Ok((config, weights))
}

/// Writes atomically through a temporary file in the same directory.
pub fn save_weights(config: &ModelConfig, weights: &Weights, path: &Path) -> Result<(), RnnError> {
    let bytes = encode_weights(config, weights)?;
    let io = |source| RnnError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_weights(path: &Path) -> Result<(ModelConfig, Weights), RnnError> {
    let bytes = std::fs::read(path).map_err(|source| RnnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_weights(&bytes)
}

/// CRC32 of the payload of an encoded weight file, as hex.
pub fn weights_checksum(config: &ModelConfig, weights: &Weights) -> Result<String, RnnError> {
    let bytes = encode_weights(config, weights)?;
    let nl = bytes.iter().position(|&b| b == b'\n').expect("manifest line");
    Ok(format!("{:08x}", crc32fast::hash(&bytes[nl + 1..])))
}
