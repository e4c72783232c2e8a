//! Parameter container for the equivariant-attention model: canonical tensor
//! order, seeded initialization, flat-vector views for the optimizer, and a
//! binary checkpoint format (JSON header + little-endian f64 payload).

use super::{ModelConfig, ModelError};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// How a tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fill {
    /// Uniform in ±1/√fan_in, fan_in being the tensor's input dimension.
    Uniform { fan_in: usize },
    /// Exact zeros: biases, and the last linear layer of the readout so an
    /// untrained model predicts zero energy everywhere.
    Zero,
}

/// The complete tensor layout for a configuration, in canonical order.
/// Everything downstream — flat vectors, checkpoints, tape leaves — uses
/// this order, so it must never be reordered.
fn layout(config: &ModelConfig) -> Vec<(String, (usize, usize), Fill)> {
    let d = config.dim;
    let k = config.n_rbf;
    let s = config.n_species;
    let half = d / 2;
    let mut out: Vec<(String, (usize, usize), Fill)> = Vec::new();
    let mut push = |name: String, shape: (usize, usize), fill: Fill| {
        out.push((name, shape, fill));
    };

    push("embed.table".into(), (s, d), Fill::Uniform { fan_in: d });
    push("embed.filter.w".into(), (k, d), Fill::Uniform { fan_in: k });
    push("embed.filter.b".into(), (1, d), Fill::Zero);
    push("embed.mlp.w1".into(), (2 * d, d), Fill::Uniform { fan_in: 2 * d });
    push("embed.mlp.b1".into(), (1, d), Fill::Zero);
    push("embed.mlp.w2".into(), (d, d), Fill::Uniform { fan_in: d });
    push("embed.mlp.b2".into(), (1, d), Fill::Zero);

    for l in 0..config.n_layers {
        let p = |suffix: &str| format!("layer{l}.{suffix}");
        push(p("attn.wq"), (d, d), Fill::Uniform { fan_in: d });
        push(p("attn.bq"), (1, d), Fill::Zero);
        push(p("attn.wk"), (d, d), Fill::Uniform { fan_in: d });
        push(p("attn.bk"), (1, d), Fill::Zero);
        push(p("attn.wv"), (d, 2 * d), Fill::Uniform { fan_in: d });
        push(p("attn.bv"), (1, 2 * d), Fill::Zero);
        push(p("attn.wdk"), (k, d), Fill::Uniform { fan_in: k });
        push(p("attn.bdk"), (1, d), Fill::Zero);
        push(p("attn.wdv"), (k, 2 * d), Fill::Uniform { fan_in: k });
        push(p("attn.bdv"), (1, 2 * d), Fill::Zero);
        push(p("mix.u1"), (d, d), Fill::Uniform { fan_in: d });
        push(p("mix.u2"), (d, d), Fill::Uniform { fan_in: d });
        push(p("gate.w1"), (d, d), Fill::Uniform { fan_in: d });
        push(p("gate.b1"), (1, d), Fill::Zero);
        push(p("gate.w2"), (d, 3 * d), Fill::Uniform { fan_in: d });
        push(p("gate.b2"), (1, 3 * d), Fill::Zero);
        push(p("fx.w1"), (d, d), Fill::Uniform { fan_in: d });
        push(p("fx.b1"), (1, d), Fill::Zero);
        push(p("fx.w2"), (d, d), Fill::Uniform { fan_in: d });
        push(p("fx.b2"), (1, d), Fill::Zero);
        push(p("fv.w"), (d, d), Fill::Uniform { fan_in: d });
    }

    for (b, (din, dout)) in [(d, half), (half, 1)].into_iter().enumerate() {
        let p = |suffix: &str| format!("out{b}.{suffix}");
        push(p("wva"), (din, dout), Fill::Uniform { fan_in: din });
        push(p("wvb"), (din, dout), Fill::Uniform { fan_in: din });
        push(p("mlp.w1"), (din + dout, din), Fill::Uniform { fan_in: din + dout });
        push(p("mlp.b1"), (1, din), Fill::Zero);
        // The very last linear starts at zero so Φ ≡ 0 before training.
        let last_fill = if b == 1 {
            Fill::Zero
        } else {
            Fill::Uniform { fan_in: din }
        };
        push(p("mlp.w2"), (din, 2 * dout), last_fill);
        push(p("mlp.b2"), (1, 2 * dout), Fill::Zero);
    }

    out
}

/// Named model tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<(String, Array2<f64>)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    fn from_tensors(tensors: Vec<(String, Array2<f64>)>) -> Self {
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self { tensors, index }
    }

    /// Training initialization: weights uniform in ±1/√fan_in in a fixed
    /// draw order, biases and the final readout layer zero. Deterministic in
    /// the seed.
    pub fn initialize(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, fill)| {
                let t = match fill {
                    Fill::Zero => Array2::zeros(shape),
                    Fill::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        Array2::from_shape_fn(shape, |_| rng.gen_range(-bound..bound))
                    }
                };
                (name, t)
            })
            .collect();
        Self::from_tensors(tensors)
    }

    /// Every entry uniform in ±1/√fan_in, including biases and the readout.
    /// Untrained models initialized this way produce non-trivial energies,
    /// which is what symmetry tests need.
    pub fn random_dense(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, fill)| {
                let fan_in = match fill {
                    Fill::Uniform { fan_in } => fan_in,
                    Fill::Zero => shape.0.max(1),
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let t = Array2::from_shape_fn(shape, |_| rng.gen_range(-bound..bound));
                (name, t)
            })
            .collect();
        Self::from_tensors(tensors)
    }

    pub fn tensors(&self) -> &[(String, Array2<f64>)] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    /// Position of a named tensor in canonical order.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).map(|&i| &mut self.tensors[i].1)
    }

    /// Total scalar parameter count.
    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Row-major concatenation in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, t) in &self.tensors {
            out.extend(t.iter().copied());
        }
        out
    }

    /// Rebuilds tensors from a flat vector laid out like [`Self::flatten`].
    pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<Self, ModelError> {
        let shapes = layout(config);
        let expected: usize = shapes.iter().map(|(_, (r, c), _)| r * c).sum();
        if flat.len() != expected {
            return Err(ModelError::ParamCount {
                got: flat.len(),
                expected,
            });
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, (r, c), _) in shapes {
            let t = Array2::from_shape_vec((r, c), flat[offset..offset + r * c].to_vec())
                .expect("length checked above");
            offset += r * c;
            tensors.push((name, t));
        }
        Ok(Self::from_tensors(tensors))
    }

    /// Overwrites all tensors in place from a flat vector.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        let expected = self.n_params();
        if flat.len() != expected {
            return Err(ModelError::ParamCount {
                got: flat.len(),
                expected,
            });
        }
        let mut offset = 0;
        for (_, t) in &mut self.tensors {
            for x in t.iter_mut() {
                *x = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Confirms this parameter set matches the layout of `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let shapes = layout(config);
        if shapes.len() != self.tensors.len() {
            return Err(ModelError::LayoutMismatch(format!(
                "{} tensors, config wants {}",
                self.tensors.len(),
                shapes.len()
            )));
        }
        for ((name, shape, _), (have_name, have)) in shapes.iter().zip(&self.tensors) {
            if name != have_name || have.dim() != *shape {
                return Err(ModelError::LayoutMismatch(format!(
                    "tensor {have_name} has shape {:?}, config wants {name} {shape:?}",
                    have.dim()
                )));
            }
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "etff-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

/// Writes config and parameters: one JSON header line, then the tensor data
/// row-major as little-endian f64 in canonical order.
pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams,
) -> Result<(), ModelError> {
    params.check_config(config)?;
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config: config.clone(),
        tensors: params
            .tensors()
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect(),
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    for (_, t) in params.tensors() {
        for &x in t.iter() {
            file.write_all(&x.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams), ModelError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        file.read_exact(&mut byte).map_err(|_| {
            ModelError::Checkpoint("missing header line".to_string())
        })?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 1 << 20 {
            return Err(ModelError::Checkpoint("header too large".to_string()));
        }
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Checkpoint(format!(
            "unknown format `{}`",
            header.format
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    if payload.len() != total * 8 {
        return Err(ModelError::Checkpoint(format!(
            "payload holds {} bytes, header wants {}",
            payload.len(),
            total * 8
        )));
    }
    let mut values = Vec::with_capacity(total);
    for chunk in payload.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for meta in header.tensors {
        let len = meta.rows * meta.cols;
        let t = Array2::from_shape_vec((meta.rows, meta.cols), values[offset..offset + len].to_vec())
            .expect("length checked above");
        offset += len;
        tensors.push((meta.name, t));
    }
    let params = ModelParams::from_tensors(tensors);
    params.check_config(&header.config)?;
    Ok((header.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            dim: 16,
            n_heads: 4,
            n_rbf: 8,
            cutoff: 5.0,
            n_species: 3,
        }
    }

    #[test]
    fn initialization_is_seeded_and_bounded() {
        let config = small_config();
        let a = ModelParams::initialize(&config, 42);
        let b = ModelParams::initialize(&config, 42);
        assert_eq!(a, b);
        let c = ModelParams::initialize(&config, 43);
        assert_ne!(a, c);

        // Biases start at zero, weights within the fan-in bound.
        assert!(a.tensor("layer0.attn.bq").unwrap().iter().all(|&x| x == 0.0));
        assert!(a.tensor("out1.mlp.w2").unwrap().iter().all(|&x| x == 0.0));
        let wq = a.tensor("layer0.attn.wq").unwrap();
        let bound = 1.0 / (16.0_f64).sqrt();
        assert!(wq.iter().all(|&x| x.abs() < bound));
        assert!(wq.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn flat_roundtrip_is_lossless() {
        let config = small_config();
        let params = ModelParams::initialize(&config, 7);
        let flat = params.flatten();
        assert_eq!(flat.len(), params.n_params());
        let back = ModelParams::from_flat(&config, &flat).unwrap();
        assert_eq!(params, back);

        let mut reassigned = ModelParams::initialize(&config, 99);
        reassigned.assign_flat(&flat).unwrap();
        assert_eq!(params, reassigned);

        assert!(matches!(
            ModelParams::from_flat(&config, &flat[1..]),
            Err(ModelError::ParamCount { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let config = small_config();
        let params = ModelParams::initialize(&config, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        let (config2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(config, config2);
        assert_eq!(params, params2);
    }

    #[test]
    fn checkpoint_rejects_truncation_and_garbage() {
        let config = small_config();
        let params = ModelParams::initialize(&config, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("short.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(ModelError::Checkpoint(_))
        ));

        let garbage = dir.path().join("garbage.ckpt");
        std::fs::write(&garbage, b"not a checkpoint\n").unwrap();
        assert!(load_checkpoint(&garbage).is_err());
    }

    #[test]
    fn random_dense_fills_everything() {
        let config = small_config();
        let params = ModelParams::random_dense(&config, 1);
        for (name, t) in params.tensors() {
            assert!(
                t.iter().any(|&x| x != 0.0),
                "{name} should not be all zeros"
            );
        }
    }

    #[test]
    fn check_config_catches_shape_drift() {
        let config = small_config();
        let params = ModelParams::initialize(&config, 3);
        let mut other = small_config();
        other.dim = 32;
        assert!(matches!(
            params.check_config(&other),
            Err(ModelError::LayoutMismatch(_))
        ));
    }
}
