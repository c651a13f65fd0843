//! Parameter initialization and the binary weight container.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic "LCNW" | version u32 | tensor count u32
//! per tensor: name length u32 | name bytes (UTF-8) | dtype u8 (0 = f32)
//!             | ndim u8 | dims u32 each | payload f32 LE
//! ```
//!
//! The file ends exactly after the last payload. Round-trips are bit-exact;
//! the loader never reads past declared lengths and reports the byte offset
//! of the first fault in malformed input. Conventional extensions: `.lcnw`
//! for weight sets, `.lct` for a single tensor named `data`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::arch::{Layer, Model};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LCNW";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt file at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
}

fn corrupt(offset: usize, reason: impl Into<String>) -> WeightsError {
    WeightsError::Corrupt {
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Serializes named tensors in iteration order.
pub fn encode_tensors<'a, I>(tensors: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count_pos = out.len();
    out.extend_from_slice(&0u32.to_le_bytes());
    let mut count: u32 = 0;
    for (name, tensor) in tensors {
        count += 1;
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(tensor.rank() as u8);
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out[count_pos..count_pos + 4].copy_from_slice(&count.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightsError> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(
                self.pos,
                format!("truncated while reading {what} ({n} bytes needed)"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightsError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8, WeightsError> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parses a weight container from bytes. Never panics on malformed input.
pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, WeightsError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(corrupt(0, format!("bad magic {magic:?}, expected \"LCNW\"")));
    }
    let version_pos = r.pos;
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(corrupt(
            version_pos,
            format!("unsupported format version {version}"),
        ));
    }
    let count = r.u32("tensor count")?;

    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len_pos = r.pos;
        let name_len = r.u32("name length")? as usize;
        if name_len > bytes.len() - r.pos {
            return Err(corrupt(
                name_len_pos,
                format!("name length {name_len} exceeds remaining file"),
            ));
        }
        let name_pos = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| corrupt(name_pos, "tensor name is not valid UTF-8"))?
            .to_string();

        let dtype_pos = r.pos;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(corrupt(
                dtype_pos,
                format!("unknown dtype code {dtype} for tensor '{name}'"),
            ));
        }
        let ndim_pos = r.pos;
        let ndim = r.u8("ndim")? as usize;
        if ndim == 0 {
            return Err(corrupt(ndim_pos, format!("tensor '{name}' has ndim 0")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut numel: u64 = 1;
        for axis in 0..ndim {
            let dim_pos = r.pos;
            let d = r.u32(&format!("dim {axis} of tensor '{name}'"))?;
            if d == 0 {
                return Err(corrupt(
                    dim_pos,
                    format!("tensor '{name}' has zero extent on axis {axis}"),
                ));
            }
            dims.push(d as usize);
            numel = numel.saturating_mul(d as u64);
        }
        let payload_pos = r.pos;
        let payload_len = numel.saturating_mul(4);
        if payload_len > (bytes.len() - r.pos) as u64 {
            return Err(corrupt(
                payload_pos,
                format!(
                    "truncated payload for tensor '{name}': need {payload_len} bytes, {} left",
                    bytes.len() - r.pos
                ),
            ));
        }
        let raw = r.take(payload_len as usize, "payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&dims, data)
            .map_err(|e| corrupt(payload_pos, format!("tensor '{name}': {e}")))?;
        if map.insert(name.clone(), tensor).is_some() {
            return Err(corrupt(
                name_pos,
                format!("duplicate tensor name '{name}'"),
            ));
        }
    }
    if r.pos != bytes.len() {
        return Err(corrupt(
            r.pos,
            format!("{} trailing bytes after last payload", bytes.len() - r.pos),
        ));
    }
    Ok(map)
}

pub fn save_tensors<'a, I>(path: &Path, tensors: I) -> Result<(), WeightsError>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    std::fs::write(path, encode_tensors(tensors))?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>, WeightsError> {
    decode_tensors(&std::fs::read(path)?)
}

/// Writes every named parameter of a model, running statistics included.
pub fn save_weights(model: &Model, path: &Path) -> Result<(), WeightsError> {
    save_tensors(path, model.params().iter().map(|(k, v)| (k.as_str(), v)))
}

/// Loads a named tensor map; pair with [`Model::load_params`] to check the
/// names and shapes against an architecture.
pub fn load_weights(path: &Path) -> Result<BTreeMap<String, Tensor>, WeightsError> {
    load_tensors(path)
}

/// Writes a standalone tensor as a single-entry container named `data`.
pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<(), WeightsError> {
    save_tensors(path, [("data", tensor)])
}

/// Reads a standalone tensor container written by [`save_tensor`].
pub fn load_tensor(path: &Path) -> Result<Tensor, WeightsError> {
    let mut map = load_tensors(path)?;
    if map.len() != 1 || !map.contains_key("data") {
        return Err(corrupt(
            8,
            format!(
                "expected exactly one tensor named 'data', found {:?}",
                map.keys().collect::<Vec<_>>()
            ),
        ));
    }
    Ok(map.remove("data").unwrap())
}

/// Deterministic parameter initialization:
///
/// * conv weights ~ Normal(0, sqrt(2 / fan_out)), fan_out = Cout/groups * k^2
/// * SE transform weights ~ Normal(0, sqrt(2 / out_features))
/// * fully connected weights ~ Normal(0, 0.01)
/// * all biases 0; BN gamma 1, beta 0, running mean 0, running var 1
pub fn init_params(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill_normal = |params: &mut BTreeMap<String, Tensor>, key: &str, std: f64| {
        let normal = Normal::new(0.0f64, std).expect("std is finite and positive");
        let t = params.get_mut(key).expect("planned key");
        for v in t.data_mut() {
            *v = normal.sample(&mut rng) as f32;
        }
    };
    let fill_const = |params: &mut BTreeMap<String, Tensor>, key: &str, value: f32| {
        let t = params.get_mut(key).expect("planned key");
        for v in t.data_mut() {
            *v = value;
        }
    };

    let layers: Vec<Layer> = model.layers().to_vec();
    for layer in &layers {
        let params = model.params_mut();
        match layer {
            Layer::Conv { weight, bias, desc } => {
                let k2 = (desc.kernel * desc.kernel) as f64;
                let fan_out = if desc.depthwise {
                    k2
                } else {
                    desc.out_channels as f64 * k2
                };
                fill_normal(params, weight, (2.0 / fan_out).sqrt());
                if let Some(b) = bias {
                    fill_const(params, b, 0.0);
                }
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => {
                fill_const(params, gamma, 1.0);
                fill_const(params, beta, 0.0);
                fill_const(params, running_mean, 0.0);
                fill_const(params, running_var, 1.0);
            }
            Layer::Se {
                w1,
                b1,
                w2,
                b2,
                channels,
                reduction,
            } => {
                let mid = channels / reduction;
                fill_normal(params, w1, (2.0 / mid as f64).sqrt());
                fill_const(params, b1, 0.0);
                fill_normal(params, w2, (2.0 / *channels as f64).sqrt());
                fill_const(params, b2, 0.0);
            }
            Layer::FullyConnected { weight, bias, .. } => {
                fill_normal(params, weight, 0.01);
                fill_const(params, bias, 0.0);
            }
            Layer::Activation(_)
            | Layer::GlobalAvgPool
            | Layer::Flatten
            | Layer::Dropout { .. } => {}
        }
    }
}
