//! Binary checkpoint format.
//!
//! ```text
//! "NEKO"  u32 version  u32 header_len  header (UTF-8 JSON)
//! u32 n_tensors, then per tensor:
//!   u32 name_len  name  u8 dtype (0 = f32, 1 = f64)  u32 rank  u64 dims[rank]  data (LE)
//! ```
//!
//! All integers are little-endian. Tensors are the model parameters in
//! layout order followed by `opt.m.<name>` and `opt.v.<name>` moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::TrainConfig;
use crate::error::{NekoError, Result};
use crate::model::{ModelConfig, TransformerParams};
use crate::tasks::{ExpertMap, TaskRegistry};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"NEKO";
pub const VERSION: u32 = 1;

/// Position of the data-order generator: batches are derived from `seed`
/// and consumed sequentially, so the next batch index pins the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub position: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tasks: TaskRegistry,
    pub expert_map: ExpertMap,
    pub alphabet: String,
    pub n_best: usize,
    pub step: u64,
    pub total_steps: u64,
    pub rng: RngState,
    /// FNV-1a hash of the training data file contents.
    pub data_fingerprint: u64,
    pub optimizer_steps: u64,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub header: CheckpointHeader,
    pub params: TransformerParams<S>,
    pub opt: AdamState<S>,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[S]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(S::DTYPE.tag());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let header = serde_json::to_vec(&self.header)?;
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        let n = self.params.tensors.len();
        put_u32(&mut out, 3 * n as u32);
        for (name, t) in self.params.named() {
            put_tensor(&mut out, name, t.shape(), t.data());
        }
        for (prefix, moments) in [("opt.m.", &self.opt.m), ("opt.v.", &self.opt.v)] {
            for ((name, t), m) in self.params.named().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t.shape(), m);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Parses a checkpoint. Tensors stored in another precision are
    /// converted to `S`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NekoError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NekoError::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| NekoError::Format(format!("bad checkpoint header: {e}")))?;
        let n = r.u32()? as usize;
        let mut named = Vec::with_capacity(n);
        for _ in 0..n {
            named.push(r.tensor::<S>()?);
        }
        if r.pos != bytes.len() {
            return Err(NekoError::Format("trailing bytes after last tensor".into()));
        }
        if n % 3 != 0 {
            return Err(NekoError::Format(format!("unexpected tensor count {n}")));
        }
        let k = n / 3;
        let v_part = named.split_off(2 * k);
        let m_part = named.split_off(k);
        let params = TransformerParams::from_named(&header.model, named)?;
        let moments = |part: Vec<(String, Tensor<S>)>, prefix: &str| -> Result<Vec<Vec<S>>> {
            part.into_iter()
                .zip(params.named())
                .map(|((name, t), (pname, p))| {
                    if name != format!("{prefix}{pname}") || t.shape() != p.shape() {
                        return Err(NekoError::Format(format!("unexpected optimizer tensor {name}")));
                    }
                    Ok(t.data().to_vec())
                })
                .collect()
        };
        let m = moments(m_part, "opt.m.")?;
        let v = moments(v_part, "opt.v.")?;
        if header.expert_map.n_experts() != header.model.n_experts {
            return Err(NekoError::Format("expert map does not match the model".into()));
        }
        if header.expert_map.experts().len() != header.tasks.len() {
            return Err(NekoError::Format("expert map does not cover every task".into()));
        }
        let opt = AdamState {
            m,
            v,
            t: header.optimizer_steps,
        };
        Ok(Checkpoint { header, params, opt })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Precision of the parameters stored in a checkpoint file.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NekoError::Format("not a checkpoint (bad magic)".into()));
    }
    r.u32()?;
    let hlen = r.u32()? as usize;
    r.take(hlen)?;
    r.u32()?;
    let name_len = r.u32()? as usize;
    r.take(name_len)?;
    DType::from_tag(r.take(1)?[0]).ok_or_else(|| NekoError::Format("unknown dtype tag".into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NekoError::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor<S: Scalar>(&mut self) -> Result<(String, Tensor<S>)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| NekoError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_tag(self.take(1)?[0])
            .ok_or_else(|| NekoError::Format(format!("unknown dtype tag in tensor {name}")))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(NekoError::Format(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?).map_err(|_| NekoError::Format("dimension overflow".into()))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| NekoError::Format("dimension overflow".into()))?;
            shape.push(d);
        }
        let raw = self.take(count.checked_mul(dtype.size()).ok_or_else(|| NekoError::Format("size overflow".into()))?)?;
        let data: Vec<S> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| S::c(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| S::c(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        Ok((name, Tensor::new(shape, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::build_expert_map;

    fn sample() -> Checkpoint<f32> {
        let model = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 6,
            n_experts: 3,
            top_k: 2,
            max_seq_len: 16,
            ..ModelConfig::default()
        };
        let params = TransformerParams::init(&model, 1).unwrap();
        let mut opt = AdamState::new(&params.tensors);
        opt.m[0][3] = 0.25;
        opt.v[1][0] = 1e-9;
        opt.t = 7;
        let tasks = TaskRegistry::new(&["asr", "ocr"]).unwrap();
        let expert_map = build_expert_map(tasks.tasks(), 3, 2).unwrap();
        Checkpoint {
            header: CheckpointHeader {
                model,
                train: TrainConfig::default(),
                tasks,
                expert_map,
                alphabet: "ab c".into(),
                n_best: 5,
                step: 7,
                total_steps: 30,
                rng: RngState { seed: 3, position: 7 },
                data_fingerprint: fnv1a(b"data"),
                optimizer_steps: 7,
            },
            params,
            opt,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.params.tensors.iter().zip(&c.params.tensors) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_inputs_are_format_errors() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(NekoError::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(NekoError::Format(_))));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..cut]), Err(NekoError::Format(_))));
        }
    }

    #[test]
    fn loads_into_other_precision() {
        let c = sample();
        let back = Checkpoint::<f64>::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params.tensors[2].data()[1], c.params.tensors[2].data()[1] as f64);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
