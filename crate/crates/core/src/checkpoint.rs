//! `TMRC` checkpoints: a flat list of named f32 tensors.
//!
//! Layout: magic `TMRC`, u32 version, u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name, u32 rank, `rank` u32 dims and the
//! little-endian f32 payload. The model config travels as a rank-1 tensor
//! of JSON bytes, the optimizer step as two 16-bit halves.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TmrError};
use crate::model::{ModelConfig, TmrModel};
use crate::numerics::OptimState;

const MAGIC: &[u8; 4] = b"TMRC";
const VERSION: u32 = 1;
const CONFIG_KEY: &str = "meta.config";
const STEP_KEY: &str = "meta.step";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

fn bad<T>(reason: impl Into<String>) -> Result<T> {
    Err(TmrError::Format {
        path: "<stream>".into(),
        reason: reason.into(),
    })
}

pub fn write_tensors<W: Write>(out: &mut W, tensors: &[Tensor]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let expected: usize = t.dims.iter().map(|&d| d as usize).product();
        if expected != t.values.len() {
            return bad(format!(
                "tensor {} has {} values for dims {:?}",
                t.name,
                t.values.len(),
                t.dims
            ));
        }
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len())
            .or_else(|_| bad(format!("tensor name too long: {}", t.name)))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for d in &t.dims {
            out.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.values.len() * 4);
        for v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return bad(format!("bad magic {magic:?}, expected TMRC"));
    }
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |input: &mut R| -> Result<u32> {
        input.read_exact(&mut u32_buf)?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let version = read_u32(input)?;
    if version != VERSION {
        return bad(format!("unsupported checkpoint version {version}"));
    }
    let count = read_u32(input)?;
    let mut tensors = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let mut len = [0u8; 2];
        input.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).or_else(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_u32(input)?;
        if rank > 8 {
            return bad(format!("tensor {name} has implausible rank {rank}"));
        }
        let dims = (0..rank)
            .map(|_| read_u32(input))
            .collect::<Result<Vec<u32>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| TmrError::Format {
                path: "<stream>".into(),
                reason: format!("tensor {name} dims overflow"),
            })?;
        let mut payload = vec![0u8; n * 4];
        input.read_exact(&mut payload)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor { name, dims, values });
    }
    Ok(tensors)
}

/// A restored model plus optional optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TmrModel<f32>,
    pub step: u64,
    /// AdamW moments of the trainable parameters, in training order.
    pub moments: Option<Vec<(Vec<f32>, Vec<f32>)>>,
}

pub fn checkpoint_tensors(
    model: &TmrModel<f32>,
    optim: Option<&OptimState<f32>>,
) -> Result<Vec<Tensor>> {
    let json = serde_json::to_vec(&model.config)?;
    let mut tensors = vec![Tensor {
        name: CONFIG_KEY.into(),
        dims: vec![json.len() as u32],
        values: json.iter().map(|&b| b as f32).collect(),
    }];
    let step = optim.map_or(0, |o| o.step_count());
    tensors.push(Tensor {
        name: STEP_KEY.into(),
        dims: vec![2],
        values: vec![(step & 0xffff) as f32, ((step >> 16) & 0xffff) as f32],
    });
    for p in model.params() {
        tensors.push(Tensor {
            name: format!("{}.weight", p.name),
            dims: p.kind.weight_dims().iter().map(|&d| d as u32).collect(),
            values: p.weight.clone(),
        });
        tensors.push(Tensor {
            name: format!("{}.bias", p.name),
            dims: vec![p.bias.len() as u32],
            values: p.bias.clone(),
        });
    }
    if let Some(o) = optim {
        let mut trainable = model.clone();
        let names: Vec<String> = trainable
            .trainable_params_mut()
            .iter()
            .map(|p| p.name.clone())
            .collect();
        let moments = o.export_moments();
        if !moments.is_empty() {
            for (name, (m, v)) in names.iter().zip(moments) {
                tensors.push(Tensor {
                    name: format!("optim.m.{name}"),
                    dims: vec![m.len() as u32],
                    values: m,
                });
                tensors.push(Tensor {
                    name: format!("optim.v.{name}"),
                    dims: vec![v.len() as u32],
                    values: v,
                });
            }
        }
    }
    Ok(tensors)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &TmrModel<f32>,
    optim: Option<&OptimState<f32>>,
) -> Result<()> {
    let tensors = checkpoint_tensors(model, optim)?;
    let path = path.as_ref();
    // write then rename so a crash never leaves a truncated checkpoint behind
    let tmp = path.with_extension("tmrc.partial");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_tensors(&mut out, &tensors)?;
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_from_tensors(tensors: Vec<Tensor>) -> Result<Checkpoint> {
    let mut map: BTreeMap<String, Tensor> =
        tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let config_t = map
        .remove(CONFIG_KEY)
        .map_or_else(|| bad("checkpoint has no model config"), Ok)?;
    let bytes: Vec<u8> = config_t.values.iter().map(|&v| v as u8).collect();
    let config: ModelConfig = serde_json::from_slice(&bytes)?;
    let step = match map.remove(STEP_KEY) {
        Some(t) if t.values.len() == 2 => t.values[0] as u64 | ((t.values[1] as u64) << 16),
        Some(_) => return bad("malformed step tensor"),
        None => 0,
    };
    let mut model = TmrModel::<f32>::new(config, 0)?;
    for p in model.params_mut() {
        for (suffix, dst) in [("weight", &mut p.weight), ("bias", &mut p.bias)] {
            let key = format!("{}.{suffix}", p.name);
            let t = map
                .remove(&key)
                .map_or_else(|| bad(format!("missing tensor {key}")), Ok)?;
            if t.values.len() != dst.len() {
                return bad(format!(
                    "tensor {key} has {} values, model expects {}",
                    t.values.len(),
                    dst.len()
                ));
            }
            *dst = t.values;
        }
    }
    let names: Vec<String> = model
        .trainable_params_mut()
        .iter()
        .map(|p| p.name.clone())
        .collect();
    let moments = if map.keys().any(|k| k.starts_with("optim.")) {
        let mut out = Vec::with_capacity(names.len());
        for name in &names {
            let m = map.remove(&format!("optim.m.{name}"));
            let v = map.remove(&format!("optim.v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => out.push((m.values, v.values)),
                _ => return bad(format!("optimizer state for {name} is incomplete")),
            }
        }
        Some(out)
    } else {
        None
    };
    if let Some(extra) = map.keys().next() {
        return bad(format!("unexpected tensor {extra}"));
    }
    Ok(Checkpoint {
        model,
        step,
        moments,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensors(&mut input)
        .and_then(checkpoint_from_tensors)
        .map_err(|e| match e {
            TmrError::Format { reason, .. } => TmrError::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
}
