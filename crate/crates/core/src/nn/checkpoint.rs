//! Binary checkpoint container.
//!
//! ```text
//! "LDPM"  u32 version
//! u32 spec_len, spec_len bytes of UTF-8 JSON (graph/architecture description)
//! u32 record_count, records
//! u8 optimizer tag (0 none, 1 sgd, 2 adam)
//!     sgd:  u32 count, records (velocity)
//!     adam: u64 step, u32 count, records (m), u32 count, records (v)
//! u8 has_center, [u32 len, len × f32]
//! ```
//! A record is `u32 name_len, name, u8 dtype (0 = f32), u32 rank,
//! rank × u64 dims, values`. Everything is little-endian.

use std::io::{Read, Write};

use super::optim::{AdamState, SgdState};
use super::tensor::{Scalar, Tensor, TensorMap};
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDPM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd(SgdState<f32>),
    Adam(AdamState<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec_json: String,
    pub tensors: TensorMap<f32>,
    pub optimizer: Option<OptimizerState>,
    pub center: Option<Vec<f32>>,
}

fn w_u8<W: Write>(w: &mut W, v: u8) -> Result<(), NnError> {
    Ok(w.write_all(&[v])?)
}

fn w_u32<W: Write>(w: &mut W, v: u32) -> Result<(), NnError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn w_u64<W: Write>(w: &mut W, v: u64) -> Result<(), NnError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn r_bytes<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], NnError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn r_u8<R: Read>(r: &mut R) -> Result<u8, NnError> {
    Ok(r_bytes::<R, 1>(r)?[0])
}

fn r_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    Ok(u32::from_le_bytes(r_bytes(r)?))
}

fn r_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    Ok(u64::from_le_bytes(r_bytes(r)?))
}

fn write_records<W: Write>(w: &mut W, map: &TensorMap<f32>) -> Result<(), NnError> {
    w_u32(w, map.len() as u32)?;
    for (name, t) in map {
        w_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w_u8(w, f32::DTYPE_TAG)?;
        w_u32(w, t.dims().len() as u32)?;
        for &d in t.dims() {
            w_u64(w, d as u64)?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;

fn read_records<R: Read>(r: &mut R) -> Result<TensorMap<f32>, NnError> {
    let count = r_u32(r)?;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let name_len = r_u32(r)?;
        if name_len > MAX_NAME {
            return Err(NnError::Checkpoint(format!(
                "tensor name of {name_len} bytes"
            )));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = r_u8(r)?;
        if dtype != f32::DTYPE_TAG {
            return Err(NnError::Checkpoint(format!(
                "{name}: unsupported dtype tag {dtype}"
            )));
        }
        let rank = r_u32(r)?;
        if rank > MAX_RANK {
            return Err(NnError::Checkpoint(format!("{name}: rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count: usize = dims.iter().product();
        let mut raw = vec![0u8; 4 * count];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if map.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(NnError::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    Ok(map)
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<(), NnError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w_u32(&mut w, CHECKPOINT_VERSION)?;
    w_u32(&mut w, ckpt.spec_json.len() as u32)?;
    w.write_all(ckpt.spec_json.as_bytes())?;
    write_records(&mut w, &ckpt.tensors)?;
    match &ckpt.optimizer {
        None => w_u8(&mut w, 0)?,
        Some(OptimizerState::Sgd(s)) => {
            w_u8(&mut w, 1)?;
            write_records(&mut w, &s.velocity)?;
        }
        Some(OptimizerState::Adam(s)) => {
            w_u8(&mut w, 2)?;
            w_u64(&mut w, s.step)?;
            write_records(&mut w, &s.m)?;
            write_records(&mut w, &s.v)?;
        }
    }
    match &ckpt.center {
        None => w_u8(&mut w, 0)?,
        Some(c) => {
            w_u8(&mut w, 1)?;
            w_u32(&mut w, c.len() as u32)?;
            for v in c {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, NnError> {
    let magic: [u8; 4] = r_bytes(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let spec_len = r_u32(&mut r)? as usize;
    let mut spec = vec![0u8; spec_len];
    r.read_exact(&mut spec)?;
    let spec_json =
        String::from_utf8(spec).map_err(|_| NnError::Checkpoint("spec is not UTF-8".into()))?;
    let tensors = read_records(&mut r)?;
    let optimizer = match r_u8(&mut r)? {
        0 => None,
        1 => Some(OptimizerState::Sgd(SgdState {
            velocity: read_records(&mut r)?,
        })),
        2 => {
            let step = r_u64(&mut r)?;
            let m = read_records(&mut r)?;
            let v = read_records(&mut r)?;
            Some(OptimizerState::Adam(AdamState { step, m, v }))
        }
        other => {
            return Err(NnError::Checkpoint(format!(
                "unknown optimizer tag {other}"
            )))
        }
    };
    let center = match r_u8(&mut r)? {
        0 => None,
        1 => {
            let len = r_u32(&mut r)? as usize;
            let mut raw = vec![0u8; 4 * len];
            r.read_exact(&mut raw)?;
            Some(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        other => return Err(NnError::Checkpoint(format!("bad center flag {other}"))),
    };
    Ok(Checkpoint {
        spec_json,
        tensors,
        optimizer,
        center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_map() -> impl Strategy<Value = TensorMap<f32>> {
        prop::collection::btree_map(
            "[a-z.]{1,12}",
            prop::collection::vec(any::<f32>(), 0..24).prop_map(|v| {
                let n = v.len();
                Tensor::new(vec![n], v).unwrap()
            }),
            0..5,
        )
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in arb_map(),
            m in arb_map(),
            step in any::<u64>(),
            center in prop::option::of(prop::collection::vec(any::<f32>(), 1..8)),
        ) {
            let ckpt = Checkpoint {
                spec_json: "{\"k\":1}".into(),
                tensors,
                optimizer: Some(OptimizerState::Adam(AdamState { step, m: m.clone(), v: m })),
                center,
            };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &ckpt).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            let mut again = Vec::new();
            write_checkpoint(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(matches!(
            read_checkpoint(&b"LDPX\x01\0\0\0"[..]),
            Err(NnError::Checkpoint(_))
        ));
    }
}
