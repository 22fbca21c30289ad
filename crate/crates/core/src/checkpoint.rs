//! `DYNA` checkpoint format.
//!
//! Little-endian: magic `DYNA`, u32 version, u32 tensor count, then per
//! tensor a u16 name length and UTF-8 name, u8 trainable flag, u8 rank, u32
//! dims and the f32 payload; finally a u64 FNV-1a checksum of every preceding
//! byte. The model configuration and fusion state travel as two reserved
//! tensors so the container stays a plain tensor list.

use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{AdapterKind, AdapterSpec, DynAdapterModel, ModelConfig, Placement};
use crate::rng::fnv1a64;
use crate::wire::{put_f32s, write_atomic, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DYNA";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CONFIG_KEY: &str = "__config__";
pub const FUSED_KEY: &str = "__fused__";

fn encode_config(c: &ModelConfig) -> Vec<f32> {
    let a = &c.adapter;
    let mut v = vec![
        c.depth,
        c.interval,
        c.embed_dim,
        c.heads,
        c.mlp_hidden,
        c.image_size,
        c.patch_size,
        c.channels,
        c.num_classes,
        match a.kind {
            AdapterKind::ParallelLowRank => 0,
            AdapterKind::SequentialRep => 1,
        },
        a.rank,
        a.groups,
        a.placement.mha_in as usize,
        a.placement.ffn_in as usize,
        c.head_hidden.len(),
    ];
    v.extend(&c.head_hidden);
    v.into_iter().map(|x| x as f32).collect()
}

const CONFIG_FIXED: usize = 15;

fn decode_config(v: &[f32]) -> Result<ModelConfig> {
    let bad = |detail: String| Error::config(format!("checkpoint {CONFIG_KEY}: {detail}"));
    let ints: Vec<usize> = v
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 16_777_216.0 {
                Ok(x as usize)
            } else {
                Err(bad(format!("non-integer entry {x}")))
            }
        })
        .collect::<Result<_>>()?;
    if ints.len() < CONFIG_FIXED || ints.len() != CONFIG_FIXED + ints[CONFIG_FIXED - 1] {
        return Err(bad(format!("{} entries do not form a configuration", ints.len())));
    }
    let flag = |x: usize, what: &str| match x {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(bad(format!("{what} flag is {x}"))),
    };
    Ok(ModelConfig {
        depth: ints[0],
        interval: ints[1],
        embed_dim: ints[2],
        heads: ints[3],
        mlp_hidden: ints[4],
        image_size: ints[5],
        patch_size: ints[6],
        channels: ints[7],
        num_classes: ints[8],
        adapter: AdapterSpec {
            kind: match ints[9] {
                0 => AdapterKind::ParallelLowRank,
                1 => AdapterKind::SequentialRep,
                k => return Err(bad(format!("adapter kind code {k}"))),
            },
            rank: ints[10],
            groups: ints[11],
            placement: Placement {
                mha_in: flag(ints[12], "mha_in")?,
                ffn_in: flag(ints[13], "ffn_in")?,
            },
        },
        head_hidden: ints[CONFIG_FIXED..].to_vec(),
    })
}

fn put_tensor(out: &mut Vec<u8>, name: &str, trainable: bool, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(t.dims().len()).map_err(|_| Error::contract(format!("`{name}` has too many axes")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(trainable as u8);
    out.push(rank);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::contract(format!("`{name}` axis too long")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    put_f32s(out, t.data());
    Ok(())
}

pub fn checkpoint_bytes(model: &DynAdapterModel) -> Result<Vec<u8>> {
    let store = model.store();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&((store.len() + 2) as u32).to_le_bytes());
    let cfg = encode_config(model.config());
    put_tensor(&mut out, CONFIG_KEY, false, &Tensor::new(vec![cfg.len()], cfg)?)?;
    put_tensor(&mut out, FUSED_KEY, false, &Tensor::scalar(model.is_fused() as u8 as f32))?;
    for (name, p) in store.iter() {
        put_tensor(&mut out, name, p.trainable, &p.tensor)?;
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Parses a checkpoint. The checksum is verified before anything else, so
/// any altered byte is reported as a checksum error.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<DynAdapterModel> {
    if bytes.len() < 4 + 4 + 4 + 8 {
        return Err(Error::Format {
            offset: bytes.len(),
            field: "header",
            detail: format!("file is only {} bytes", bytes.len()),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader::new(body);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            field: "magic",
            detail: "not a DYNA checkpoint".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut store = ParamStore::new();
    let mut config = None;
    let mut fused = None;
    for _ in 0..count {
        let start = r.offset();
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: start + 2,
                field: "name",
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let flag_at = r.offset();
        let trainable = match r.u8("trainable")? {
            0 => false,
            1 => true,
            x => {
                return Err(Error::Format {
                    offset: flag_at,
                    field: "trainable",
                    detail: format!("flag {x} for `{name}`"),
                })
            }
        };
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.error("dims", "size overflow"))?;
        let data = r.f32s(n, "payload")?;
        let t = Tensor::new(dims, data)?;
        match name.as_str() {
            CONFIG_KEY => config = Some(decode_config(t.data())?),
            FUSED_KEY => {
                fused = Some(match t.data() {
                    [0.0] => false,
                    [1.0] => true,
                    other => return Err(Error::config(format!("{FUSED_KEY} holds {other:?}"))),
                })
            }
            _ => store.insert(name.clone(), t, trainable).map_err(|_| Error::Format {
                offset: start,
                field: "name",
                detail: format!("duplicate tensor `{name}`"),
            })?,
        }
    }
    if r.remaining() != 0 {
        return Err(r.error("trailer", format!("{} unexpected bytes before checksum", r.remaining())));
    }
    let config = config.ok_or_else(|| Error::MissingTensor(CONFIG_KEY.into()))?;
    let fused = fused.ok_or_else(|| Error::MissingTensor(FUSED_KEY.into()))?;
    DynAdapterModel::from_parts(config, store, fused)
}

pub fn save_checkpoint(model: &DynAdapterModel, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<DynAdapterModel> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
