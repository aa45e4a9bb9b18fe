//! Self-describing binary checkpoint for a trained flow.
//!
//! Layout (little-endian): magic "LMNF", version u16, flags u8
//! (bit 0: embedding section, bit 1: conditioning section), architecture
//! header (dim, context_dim, layers, hidden as u32), theta/context
//! standardizers, layer parameters as float64; then the optional sections.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::flow::maf::{FlowConfig, MafStack, Standardizer};
use crate::summaries::RecurrentEmbedding;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LMNF";
pub const CHECKPOINT_FORMAT_VERSION: u16 = 1;

/// Learned-summary section: the recurrent embedding and the per-column
/// standardizer applied to trajectory matrices before embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSection {
    pub embedding: RecurrentEmbedding,
    pub input_std: Standardizer,
}

/// Conditioning section: the observation's summary and the leakage rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSection {
    pub context: Vec<f64>,
    pub leakage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub flow: MafStack,
    pub embedding: Option<EmbeddingSection>,
    pub conditioning: Option<ConditioningSection>,
}

fn write_u32<W: Write>(w: &mut W, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_standardizer<W: Write>(w: &mut W, s: &Standardizer) -> Result<()> {
    write_u32(w, s.dim() as u32)?;
    write_f64s(w, &s.mean)?;
    write_f64s(w, &s.std)?;
    Ok(())
}

fn read_standardizer<R: Read>(r: &mut R) -> Result<Standardizer> {
    let dim = read_u32(r)? as usize;
    let mean = read_f64s(r, dim)?;
    let std = read_f64s(r, dim)?;
    Ok(Standardizer { mean, std })
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
        let mut flags = 0u8;
        if self.embedding.is_some() {
            flags |= 1;
        }
        if self.conditioning.is_some() {
            flags |= 2;
        }
        w.write_all(&[flags])?;
        let flow = &self.flow;
        write_u32(w, flow.dim() as u32)?;
        write_u32(w, flow.context_dim() as u32)?;
        write_u32(w, flow.layers.len() as u32)?;
        write_u32(w, flow.layers[0].hidden as u32)?;
        write_standardizer(w, &flow.theta_std)?;
        write_standardizer(w, &flow.ctx_std)?;
        write_f64s(w, &flow.flatten())?;
        if let Some(emb) = &self.embedding {
            write_u32(w, emb.embedding.input_size as u32)?;
            write_u32(w, emb.embedding.hidden_size as u32)?;
            write_standardizer(w, &emb.input_std)?;
            write_f64s(w, &emb.embedding.flatten())?;
        }
        if let Some(cond) = &self.conditioning {
            write_u32(w, cond.context.len() as u32)?;
            write_f64s(w, &cond.context)?;
            write_f64s(w, &[cond.leakage])?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic, not a flow checkpoint".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut flags = [0u8; 1];
        r.read_exact(&mut flags)?;
        let dim = read_u32(r)? as usize;
        let context_dim = read_u32(r)? as usize;
        let layers = read_u32(r)? as usize;
        let hidden = read_u32(r)? as usize;
        let theta_std = read_standardizer(r)?;
        let ctx_std = read_standardizer(r)?;
        let cfg = FlowConfig {
            dim,
            context_dim,
            layers,
            hidden,
        };
        let mut flow = MafStack::identity(&cfg);
        let params = read_f64s(r, flow.param_count())?;
        flow.unflatten(&params);
        flow.theta_std = theta_std;
        flow.ctx_std = ctx_std;
        let embedding = if flags[0] & 1 != 0 {
            let input_size = read_u32(r)? as usize;
            let hidden_size = read_u32(r)? as usize;
            let input_std = read_standardizer(r)?;
            let mut embedding = RecurrentEmbedding::zeros(input_size, hidden_size);
            let flat = read_f64s(r, embedding.param_count())?;
            embedding.unflatten(&flat);
            Some(EmbeddingSection {
                embedding,
                input_std,
            })
        } else {
            None
        };
        let conditioning = if flags[0] & 2 != 0 {
            let len = read_u32(r)? as usize;
            let context = read_f64s(r, len)?;
            let leakage = read_f64s(r, 1)?[0];
            Some(ConditioningSection { context, leakage })
        } else {
            None
        };
        Ok(Checkpoint {
            flow,
            embedding,
            conditioning,
        })
    }
}
