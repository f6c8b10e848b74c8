use rand::SeedableRng;

use super::train::{TrainConfig, Trainer};
use super::HrvqModel;
use crate::codebook::HierCodebook;
use crate::error::{Error, Result};
use crate::io::checkpoint::{Decoder, Encoder};
use crate::io::{Checkpoint, SectionTag};
use crate::tensor::{AdamConfig, AdamState};
use crate::Rng;

pub(crate) fn encode_codebook(cb: &HierCodebook) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(cb.layers() as u32).u32(cb.size() as u32).u32(cb.dim() as u32);
    for i in 0..cb.layers() {
        e.f32s(cb.tables()[i].data()).f32s(&cb.ema_counts()[i]).f32s(&cb.ema_sums()[i]);
    }
    e.finish()
}

pub(crate) fn decode_codebook(bytes: &[u8]) -> Result<HierCodebook> {
    let mut d = Decoder::new(bytes);
    let (n, m, dim) = (d.u32()? as usize, d.u32()? as usize, d.u32()? as usize);
    if n > 16 {
        return Err(Error::Checkpoint(format!("codebook claims {n} layers")));
    }
    let (mut tables, mut counts, mut sums) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        tables.push(d.f32s()?);
        counts.push(d.f32s()?);
        sums.push(d.f32s()?);
    }
    if !d.is_done() {
        return Err(Error::Checkpoint("trailing bytes in codebook section".into()));
    }
    let mut cb = HierCodebook::from_tables(n, m, dim, tables)?;
    cb.set_ema_state(counts, sums)?;
    Ok(cb)
}

fn encode_adam(e: &mut Encoder, a: &AdamState) {
    let c = &a.config;
    e.f32(c.lr).f32(c.beta1).f32(c.beta2).f32(c.eps).u64(a.step);
    e.u32(a.first.len() as u32);
    for (m, v) in a.first.iter().zip(&a.second) {
        e.f32s(m).f32s(v);
    }
}

fn decode_adam(d: &mut Decoder) -> Result<AdamState> {
    let config = AdamConfig { lr: d.f32()?, beta1: d.f32()?, beta2: d.f32()?, eps: d.f32()? };
    let step = d.u64()?;
    let k = d.u32()? as usize;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for _ in 0..k {
        first.push(d.f32s()?);
        second.push(d.f32s()?);
    }
    Ok(AdamState { config, step, first, second })
}

fn check_adam(a: &AdamState, sizes: impl Iterator<Item = usize>) -> Result<()> {
    let sizes: Vec<usize> = sizes.collect();
    let ok = a.first.len() == sizes.len()
        && a.first.iter().zip(&a.second).zip(&sizes).all(|((m, v), &s)| m.len() == s && v.len() == s);
    if !ok {
        return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
    }
    Ok(())
}

impl HrvqModel {
    /// Model weights, codebook and `config` as checkpoint sections.
    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push(SectionTag::CONFIG, config.to_text().into_bytes());
        let mut e = Encoder::new();
        e.params(self.params());
        ck.push(SectionTag::MODEL, e.finish());
        ck.push(SectionTag::CODEBOOK, encode_codebook(self.codebook()));
        ck
    }

    /// Rebuilds a model (and the config it was trained with) from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let text = std::str::from_utf8(ck.require(SectionTag::CONFIG)?)
            .map_err(|_| Error::Checkpoint("config section is not UTF-8".into()))?;
        let config = TrainConfig::from_text(text)?;
        let mut model = HrvqModel::new(config.model.clone(), &mut crate::seeded_rng(0))?;
        let mut d = Decoder::new(ck.require(SectionTag::MODEL)?);
        let params = d.params()?;
        model.params_mut().load_from(&params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.set_codebook(decode_codebook(ck.require(SectionTag::CODEBOOK)?)?)?;
        Ok((model, config))
    }
}

impl Trainer {
    /// Complete training state; [`Trainer::from_checkpoint`] resumes it exactly.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(&self.config);

        let mut e = Encoder::new();
        encode_adam(&mut e, &self.adam);
        e.u8(self.table_adam.is_some() as u8);
        if let Some(t) = &self.table_adam {
            encode_adam(&mut e, t);
        }
        ck.push(SectionTag::OPTIMIZER, e.finish());

        let mut e = Encoder::new();
        e.bytes(&self.rng.get_seed()).u64(self.rng.get_stream()).u128(self.rng.get_word_pos());
        ck.push(SectionTag::RNG, e.finish());

        let mut e = Encoder::new();
        e.u64(self.step).u64(self.epoch as u64).u64(self.cursor as u64).u8(self.codebook_ready as u8);
        e.u64(self.epoch_batches).u64(self.epoch_wall_ms.to_bits());
        e.u64(self.epoch_sums.len() as u64);
        for s in &self.epoch_sums {
            e.u64(s.to_bits());
        }
        e.u64(self.last_used.len() as u64);
        for &u in &self.last_used {
            e.u64(u);
        }
        ck.push(SectionTag::COUNTERS, e.finish());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, config) = HrvqModel::from_checkpoint(ck)?;
        let mut t = Trainer::with_model(model, config)?;

        let mut d = Decoder::new(ck.require(SectionTag::OPTIMIZER)?);
        t.adam = decode_adam(&mut d)?;
        check_adam(&t.adam, t.model.params().tensors().iter().map(|x| x.numel()))?;
        t.table_adam = match d.u8()? {
            0 => None,
            _ => Some(decode_adam(&mut d)?),
        };
        if let Some(ta) = &t.table_adam {
            check_adam(ta, t.model.codebook().tables().iter().map(|x| x.numel()))?;
        }

        let mut d = Decoder::new(ck.require(SectionTag::RNG)?);
        let seed: [u8; 32] = d
            .bytes()?
            .try_into()
            .map_err(|_| Error::Checkpoint("RNG seed must be 32 bytes".into()))?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(d.u64()?);
        rng.set_word_pos(d.u128()?);
        t.rng = rng;

        let mut d = Decoder::new(ck.require(SectionTag::COUNTERS)?);
        t.step = d.u64()?;
        t.epoch = d.u64()? as usize;
        t.cursor = d.u64()? as usize;
        t.codebook_ready = d.u8()? != 0;
        t.epoch_batches = d.u64()?;
        t.epoch_wall_ms = f64::from_bits(d.u64()?);
        let k = d.u64()? as usize;
        if k != t.epoch_sums.len() {
            return Err(Error::Checkpoint(format!("{k} epoch accumulators, expected {}", t.epoch_sums.len())));
        }
        for s in t.epoch_sums.iter_mut() {
            *s = f64::from_bits(d.u64()?);
        }
        let k = d.u64()? as usize;
        if k != t.last_used.len() {
            return Err(Error::Checkpoint(format!("{k} restart counters, expected {}", t.last_used.len())));
        }
        for u in t.last_used.iter_mut() {
            *u = d.u64()?;
        }
        Ok(t)
    }
}
