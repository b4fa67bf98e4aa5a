//! Binary checkpoint format (`DFCK`): architecture header, named tensor
//! table, optional optimizer state, and the run's RNG position (master
//! seed + completed-epoch counter; per-epoch generators are derived from
//! those two, so they fully determine the continuation).
//!
//! Loading validates the header and every tensor shape against a freshly
//! constructed model; any mismatch is an error, never a silent reshape.

use crate::backbone::{DiffKanUnet, UnetConfig};
use crate::bae::BaeModel;
use crate::error::{MorphError, Result};
use crate::ftie::{FtieConfig, FtieModule};
use crate::optim::AdamW;
use crate::rng::rng_from;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"DFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    /// name -> (first moment, second moment), same order as the tensors.
    pub entries: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub unet_config: UnetConfig,
    pub ftie_config: Option<FtieConfig>,
    pub master_seed: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_parts(
        unet: &DiffKanUnet,
        ftie: Option<&FtieModule>,
        bae: Option<&BaeModel>,
        optimizer: Option<&AdamW>,
        master_seed: u64,
        epoch: u64,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        let mut put = |pairs: Vec<(String, crate::Tensor)>| {
            for (name, t) in pairs {
                tensors.insert(name, (t.shape().to_vec(), t.to_vec()));
            }
        };
        put(unet.named_params());
        if let Some(f) = ftie {
            put(f.named_params());
        }
        if let Some(b) = bae {
            put(b.named_params());
        }
        Checkpoint {
            unet_config: unet.config.clone(),
            ftie_config: ftie.map(|f| f.config.clone()),
            master_seed,
            epoch,
            tensors,
            optimizer: optimizer.map(|o| OptimizerState {
                step_count: o.step_count(),
                entries: o.state(),
            }),
        }
    }

    pub fn has_bae(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with("bae."))
    }

    /// Reconstruct models from the header and overwrite their weights from
    /// the tensor table. The restored critic comes back frozen.
    pub fn build_models(&self) -> Result<(DiffKanUnet, Option<FtieModule>, Option<BaeModel>)> {
        let mut rng = rng_from(0);
        let unet = DiffKanUnet::new(self.unet_config.clone(), &mut rng)?;
        let ftie = match &self.ftie_config {
            Some(cfg) => Some(FtieModule::new(cfg.clone(), &mut rng)?),
            None => None,
        };
        let bae = if self.has_bae() {
            Some(BaeModel::new(&mut rng))
        } else {
            None
        };
        let mut expected: Vec<(String, crate::Tensor)> = unet.named_params();
        if let Some(f) = &ftie {
            expected.extend(f.named_params());
        }
        if let Some(b) = &bae {
            expected.extend(b.named_params());
        }
        if expected.len() != self.tensors.len() {
            return Err(MorphError::format(format!(
                "checkpoint has {} tensors but the declared architecture needs {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, param) in &expected {
            let (shape, data) = self.tensors.get(name).ok_or_else(|| {
                MorphError::format(format!("checkpoint is missing tensor `{name}`"))
            })?;
            if shape != param.shape() {
                return Err(MorphError::format(format!(
                    "tensor `{name}` has shape {:?} but the architecture expects {:?}",
                    shape,
                    param.shape()
                )));
            }
            param.set_data(data)?;
        }
        let bae = bae.map(|mut b| {
            b.freeze();
            b
        });
        Ok((unet, ftie, bae))
    }

    pub fn restore_optimizer(&self, opt: &mut AdamW) -> Result<bool> {
        match &self.optimizer {
            Some(state) => {
                opt.restore_state(state.step_count, &state.entries)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn write_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        out.push(self.unet_config.use_kan as u8);
        out.push(self.unet_config.use_ftie as u8);
        put_u32(&mut out, self.unet_config.base_width as u32);
        put_u32(&mut out, self.unet_config.emb_dim as u32);
        put_u32(&mut out, self.unet_config.guidance_dim as u32);
        match &self.ftie_config {
            Some(cfg) => {
                out.push(1);
                put_u32(&mut out, cfg.num_slots as u32);
                put_u32(&mut out, cfg.feat_dim as u32);
                put_u32(&mut out, cfg.guidance_dim as u32);
            }
            None => out.push(0),
        }
        put_u64(&mut out, self.master_seed);
        put_u64(&mut out, self.epoch);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, (shape, data)) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, shape.len() as u32);
            for d in shape {
                put_u32(&mut out, *d as u32);
            }
            put_f32s(&mut out, data);
        }
        match &self.optimizer {
            Some(state) => {
                out.push(1);
                put_u64(&mut out, state.step_count);
                put_u32(&mut out, state.entries.len() as u32);
                for (name, (m, v)) in &state.entries {
                    put_str(&mut out, name);
                    put_u32(&mut out, m.len() as u32);
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn read_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(MorphError::format("not a DFCK checkpoint".to_string()));
        }
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(MorphError::format(format!(
                "unsupported checkpoint format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let use_kan = c.u8()? != 0;
        let use_ftie = c.u8()? != 0;
        let unet_config = UnetConfig {
            base_width: c.u32()? as usize,
            emb_dim: c.u32()? as usize,
            guidance_dim: c.u32()? as usize,
            use_kan,
            use_ftie,
        };
        let ftie_config = if c.u8()? != 0 {
            Some(FtieConfig {
                num_slots: c.u32()? as usize,
                feat_dim: c.u32()? as usize,
                guidance_dim: c.u32()? as usize,
            })
        } else {
            None
        };
        let master_seed = c.u64()?;
        let epoch = c.u64()?;
        let n = c.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name = c.string()?;
            let rank = c.u32()? as usize;
            if rank > 8 {
                return Err(MorphError::format(format!(
                    "tensor `{name}` claims rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = c.f32s(numel)?;
            tensors.insert(name, (shape, data));
        }
        let optimizer = if c.u8()? != 0 {
            let step_count = c.u64()?;
            let n = c.u32()? as usize;
            let mut entries = BTreeMap::new();
            for _ in 0..n {
                let name = c.string()?;
                let len = c.u32()? as usize;
                let m = c.f32s(len)?;
                let v = c.f32s(len)?;
                entries.insert(name, (m, v));
            }
            Some(OptimizerState {
                step_count,
                entries,
            })
        } else {
            None
        };
        if c.pos != bytes.len() {
            return Err(MorphError::format(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - c.pos
            )));
        }
        Ok(Checkpoint {
            unet_config,
            ftie_config,
            master_seed,
            epoch,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.write_bytes())
            .map_err(|e| MorphError::invalid(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| MorphError::invalid(format!("read {}: {e}", path.display())))?;
        Self::read_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(4 * data.len());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MorphError::format("checkpoint truncated".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 4096 {
            return Err(MorphError::format(format!("implausible name length {len}")));
        }
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| MorphError::format("tensor name is not UTF-8".to_string()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
