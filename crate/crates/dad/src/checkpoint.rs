//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic           8 bytes  "DADCKPT\n"
//! format_version  u32
//! config          u64 length + UTF-8 TOML snapshot of the run configuration
//! epochs_done     u64
//! params          u64 count, then per entry:
//!                   u32 name length, name, u8 kind (0 learnable, 1 buffer),
//!                   u8 rank, u64 per dim, f64 per element
//! optimizer       u8 present flag; when set: u64 step, u64 count, then per
//!                   entry u32 name length, name, first and second moments as
//!                   f64 runs shaped like the parameter
//! ```

use std::path::Path;

use dad_core::nn::{ParamKind, ParamStore};
use dad_core::optim::{Adam, AdamConfig};
use dad_core::train::Network;
use dad_core::Tensor;

use crate::config::{Profile, RunConfig};
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"DADCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epochs_done: usize,
    pub params: Vec<(String, ParamKind, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, epochs_done: usize, net: &Network, adam: Option<&Adam>) -> Self {
        let params = net
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.kind, e.value.clone()))
            .collect();
        let optimizer = adam.map(|a| OptimizerState {
            step: a.steps(),
            moments: a
                .moments()
                .map(|(id, m, v)| (net.store.entry(id).name.clone(), m.clone(), v.clone()))
                .collect(),
        });
        Checkpoint {
            config: config.clone(),
            epochs_done,
            params,
            optimizer,
        }
    }

    /// Build the network described by the snapshot and load its parameters.
    pub fn restore_network(&self) -> Result<Network> {
        let mut net = Network::new(&self.config.model_config()?)?;
        self.load_into(&mut net.store)?;
        Ok(net)
    }

    /// Overwrite every entry of `store`; names, kinds and shapes must agree.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, kind, _) in &self.params {
            if let Some(id) = store.find(name) {
                if store.entry(id).kind != *kind {
                    return Err(dad_core::Error::Load(format!("parameter {name} changed kind")).into());
                }
            }
        }
        let values: Vec<(String, Tensor)> = self.params.iter().map(|(n, _, t)| (n.clone(), t.clone())).collect();
        store.load(&values)?;
        Ok(())
    }

    pub fn restore_adam(&self, store: &ParamStore, config: AdamConfig) -> Result<Adam> {
        let mut adam = Adam::new(config);
        if let Some(opt) = &self.optimizer {
            let mut moments = Vec::with_capacity(opt.moments.len());
            for (name, m, v) in &opt.moments {
                let id = store
                    .find(name)
                    .ok_or_else(|| dad_core::Error::Load(format!("optimizer state for unknown parameter {name}")))?;
                if store.get(id).shape() != m.shape() || m.shape() != v.shape() {
                    return Err(dad_core::Error::Load(format!("optimizer state for {name} has the wrong shape")).into());
                }
                moments.push((id, m.clone(), v.clone()));
            }
            adam.restore(opt.step, moments);
        }
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = self.config.to_toml_string()?;
        put_u64(&mut w, config.len() as u64);
        w.extend_from_slice(config.as_bytes());
        put_u64(&mut w, self.epochs_done as u64);
        put_u64(&mut w, self.params.len() as u64);
        for (name, kind, t) in &self.params {
            put_name(&mut w, name);
            w.push(match kind {
                ParamKind::Learnable => 0,
                ParamKind::Buffer => 1,
            });
            w.push(t.ndim() as u8);
            for &d in t.shape() {
                put_u64(&mut w, d as u64);
            }
            put_f64s(&mut w, t.data());
        }
        match &self.optimizer {
            None => w.push(0),
            Some(opt) => {
                w.push(1);
                put_u64(&mut w, opt.step);
                put_u64(&mut w, opt.moments.len() as u64);
                for (name, m, v) in &opt.moments {
                    put_name(&mut w, name);
                    put_f64s(&mut w, m.data());
                    put_f64s(&mut w, v.data());
                }
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(format!("format version {version}, this build reads {FORMAT_VERSION}"));
        }
        let len = r.len()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| "config snapshot is not UTF-8".to_string())?;
        let config = RunConfig::from_toml_str(text, Profile::Paper, &[]).map_err(|e| format!("config snapshot: {e}"))?;
        let epochs_done = r.len()?;
        let count = r.len()?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        let mut shapes = std::collections::HashMap::new();
        for _ in 0..count {
            let name = r.name()?;
            let kind = match r.take(1)?[0] {
                0 => ParamKind::Learnable,
                1 => ParamKind::Buffer,
                k => return Err(format!("parameter {name}: unknown kind {k}")),
            };
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format!("parameter {name}: shape overflows"))?;
            let t = Tensor::new(&shape, r.f64s(n)?).map_err(|e| format!("parameter {name}: {e}"))?;
            shapes.insert(name.clone(), shape);
            params.push((name, kind, t));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.len()? as u64;
                let count = r.len()?;
                let mut moments = Vec::with_capacity(count.min(1 << 16));
                for _ in 0..count {
                    let name = r.name()?;
                    let shape = shapes
                        .get(&name)
                        .ok_or_else(|| format!("optimizer state for unknown parameter {name}"))?
                        .clone();
                    let n = shape.iter().product();
                    let m = Tensor::new(&shape, r.f64s(n)?).map_err(|e| e.to_string())?;
                    let v = Tensor::new(&shape, r.f64s(n)?).map_err(|e| e.to_string())?;
                    moments.push((name, m, v));
                }
                Some(OptimizerState { step, moments })
            }
            f => return Err(format!("bad optimizer flag {f}")),
        };
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            config,
            epochs_done,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        // write then rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Named tensors from a checkpoint file, for seeding a backbone.
pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(Checkpoint::load(path)?.params.into_iter().map(|(n, _, t)| (n, t)).collect())
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_name(w: &mut Vec<u8>, name: &str) {
    w.extend_from_slice(&(name.len() as u32).to_le_bytes());
    w.extend_from_slice(name.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, data: &[f64]) {
    w.reserve(data.len() * 8);
    for v in data {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| "length does not fit in memory".to_string())
    }

    fn name(&mut self) -> std::result::Result<String, String> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "parameter name is not UTF-8".to_string())
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflows")?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
