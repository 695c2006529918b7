//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "OBJRELCK" | u32 version
//! u32 len | model config as key=value lines
//! u64 episode
//! rng: [u8; 32] seed | u64 stream | u128 word position
//! u8 has_best | f64 best validation accuracy
//! u64 adam step | f64 lr | f64 beta1 | f64 beta2 | f64 epsilon
//! u8 has_stats | u32 channels | f64 mean[channels] | f64 std[channels]
//! u32 tensor count, then per tensor:
//!   u32 len | name | u8 dtype | u32 ndim | u64 dims[ndim] | f64 values
//! ```
//!
//! Parameters keep their model names; Adam moments are stored as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::episodes::ChannelStats;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::{AdamConfig, AdamState, Moments, Tensor};

pub const MAGIC: &[u8; 8] = b"OBJRELCK";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

/// Full position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    /// Number of completed training episodes.
    pub episode: u64,
    /// Source of per-episode sampling seeds.
    pub rng: RngState,
    pub best_val: Option<f64>,
    pub stats: Option<ChannelStats>,
}

impl Checkpoint {
    /// Untrained state: fresh parameters, empty optimizer, episode 0.
    pub fn fresh(
        config: ModelConfig,
        seed: u64,
        adam: AdamConfig,
        stats: Option<ChannelStats>,
    ) -> Result<Self> {
        let model = Model::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            adam: AdamState::new(adam),
            episode: 0,
            rng: RngState::capture(&rng),
            best_val: None,
            stats,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config: String = self
            .model
            .config()
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_bytes(&mut w, config.as_bytes());
        w.extend_from_slice(&self.episode.to_le_bytes());
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.push(u8::from(self.best_val.is_some()));
        w.extend_from_slice(&self.best_val.unwrap_or(0.0).to_le_bytes());
        let a = &self.adam;
        w.extend_from_slice(&a.step.to_le_bytes());
        for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.epsilon] {
            w.extend_from_slice(&v.to_le_bytes());
        }
        match &self.stats {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                w.extend_from_slice(&(s.mean.len() as u32).to_le_bytes());
                for v in s.mean.iter().chain(&s.std) {
                    w.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut records: Vec<(String, &Tensor)> = self
            .model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        for (name, mo) in &a.moments {
            records.push((format!("{MOMENT_M}{name}"), &mo.m));
            records.push((format!("{MOMENT_V}{name}"), &mo.v));
        }
        w.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            put_bytes(&mut w, name.as_bytes());
            w.push(DTYPE_F64);
            w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &s in t.shape() {
                w.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w
    }

    /// Decodes a checkpoint, checking the parameter layout against the stored
    /// model config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic {
                expected: MAGIC.to_vec(),
                found: magic.to_vec(),
            });
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let config_len = r.u32("config length")? as usize;
        let config_text = std::str::from_utf8(r.take(config_len, "model config")?)
            .map_err(|_| CheckpointError::Malformed("model config is not UTF-8".into()))?;
        let config = parse_config(config_text)?;
        let episode = r.u64("episode counter")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("length checked");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let has_best = r.flag("best validation flag")?;
        let best = r.f64("best validation accuracy")?;
        let step = r.u64("adam step")?;
        let adam_config = AdamConfig {
            lr: r.f64("adam lr")?,
            beta1: r.f64("adam beta1")?,
            beta2: r.f64("adam beta2")?,
            epsilon: r.f64("adam epsilon")?,
        };
        let stats = if r.flag("standardization flag")? {
            let c = r.u32("standardization channels")? as usize;
            let mut vals = Vec::with_capacity(2 * c);
            for _ in 0..2 * c {
                vals.push(r.f64("standardization statistics")?);
            }
            let std = vals.split_off(c);
            Some(ChannelStats { mean: vals, std })
        } else {
            None
        };

        let count = r.u32("tensor count")? as usize;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for i in 0..count {
            let (name, tensor) = r.tensor(i)?;
            let target = if let Some(base) = name.strip_prefix(MOMENT_M) {
                m.entry(base.to_string())
            } else if let Some(base) = name.strip_prefix(MOMENT_V) {
                v.entry(base.to_string())
            } else {
                params.entry(name.clone())
            };
            match target {
                std::collections::btree_map::Entry::Occupied(_) => {
                    return Err(CheckpointError::Malformed(format!("tensor `{name}` stored twice")))
                }
                std::collections::btree_map::Entry::Vacant(slot) => {
                    slot.insert(tensor);
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }

        let params = ModelParams::from_map(params);
        params.check_layout(&config)?;
        if m.keys().ne(v.keys()) {
            return Err(CheckpointError::Malformed(
                "adam first and second moments cover different tensors".into(),
            ));
        }
        let mut moments = BTreeMap::new();
        for (name, m) in m {
            let v = v.remove(&name).expect("key sets equal");
            match params.get(&name) {
                None => {
                    return Err(CheckpointError::Malformed(format!(
                        "adam moments for unknown parameter `{name}`"
                    )))
                }
                Some(p) if p.shape() != m.shape() || p.shape() != v.shape() => {
                    return Err(CheckpointError::ShapeMismatch {
                        name: format!("{MOMENT_M}{name}"),
                        expected: p.shape().to_vec(),
                        found: m.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
            moments.insert(name, Moments { m, v });
        }
        let model = Model::from_parts(config, params)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(Self {
            model,
            adam: AdamState {
                config: adam_config,
                step,
                moments,
            },
            episode,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            best_val: has_best.then_some(best),
            stats,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// crash never leaves a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = Path::new(&tmp);
        fs::write(tmp, self.to_bytes()).map_err(|e| Error::io(tmp, e))?;
        fs::rename(tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Loads and checks that the stored model has the tensor shapes and
    /// object grid `expected` calls for.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let cp = Self::load(path)?;
        cp.check_compatible(expected)?;
        Ok(cp)
    }

    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        let stored = self.model.config();
        let want = [expected.input_size, expected.input_size, expected.channels];
        let have = [stored.input_size, stored.input_size, stored.channels];
        if want != have {
            return Err(CheckpointError::ShapeMismatch {
                name: "input_image".into(),
                expected: want.to_vec(),
                found: have.to_vec(),
            });
        }
        self.model.params().check_layout(expected)?;
        let want = [expected.d, expected.d, expected.c];
        let have = [stored.d, stored.d, stored.c];
        if want != have {
            return Err(CheckpointError::ShapeMismatch {
                name: "object_grid".into(),
                expected: want.to_vec(),
                found: have.to_vec(),
            });
        }
        Ok(())
    }
}

fn put_bytes(w: &mut Vec<u8>, bytes: &[u8]) {
    w.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    w.extend_from_slice(bytes);
}

fn parse_config(text: &str) -> Result<ModelConfig, CheckpointError> {
    let mut pairs = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("config line `{line}`")))?;
        pairs.insert(k.to_string(), v.to_string());
    }
    ModelConfig::from_pairs(&pairs).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CheckpointError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(CheckpointError::Truncated {
                context: context.to_string(),
                needed: n - left,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, context: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, context: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, context: &str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self, context: &str) -> Result<bool, CheckpointError> {
        match self.take(1, context)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(CheckpointError::Malformed(format!("{context} byte is {b}"))),
        }
    }

    fn tensor(&mut self, index: usize) -> Result<(String, Tensor), CheckpointError> {
        let ctx = format!("tensor record {index}");
        let len = self.u32(&ctx)? as usize;
        let name = std::str::from_utf8(self.take(len, &ctx)?)
            .map_err(|_| CheckpointError::Malformed(format!("{ctx}: name is not UTF-8")))?
            .to_string();
        let ctx = format!("tensor `{name}`");
        let dtype = self.take(1, &ctx)?[0];
        if dtype != DTYPE_F64 {
            return Err(CheckpointError::Malformed(format!("{ctx}: unknown dtype tag {dtype}")));
        }
        let ndim = self.u32(&ctx)? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(CheckpointError::Malformed(format!("{ctx}: rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let s = usize::try_from(self.u64(&ctx)?)
                .map_err(|_| CheckpointError::Malformed(format!("{ctx}: extent overflows")))?;
            shape.push(s);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .filter(|&n| n > 0)
            .ok_or_else(|| CheckpointError::Malformed(format!("{ctx}: shape {shape:?}")))?;
        let payload = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| CheckpointError::Malformed(format!("{ctx}: payload overflows")))?,
            &ctx,
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok((name, t))
    }
}
