use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::excitation::{MutualParams, MutualVars, SelfParams, SelfVars};
use crate::socialgraph::{EmbeddingTable, GraphLayerParams, GraphVars, INIT_STD};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralParams {
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneralVars {
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
}

impl GeneralParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            w_query: Tensor::randn(&[d, d], INIT_STD, rng),
            w_key: Tensor::randn(&[d, d], INIT_STD, rng),
            w_value: Tensor::randn(&[d, d], INIT_STD, rng),
        }
    }
}

/// Every trainable tensor, under stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embed: EmbeddingTable,
    pub graph: GraphLayerParams,
    pub mutual: MutualParams,
    pub self_: SelfParams,
    pub general: GeneralParams,
    /// `d x 2d`.
    pub fusion: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub user: Var,
    pub item: Var,
    pub graph: GraphVars,
    pub mutual: MutualVars,
    pub self_: SelfVars,
    pub general: GeneralVars,
    pub fusion: Var,
}

impl ModelVars {
    /// Same order as [`ModelParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let g = &self.graph;
        let m = &self.mutual;
        let s = &self.self_;
        let q = &self.general;
        vec![
            self.user,
            self.item,
            g.w_user,
            g.b_user,
            g.v_user,
            g.w_item,
            g.b_item,
            g.v_item,
            g.order_weights,
            m.w_query,
            m.w_key,
            m.w_value,
            m.beta,
            m.mu,
            s.w_query,
            s.w_key,
            s.w_value,
            s.beta,
            s.mu,
            s.w_intensity,
            s.b_intensity,
            q.w_query,
            q.w_key,
            q.w_value,
            self.fusion,
        ]
    }

    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            user: v[0],
            item: v[1],
            graph: GraphVars {
                w_user: v[2],
                b_user: v[3],
                v_user: v[4],
                w_item: v[5],
                b_item: v[6],
                v_item: v[7],
                order_weights: v[8],
            },
            mutual: MutualVars { w_query: v[9], w_key: v[10], w_value: v[11], beta: v[12], mu: v[13] },
            self_: SelfVars {
                w_query: v[14],
                w_key: v[15],
                w_value: v[16],
                beta: v[17],
                mu: v[18],
                w_intensity: v[19],
                b_intensity: v[20],
            },
            general: GeneralVars { w_query: v[21], w_key: v[22], w_value: v[23] },
            fusion: v[24],
        }
    }
}

/// `(|U| + |I| + 1)·d + 13d² + 7d + l + 5` trainable scalars.
///
/// Embeddings `(|U| + |I| + 1)·d`; graph layer `2d² + 6d + l`; mutual
/// `3d² + 2`; self `3d² + d + 3`; general `3d²`; fusion `2d²`.
pub fn parameter_count(num_users: usize, num_items: usize, d: usize, orders: usize) -> usize {
    (num_users + num_items + 1) * d + 13 * d * d + 7 * d + orders + 5
}

impl ModelParams {
    /// Weights from `N(0, 0.01²)`; `β`, `μ` and biases at 0; order weights at 1.
    pub fn init(config: &ModelConfig, num_users: usize, num_items: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        Self {
            embed: EmbeddingTable::init(num_users, num_items, d, &mut rng),
            graph: GraphLayerParams::init(d, config.max_order, &mut rng),
            mutual: MutualParams::init(d, &mut rng),
            self_: SelfParams::init(d, &mut rng),
            general: GeneralParams::init(d, &mut rng),
            fusion: Tensor::randn(&[d, 2 * d], INIT_STD, &mut rng),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = self.embed.named();
        v.extend(self.graph.named());
        v.extend(self.mutual.named());
        v.extend(self.self_.named());
        v.push(("general.w_query", &self.general.w_query));
        v.push(("general.w_key", &self.general.w_key));
        v.push(("general.w_value", &self.general.w_value));
        v.push(("fusion.w", &self.fusion));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v = self.embed.named_mut();
        v.extend(self.graph.named_mut());
        v.extend(self.mutual.named_mut());
        v.extend(self.self_.named_mut());
        v.push(("general.w_query", &mut self.general.w_query));
        v.push(("general.w_key", &mut self.general.w_key));
        v.push(("general.w_value", &mut self.general.w_value));
        v.push(("fusion.w", &mut self.fusion));
        v
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn num_users(&self) -> usize {
        self.embed.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.embed.num_items()
    }

    pub fn dim(&self) -> usize {
        self.embed.dim()
    }

    pub fn record(&self, tape: &mut Tape) -> ModelVars {
        let vars: Vec<Var> = self.named().into_iter().map(|(_, t)| tape.leaf(t)).collect();
        ModelVars::from_slice(&vars)
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_mut() {
            t.zero_grad();
        }
    }
}

const MAGIC: &[u8; 8] = b"STPPCKPT";
const VERSION: u32 = 1;

/// A parameter snapshot with the config that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Binary layout, all integers little-endian:
///
/// ```text
/// "STPPCKPT"  u32 version  u64 seed
/// u32 len, config echo (UTF-8 `key = value` lines)
/// u32 count, then per parameter:
///   u32 len, name (UTF-8)  u32 ndim  u64 dims[ndim]  f64 values[product(dims)]
/// ```
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ck.config.seed.to_le_bytes());
    let echo = ck.config.to_text();
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());
    let named = ck.params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Invalid("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Invalid("checkpoint: bad UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Invalid("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Invalid(format!("unsupported checkpoint version {version}")));
    }
    let seed = r.u64()?;
    let mut config = ModelConfig::from_text(&r.string()?)?;
    config.seed = seed;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, Tensor::new(shape, values)?));
    }
    let (num_users, num_items) = match (tensors.first(), tensors.get(1)) {
        (Some((a, u)), Some((b, i))) if a == "embed.user" && b == "embed.item" && i.shape().len() == 2 => {
            (u.shape()[0], i.shape()[0] - 1)
        }
        _ => return Err(Error::Invalid("checkpoint: embeddings missing".into())),
    };
    let mut params = ModelParams::init(&config, num_users, num_items);
    let slots = params.named_mut();
    if slots.len() != tensors.len() {
        return Err(Error::Invalid(format!("checkpoint: expected {} tensors, found {}", slots.len(), tensors.len())));
    }
    for ((name, slot), (got_name, t)) in slots.into_iter().zip(tensors) {
        if name != got_name || slot.shape() != t.shape() {
            return Err(Error::Invalid(format!(
                "checkpoint: tensor `{got_name}` {:?} does not match `{name}` {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(Checkpoint { config, params })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
