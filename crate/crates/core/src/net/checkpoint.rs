//! Binary checkpoint format.
//!
//! ```text
//! "OSSA-CKPT"  version:u8  layers:u32
//! per layer:   out:u32 in:u32 activation:u8 weights:f64[out*in] bias:f64[out]
//! blocks:      tag:[u8;4] payload   (zero or more, any order)
//!   "NORM"     (no payload) embeddings are L2-normalized
//!   "HEAD"     classes:u32 dim:u32 weights:f64[classes*dim] bias:f64[classes]
//!   "PRXY"     count:u32 dim:u32 { class:u32 values:f64[dim] }*
//!   "OPTM"     beta1 beta2 eps weight_decay:f64 step:u64 tensors:u32
//!              { len:u32 first:f64[len] second:f64[len] }*
//! "END."
//! ```
//!
//! All integers and floats are little-endian.

use crate::error::{Error, Result};
use crate::metric::ProxySet;
use crate::net::{Activation, AdamWConfig, EmbeddingModel, Layer, OptimizerState};
use crate::pretrain::ClassifierHead;
use crate::types::ClassId;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"OSSA-CKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

const TAG_NORM: &[u8; 4] = b"NORM";
const TAG_HEAD: &[u8; 4] = b"HEAD";
const TAG_PROXIES: &[u8; 4] = b"PRXY";
const TAG_OPTIM: &[u8; 4] = b"OPTM";
const TAG_END: &[u8; 4] = b"END.";

/// A model plus whatever training state travels with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EmbeddingModel,
    pub head: Option<ClassifierHead>,
    pub proxies: Option<ProxySet>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(model: EmbeddingModel) -> Self {
        Self {
            model,
            head: None,
            proxies: None,
            optimizer: None,
        }
    }

    /// Drops the classification head, keeping the embedding network.
    pub fn strip_head(self) -> Result<EmbeddingModel> {
        match self.head {
            Some(_) => Ok(self.model),
            None => Err(Error::State("checkpoint has no classification head".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u8(CHECKPOINT_VERSION);
        let layers = self.model.layers();
        w.u32(layers.len() as u32);
        for l in layers {
            w.u32(l.out_dim() as u32);
            w.u32(l.in_dim() as u32);
            w.u8(l.activation().code());
            w.f64s(l.weights());
            w.f64s(l.bias());
        }
        if self.model.normalize() {
            w.bytes(TAG_NORM);
        }
        if let Some(head) = &self.head {
            w.bytes(TAG_HEAD);
            w.u32(head.classes() as u32);
            w.u32(head.dim() as u32);
            w.f64s(head.weights());
            w.f64s(head.bias());
        }
        if let Some(proxies) = &self.proxies {
            w.bytes(TAG_PROXIES);
            w.u32(proxies.len() as u32);
            w.u32(proxies.dim() as u32);
            for (class, p) in proxies.iter() {
                w.u32(class.0);
                w.f64s(p);
            }
        }
        if let Some(opt) = &self.optimizer {
            w.bytes(TAG_OPTIM);
            let c = opt.config;
            for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
                w.f64(v);
            }
            w.u64(opt.step_count());
            w.u32(opt.first_moments().len() as u32);
            for (m, v) in opt.first_moments().iter().zip(opt.second_moments()) {
                w.u32(m.len() as u32);
                w.f64s(m);
                w.f64s(v);
            }
        }
        w.bytes(TAG_END);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            let act = Activation::from_code(r.u8()?)
                .ok_or_else(|| Error::Checkpoint("unknown activation code".into()))?;
            let weights = r.f64s(out.checked_mul(inp).ok_or_else(too_big)?)?;
            let bias = r.f64s(out)?;
            layers.push(Layer::new(out, inp, weights, bias, act).map_err(wrap)?);
        }
        let mut normalize = false;
        let mut head = None;
        let mut proxies = None;
        let mut optimizer = None;
        loop {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            match &tag {
                TAG_END => break,
                TAG_NORM => normalize = true,
                TAG_HEAD => {
                    let k = r.u32()? as usize;
                    let dim = r.u32()? as usize;
                    let weights = r.f64s(k.checked_mul(dim).ok_or_else(too_big)?)?;
                    let bias = r.f64s(k)?;
                    head = Some(ClassifierHead::new(k, dim, weights, bias).map_err(wrap)?);
                }
                TAG_PROXIES => {
                    let count = r.u32()? as usize;
                    let dim = r.u32()? as usize;
                    let mut entries = Vec::with_capacity(count.min(1 << 16));
                    for _ in 0..count {
                        let class = ClassId(r.u32()?);
                        entries.push((class, r.f64s(dim)?));
                    }
                    proxies = Some(ProxySet::new(entries).map_err(wrap)?);
                }
                TAG_OPTIM => {
                    let config = AdamWConfig {
                        beta1: r.f64()?,
                        beta2: r.f64()?,
                        eps: r.f64()?,
                        weight_decay: r.f64()?,
                    };
                    let step = r.u64()?;
                    let tensors = r.u32()? as usize;
                    let mut first = Vec::with_capacity(tensors.min(1024));
                    let mut second = Vec::with_capacity(tensors.min(1024));
                    for _ in 0..tensors {
                        let len = r.u32()? as usize;
                        first.push(r.f64s(len)?);
                        second.push(r.f64s(len)?);
                    }
                    optimizer = Some(OptimizerState::from_parts(config, step, first, second));
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unknown block tag {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after end tag".into()));
        }
        let model = EmbeddingModel::new(layers, normalize).map_err(wrap)?;
        if let Some(h) = &head {
            if h.dim() != model.output_dim() {
                return Err(Error::Checkpoint("head width does not match model".into()));
            }
        }
        if let Some(p) = &proxies {
            if p.dim() != model.output_dim() {
                return Err(Error::Checkpoint("proxy width does not match model".into()));
            }
        }
        Ok(Self {
            model,
            head,
            proxies,
            optimizer,
        })
    }
}

fn wrap(e: Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn too_big() -> Error {
    Error::Checkpoint("tensor size overflow".into())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(too_big)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
