//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "RPPCKPT1"
//! version  u32
//! length   u64      body length in bytes
//! body     length bytes
//! sha256   32 bytes over the body
//! ```
//!
//! The body holds the model config, the named tensors (name, prunable flag,
//! shape, `f64` values) and three optional sections: optimizer state,
//! reweighting state and sparse pattern.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamWConfig, OptimizerState, ScheduleConfig};
use crate::params::{ParamSet, TensorMap};
use crate::pattern::SparsePattern;
use crate::prox::{ExponentMode, ReweightState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RPPCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
    pub reweight: Option<ReweightState>,
    pub pattern: Option<SparsePattern>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamSet) -> Self {
        Self { config, params, optimizer: None, reweight: None, pattern: None }
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.usize(d);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn map(&mut self, m: &TensorMap) {
        self.u32(m.len() as u32);
        for (name, t) in m {
            self.str(name);
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

type Parse<T> = std::result::Result<T, String>;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Parse<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("unexpected end of body")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Parse<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Parse<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Parse<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Parse<usize> {
        usize::try_from(self.u64()?).map_err(|_| "size overflows usize".to_string())
    }
    fn f64(&mut self) -> Parse<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bool(&mut self) -> Parse<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(format!("bad flag byte {v}")),
        }
    }
    fn str(&mut self) -> Parse<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "name is not UTF-8".to_string())
    }
    fn tensor(&mut self) -> Parse<Tensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.usize()).collect::<Parse<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor size overflows")?;
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err("tensor extends past end of body".into());
        }
        let data = (0..n).map(|_| self.f64()).collect::<Parse<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }
    fn map(&mut self) -> Parse<TensorMap> {
        let n = self.u32()?;
        (0..n).map(|_| Ok((self.str()?, self.tensor()?))).collect()
    }
}

fn encode_body(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    let c = &ck.config;
    for v in [c.layers, c.hidden, c.heads, c.vocab, c.seq_len, c.ffn] {
        w.usize(v);
    }
    w.u64(c.seed);

    w.u32(ck.params.len() as u32);
    for (name, p) in ck.params.iter() {
        w.str(name);
        w.u8(u8::from(p.prunable));
        w.tensor(&p.value);
    }

    match &ck.optimizer {
        None => w.u8(0),
        Some(o) => {
            w.u8(1);
            let c = &o.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                w.f64(v);
            }
            w.u64(c.schedule.warmup_steps);
            w.u64(c.schedule.total_steps);
            w.u64(o.k);
            w.u64(o.schedule_overruns);
            w.map(&o.m);
            w.map(&o.v);
        }
    }

    match &ck.reweight {
        None => w.u8(0),
        Some(r) => {
            w.u8(1);
            w.u32(r.t);
            w.f64(r.gamma);
            w.f64(r.eps);
            w.u8(match r.mode {
                ExponentMode::Candes => 0,
                ExponentMode::Power => 1,
            });
            w.map(&r.alpha);
        }
    }

    match &ck.pattern {
        None => w.u8(0),
        Some(p) => {
            w.u8(1);
            w.usize(p.param_total);
            w.u32(p.sizes.len() as u32);
            for (name, &size) in &p.sizes {
                w.str(name);
                w.usize(size);
                let idx = p.zeros.get(name).map(Vec::as_slice).unwrap_or(&[]);
                w.usize(idx.len());
                for &i in idx {
                    w.usize(i);
                }
            }
        }
    }
    w.0
}

fn decode_body(body: &[u8]) -> Parse<Checkpoint> {
    let mut r = Reader { buf: body, pos: 0 };
    let config = ModelConfig {
        layers: r.usize()?,
        hidden: r.usize()?,
        heads: r.usize()?,
        vocab: r.usize()?,
        seq_len: r.usize()?,
        ffn: r.usize()?,
        seed: r.u64()?,
    };

    let mut params = ParamSet::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let prunable = r.bool()?;
        let t = r.tensor()?;
        if params.contains(&name) {
            return Err(format!("duplicate tensor `{name}`"));
        }
        params.insert(name, t, prunable);
    }

    let optimizer = if r.bool()? {
        let (lr, beta1, beta2, eps, weight_decay) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let schedule = ScheduleConfig { warmup_steps: r.u64()?, total_steps: r.u64()? };
        let config = AdamWConfig { lr, beta1, beta2, eps, weight_decay, schedule };
        let (k, schedule_overruns) = (r.u64()?, r.u64()?);
        Some(OptimizerState { config, m: r.map()?, v: r.map()?, k, schedule_overruns })
    } else {
        None
    };

    let reweight = if r.bool()? {
        let t = r.u32()?;
        let (gamma, eps) = (r.f64()?, r.f64()?);
        let mode = match r.u8()? {
            0 => ExponentMode::Candes,
            1 => ExponentMode::Power,
            v => return Err(format!("unknown exponent mode {v}")),
        };
        Some(ReweightState { alpha: r.map()?, t, gamma, eps, mode })
    } else {
        None
    };

    let pattern = if r.bool()? {
        let mut p = SparsePattern { param_total: r.usize()?, ..Default::default() };
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let size = r.usize()?;
            let n = r.usize()?;
            if n > size {
                return Err(format!("pattern for `{name}` has {n} zeros in {size} weights"));
            }
            let idx = (0..n).map(|_| r.usize()).collect::<Parse<Vec<_>>>()?;
            p.sizes.insert(name.clone(), size);
            p.zeros.insert(name, idx);
        }
        p.validate().map_err(|e| e.to_string())?;
        Some(p)
    } else {
        None
    };

    if r.pos != body.len() {
        return Err(format!("{} trailing bytes in body", body.len() - r.pos));
    }
    Ok(Checkpoint { config, params, optimizer, reweight, pattern })
}

/// Serialises a checkpoint to bytes.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let body = encode_body(ck);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&Sha256::digest(&body));
    out
}

/// Parses checkpoint bytes. `path` is used for error messages only.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let checksum = |reason: String| Error::Checksum { path: path.into(), reason };
    if bytes.len() < HEADER_LEN {
        return Err(checksum("file truncated inside header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { path: path.into(), found: version });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(HEADER_LEN + DIGEST_LEN))
        .ok_or_else(|| checksum(format!("declared body length {len} is impossible")))?;
    if bytes.len() != expected {
        return Err(checksum(format!("expected {expected} bytes, file has {}", bytes.len())));
    }
    let body = &bytes[HEADER_LEN..expected - DIGEST_LEN];
    if Sha256::digest(body).as_slice() != &bytes[expected - DIGEST_LEN..] {
        return Err(checksum("digest does not match body".into()));
    }
    decode_body(body).map_err(|reason| Error::Format { path: path.into(), reason })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// The stored pattern must equal the zero set of the stored weights.
pub fn check_pattern_consistent(ck: &Checkpoint) -> Result<()> {
    if let Some(p) = &ck.pattern {
        let actual = crate::pattern::extract_sparse_pattern(&ck.params);
        if actual.zeros != p.zeros {
            return Err(Error::Invariant(format!(
                "stored pattern has {} zeros but the weights have {}",
                p.pruned(),
                actual.pruned()
            )));
        }
    }
    Ok(())
}

/// Tensor names and shapes, for quick inspection.
pub fn checkpoint_summary(ck: &Checkpoint) -> BTreeMap<String, Vec<usize>> {
    ck.params.iter().map(|(n, p)| (n.to_string(), p.value.shape().to_vec())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::matrix(2, 2, vec![0.0, -1.5, f64::MIN_POSITIVE, 3.0]).unwrap(), true);
        ps.insert("b", Tensor::vector(vec![-0.0]), false);
        Checkpoint::new(ModelConfig::default(), ps)
    }

    #[test]
    fn error_kinds() {
        let p = Path::new("x.ckpt");
        let bytes = encode_checkpoint(&tiny());
        assert!(matches!(decode_checkpoint(b"NOTACKPT....", p), Err(Error::BadMagic { .. })));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode_checkpoint(&v2, p), Err(Error::UnsupportedVersion { found: 2, .. })));
        for cut in [10, 20, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut], p), Err(Error::Checksum { .. })), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped, p), Err(Error::Checksum { .. })));
    }

    #[test]
    fn signed_zero_survives() {
        let ck = tiny();
        let back = decode_checkpoint(&encode_checkpoint(&ck), Path::new("x")).unwrap();
        assert!(back.params.bit_eq(&ck.params));
        assert_eq!(back.params.tensor("b").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
    }
}
