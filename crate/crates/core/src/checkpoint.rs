//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "VFNC" | u32 version (=1)
//! u32 spec_len | spec block (backbone kind, layers, pooling, hidden width)
//! u64 iteration | f64 validation loss
//! u32 tensor count | per tensor: u32 rank, u32 dims[rank], f32 data[..]
//! u32 CRC-32 of every preceding byte
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::features::{BackboneKind, BackboneSpec, LayerSpec, Pooling, SppConfig, SppMode};
use crate::ranker::{Architecture, Ranker, RankerParams, Snapshot, HIDDEN};
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

pub const MAGIC: &[u8; 4] = b"VFNC";
pub const VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_MAXPOOL: u8 = 3;

/// A trained (or initial) model with the metadata needed to resume
/// evaluation. Parameters are stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub params: RankerParams<f32>,
    pub iteration: u64,
    pub val_loss: f64,
}

impl Checkpoint {
    pub fn from_ranker<T: Real>(ranker: &Ranker<T>, iteration: u64, val_loss: f64) -> Self {
        Self {
            arch: ranker.arch.clone(),
            params: ranker.params.cast(),
            iteration,
            val_loss,
        }
    }

    pub fn from_snapshot<T: Real>(s: &Snapshot<T>) -> Self {
        Self::from_ranker(&s.ranker, s.iteration, s.val_loss)
    }

    pub fn ranker(&self) -> Ranker<f32> {
        Ranker {
            arch: self.arch.clone(),
            params: self.params.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let spec = encode_arch(&self.arch);
        w.u32(spec.len() as u32);
        w.buf.extend_from_slice(&spec);
        w.u64(self.iteration);
        w.f64(self.val_loss);
        let tensors = self.params.tensors();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.tensor(t);
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(bad("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic, not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(&format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }

        let mut r = Reader { buf: body, pos: 8 };
        let spec_len = r.u32()? as usize;
        let spec = r.take(spec_len)?;
        let arch = decode_arch(spec)?;
        let iteration = r.u64()?;
        let val_loss = r.f64()?;
        let mut params = RankerParams::<f32>::zeros(&arch)?;
        let count = r.u32()? as usize;
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(bad(&format!(
                "expected {} tensors, found {count}",
                slots.len()
            )));
        }
        for slot in slots.iter_mut() {
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != slot.dims {
                return Err(bad(&format!(
                    "tensor dims {dims:?} do not match architecture {:?}",
                    slot.dims
                )));
            }
            for v in slot.data.iter_mut() {
                *v = f32::from_le_bytes(r.array()?);
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        Ok(Self {
            arch,
            params,
            iteration,
            val_loss,
        })
    }
}

/// Serialized backbone spec followed by its parameters; identifies a frozen
/// feature extractor.
pub fn backbone_bytes(arch: &Architecture, params: &RankerParams<f32>) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend(encode_arch(arch));
    for c in &params.backbone.convs {
        w.tensor(&c.weight);
        w.tensor(&c.bias);
    }
    w.buf
}

fn bad(msg: &str) -> Error {
    Error::Checkpoint(String::from(msg))
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.dims.len() as u32);
        for &d in &t.dims {
            self.u32(d as u32);
        }
        for v in &t.data {
            self.buf.extend_from_slice(&v.to_le_bytes());
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
            .ok_or_else(|| bad("truncated record"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }
}

fn encode_arch(arch: &Architecture) -> Vec<u8> {
    let mut w = Writer::default();
    let b = &arch.backbone;
    w.u8(match b.kind {
        BackboneKind::Toy => 0,
        BackboneKind::Fixed => 1,
    });
    w.u32(b.in_channels as u32);
    w.u32(b.layers.len() as u32);
    for layer in &b.layers {
        match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                w.u8(TAG_CONV);
                for v in [out_channels, kernel, stride, pad] {
                    w.u32(v as u32);
                }
            }
            LayerSpec::Relu => w.u8(TAG_RELU),
            LayerSpec::MaxPool { kernel, stride } => {
                w.u8(TAG_MAXPOOL);
                w.u32(kernel as u32);
                w.u32(stride as u32);
            }
        }
    }
    match &arch.pooling {
        Pooling::Flatten => w.u8(0),
        Pooling::Spp(cfg) => {
            w.u8(1);
            w.u8(match cfg.mode {
                SppMode::Max => 0,
                SppMode::Avg => 1,
            });
            w.u32(cfg.sizes.len() as u32);
            for &k in &cfg.sizes {
                w.u32(k as u32);
            }
        }
    }
    w.u32(HIDDEN as u32);
    w.buf
}

fn decode_arch(bytes: &[u8]) -> Result<Architecture> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let kind = match r.u8()? {
        0 => BackboneKind::Toy,
        1 => BackboneKind::Fixed,
        k => return Err(bad(&format!("unknown backbone kind {k}"))),
    };
    let in_channels = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        layers.push(match r.u8()? {
            TAG_CONV => LayerSpec::Conv {
                out_channels: r.u32()? as usize,
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
                pad: r.u32()? as usize,
            },
            TAG_RELU => LayerSpec::Relu,
            TAG_MAXPOOL => LayerSpec::MaxPool {
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
            },
            t => return Err(bad(&format!("unknown layer tag {t}"))),
        });
    }
    let pooling = match r.u8()? {
        0 => Pooling::Flatten,
        1 => {
            let mode = match r.u8()? {
                0 => SppMode::Max,
                1 => SppMode::Avg,
                m => return Err(bad(&format!("unknown SPP mode {m}"))),
            };
            let count = r.u32()? as usize;
            let sizes = (0..count)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            Pooling::Spp(SppConfig::new(sizes, mode))
        }
        p => return Err(bad(&format!("unknown pooling kind {p}"))),
    };
    let hidden = r.u32()? as usize;
    if hidden != HIDDEN {
        return Err(bad(&format!("hidden width {hidden}, expected {HIDDEN}")));
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes in spec block"));
    }
    let backbone = BackboneSpec {
        kind,
        in_channels,
        layers,
    };
    Architecture::new(backbone, pooling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SppConfig;

    fn sample() -> Checkpoint {
        let arch = Architecture::new(
            BackboneSpec::alexnet_like(BackboneKind::Toy, 4, 6, 8),
            Pooling::Spp(SppConfig::avg()),
        )
        .unwrap();
        let ranker = Ranker::<f32>::init(arch, 42).unwrap();
        Checkpoint::from_ranker(&ranker, 1234, 0.625)
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"VFNC");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn every_architecture_variant_round_trips() {
        for pooling in [Pooling::Flatten, Pooling::Spp(SppConfig::max())] {
            for kind in [BackboneKind::Toy, BackboneKind::Fixed] {
                let arch =
                    Architecture::new(BackboneSpec::alexnet_like(kind, 2, 2, 2), pooling.clone())
                        .unwrap();
                let ck = Checkpoint::from_ranker(
                    &Ranker::<f32>::init(arch, 1).unwrap(),
                    0,
                    f64::INFINITY,
                );
                assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
            }
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = sample().encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match Checkpoint::decode(&bytes) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("checksum"), "{msg}"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn refuses_unknown_versions_and_magic() {
        let mut bytes = sample().encode();
        bytes[4] = 2;
        assert!(
            matches!(Checkpoint::decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("version"))
        );
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(
            matches!(Checkpoint::decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("magic"))
        );
        assert!(Checkpoint::decode(b"VFN").is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().encode();
        let cut = &bytes[..bytes.len() - 100];
        assert!(Checkpoint::decode(cut).is_err());
    }

    #[test]
    fn decoded_model_scores_identically() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        let d = ck.arch.feature_len().unwrap();
        let f: Vec<f32> = (0..d).map(|i| (i % 7) as f32 * 0.1).collect();
        let a = ck.ranker().score_features(&f).unwrap();
        let b = back.ranker().score_features(&f).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
