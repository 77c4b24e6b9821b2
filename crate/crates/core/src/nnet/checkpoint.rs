//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "VTEMCKPT" | version u32 | encoder_depth, first_filters, in_channels,
//! num_classes, input_size: u32 | layer count u32
//! per layer: id u32 | kind u8 | weight dims 4 x u32 | bias len u32 |
//!            weight, bias, m_weight, v_weight, m_bias, v_bias as f32
//! step u64 | CRC-32 (IEEE) of every preceding byte, u32
//! ```

use std::path::Path;

use super::{LayerKind, LayerParams, ModelParams, UNet, UNetConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VTEMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises a model to the checkpoint container.
pub fn save_checkpoint(cfg: &UNetConfig, params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [cfg.encoder_depth, cfg.first_filters, cfg.in_channels, cfg.num_classes, cfg.input_size] {
        put_u32(&mut out, v);
    }
    put_u32(&mut out, params.layers.len());
    for (id, l) in params.layers.iter().enumerate() {
        put_u32(&mut out, id);
        out.push(l.kind.code());
        for d in l.weight_dims() {
            put_u32(&mut out, d);
        }
        put_u32(&mut out, l.bias.len());
        for vals in [&l.weight, &l.bias, &l.m_weight, &l.v_weight, &l.m_bias, &l.v_bias] {
            put_f32s(&mut out, vals);
        }
    }
    out.extend_from_slice(&params.step.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

/// Parses and verifies a checkpoint, including that its layers match the
/// architecture its header describes.
pub fn load_checkpoint(bytes: &[u8]) -> Result<UNet<f32>> {
    if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg = UNetConfig {
        encoder_depth: r.u32()?,
        first_filters: r.u32()?,
        in_channels: r.u32()?,
        num_classes: r.u32()?,
        input_size: r.u32()?,
    };
    cfg.validate().map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let n = r.u32()?;
    if n != cfg.num_layers() {
        return Err(Error::Checkpoint(format!("{n} layers, config needs {}", cfg.num_layers())));
    }
    let mut layers = Vec::with_capacity(n);
    for want_id in 0..n {
        let id = r.u32()?;
        if id != want_id {
            return Err(Error::Checkpoint(format!("layer id {id} out of order (expected {want_id})")));
        }
        let kind = LayerKind::from_code(r.take(1)?[0])
            .ok_or_else(|| Error::Checkpoint(format!("unknown layer kind in layer {id}")))?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let (cin, cout) = match kind {
            LayerKind::UpConv2 => (dims[0], dims[1]),
            _ => (dims[1], dims[0]),
        };
        let mut l = LayerParams::<f32>::zeros(kind, cin, cout);
        if l.weight_dims() != dims || r.u32()? != cout {
            return Err(Error::Checkpoint(format!("inconsistent dims {dims:?} in layer {id}")));
        }
        let (nw, nb) = (l.weight.len(), l.bias.len());
        l.weight = r.f32s(nw)?;
        l.bias = r.f32s(nb)?;
        l.m_weight = r.f32s(nw)?;
        l.v_weight = r.f32s(nw)?;
        l.m_bias = r.f32s(nb)?;
        l.v_bias = r.f32s(nb)?;
        layers.push(l);
    }
    let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    UNet::from_params(cfg, ModelParams { layers, step }).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn write_checkpoint(net: &UNet<f32>, path: impl AsRef<Path>) -> Result<()> {
    crate::raster::write_bytes(path.as_ref(), &save_checkpoint(&net.cfg, &net.params))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<UNet<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained_like() -> UNet<f32> {
        let mut net = UNet::<f32>::new(UNetConfig::new(2, 2, 8), 3).unwrap();
        for (i, l) in net.params.layers.iter_mut().enumerate() {
            l.bias.iter_mut().for_each(|b| *b = 0.1 * i as f32 - 0.3);
            l.m_weight.iter_mut().enumerate().for_each(|(j, m)| *m = (j as f32).sin() * 1e-3);
            l.v_weight.iter_mut().enumerate().for_each(|(j, v)| *v = (j as f32 * 0.37).cos().abs() * 1e-6);
            l.m_bias.iter_mut().for_each(|m| *m = -2.5e-4);
            l.v_bias.iter_mut().for_each(|v| *v = f32::MIN_POSITIVE);
        }
        net.params.step = 12345;
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = trained_like();
        let bytes = save_checkpoint(&net.cfg, &net.params);
        let back = load_checkpoint(&bytes).unwrap();
        assert_eq!(back.cfg, net.cfg);
        assert_eq!(back.params, net.params);
        assert_eq!(save_checkpoint(&back.cfg, &back.params), bytes);
    }

    #[test]
    fn corruption_detected() {
        let net = trained_like();
        let mut bytes = save_checkpoint(&net.cfg, &net.params);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(load_checkpoint(&bytes), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        let good = save_checkpoint(&net.cfg, &net.params);
        assert!(load_checkpoint(&good[..good.len() - 9]).is_err());
        assert!(load_checkpoint(b"garbage").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = trained_like();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&net, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap().params, net.params);
    }
}
