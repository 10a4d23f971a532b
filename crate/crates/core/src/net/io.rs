//! Binary weights file.
//!
//! Layout (all integers `u64` little-endian, all reals `f64` little-endian):
//!
//! ```text
//! "NDBW1"
//! group1_width group2_width fc_width fc_depth output_half_len
//! 4 x { dim, mean[dim], matrix[dim*dim] }            whitening, bands L B2 B1 H
//! n_layers x { out, in, weight[out*in], bias[out] }   fixed layer order
//! crc32 (u32 LE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{ArchitectureConfig, Dense, NetworkWeights};
use crate::bands::{BandWhitening, WhiteningTransform, NUM_BANDS};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"NDBW1";

pub fn encode_weights(w: &NetworkWeights) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    let a = &w.arch;
    for v in [a.group1_width, a.group2_width, a.fc_width, a.fc_depth, a.output_half_len] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for band in &w.whitening.bands {
        buf.extend_from_slice(&(band.dim() as u64).to_le_bytes());
        put_reals(&mut buf, &band.mean);
        put_reals(&mut buf, &band.matrix);
    }
    for layer in &w.layers {
        buf.extend_from_slice(&(layer.out_dim() as u64).to_le_bytes());
        buf.extend_from_slice(&(layer.in_dim() as u64).to_le_bytes());
        put_reals(&mut buf, layer.weight.iter().copied());
        put_reals(&mut buf, layer.bias.iter().copied());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn put_reals<'a>(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = impl std::borrow::Borrow<f64>>) {
    for v in vals {
        buf.extend_from_slice(&v.borrow().to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::BadWeights("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::BadWeights("size overflow".into()))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::BadWeights("size overflow".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<NetworkWeights> {
    if bytes.len() < WEIGHTS_MAGIC.len() + 4 || &bytes[..WEIGHTS_MAGIC.len()] != WEIGHTS_MAGIC {
        return Err(Error::BadWeights("missing NDBW1 magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::BadWeights("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: WEIGHTS_MAGIC.len(),
    };
    let arch = ArchitectureConfig {
        group1_width: r.u64()?,
        group2_width: r.u64()?,
        fc_width: r.u64()?,
        fc_depth: r.u64()?,
        output_half_len: r.u64()?,
    };
    arch.validate()?;
    let mut bands = Vec::with_capacity(NUM_BANDS);
    for _ in 0..NUM_BANDS {
        let dim = r.u64()?;
        let mean = r.reals(dim)?;
        let matrix = r.reals(dim * dim)?;
        bands.push(BandWhitening { mean, matrix });
    }
    let whitening = WhiteningTransform {
        bands: bands.try_into().expect("four bands"),
    };
    let mut layers = Vec::new();
    for _ in 0..arch.layer_shapes().len() {
        let out = r.u64()?;
        let inp = r.u64()?;
        let weight = Array2::from_shape_vec((out, inp), r.reals(out * inp)?)
            .map_err(|e| Error::BadWeights(e.to_string()))?;
        let bias = Array1::from(r.reals(out)?);
        layers.push(Dense { weight, bias });
    }
    if r.pos != body.len() {
        return Err(Error::BadWeights("trailing bytes".into()));
    }
    let w = NetworkWeights {
        arch,
        whitening,
        layers,
    };
    w.check_shapes().map_err(|e| Error::BadWeights(e.to_string()))?;
    Ok(w)
}

pub fn write_weights(w: &NetworkWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_weights(w))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<NetworkWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::unreadable(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let arch = ArchitectureConfig::new(3, 2, 5, 2).unwrap();
        let w = NetworkWeights::init(arch, WhiteningTransform::identity(), 1).unwrap();
        let bytes = encode_weights(&w);
        assert_eq!(&bytes[..5], b"NDBW1");
        assert_eq!(decode_weights(&bytes).unwrap(), w);

        let mut bad = bytes.clone();
        bad[100] ^= 1;
        assert!(matches!(decode_weights(&bad), Err(Error::BadWeights(_))));
        assert!(decode_weights(&bytes[..bytes.len() - 9]).is_err());
        assert!(decode_weights(b"NOPE!1234").is_err());
    }
}
