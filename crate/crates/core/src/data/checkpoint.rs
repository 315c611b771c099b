//! `LWS1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"LWS1"
//! u32 segment count
//! per segment: u32 layer, u32 ndims, ndims x u32 dims, u32 bias_len,
//!              u64 count, count x f32
//! u64 p, p x f32 theta
//! u64 seed, u64 epoch
//! ```

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Network, ParamStore};

const MAGIC: &[u8; 4] = b"LWS1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSegment {
    pub layer: usize,
    pub weight_shape: Vec<usize>,
    pub bias_len: usize,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub segments: Vec<CheckpointSegment>,
    pub theta: Vec<f32>,
    pub seed: u64,
    pub epoch: u64,
}

impl Checkpoint {
    /// Builds a parameter store for `net`, checking the segment table
    /// against the network's layout.
    pub fn into_params(self, net: &Network) -> Result<ParamStore<f32>> {
        let layout = net.segments();
        let mismatch =
            |msg: String| Error::State(format!("checkpoint does not fit network: {msg}"));
        if self.segments.len() != layout.len() {
            return Err(mismatch(format!(
                "{} segments, network has {} parametric layers",
                self.segments.len(),
                layout.len()
            )));
        }
        for (s, want) in self.segments.iter().zip(layout) {
            if s.layer != want.layer
                || s.weight_shape != want.weight_shape
                || s.bias_len != want.bias_len
            {
                return Err(mismatch(format!(
                    "layer {} has weights {:?} + bias {}, expected layer {} with {:?} + {}",
                    s.layer,
                    s.weight_shape,
                    s.bias_len,
                    want.layer,
                    want.weight_shape,
                    want.bias_len
                )));
            }
        }
        ParamStore::new(net, self.theta)
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_f32s(w: &mut impl Write, values: &[f32]) -> std::io::Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(
    params: &ParamStore<f32>,
    seed: u64,
    epoch: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let write = || -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        put_u32(&mut w, params.segments().len())?;
        for seg in params.segments() {
            put_u32(&mut w, seg.layer)?;
            put_u32(&mut w, seg.weight_shape.len())?;
            for &d in &seg.weight_shape {
                put_u32(&mut w, d)?;
            }
            put_u32(&mut w, seg.bias_len)?;
            put_f32s(&mut w, &params.theta()[seg.range()])?;
        }
        put_f32s(&mut w, params.theta())?;
        w.write_all(&seed.to_le_bytes())?;
        w.write_all(&epoch.to_le_bytes())?;
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(self.bytes.len(), format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, what: &str) -> Result<Vec<f32>> {
        let at = self.pos;
        let n = self.u64(what)?;
        let bytes = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| self.fail(at, format!("{what} length {n} too large")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4, "magic")? != MAGIC {
        return Err(c.fail(0, "not an LWS1 checkpoint (bad magic)"));
    }
    let count = c.u32("segment count")?;
    let mut segments = Vec::with_capacity(count.min(1024));
    let mut expected_offset = 0usize;
    for _ in 0..count {
        let at = c.pos;
        let layer = c.u32("segment layer")?;
        let ndims = c.u32("segment rank")?;
        let mut weight_shape = Vec::with_capacity(ndims.min(8));
        for _ in 0..ndims {
            weight_shape.push(c.u32("segment dims")?);
        }
        let bias_len = c.u32("segment bias length")?;
        let values = c.f32s("segment payload")?;
        let weights: usize = weight_shape.iter().product();
        if weights + bias_len != values.len() {
            return Err(c.fail(
                at,
                format!(
                    "segment {layer}: shape {weight_shape:?} + bias {bias_len} disagrees with {} values",
                    values.len()
                ),
            ));
        }
        expected_offset += values.len();
        segments.push(CheckpointSegment {
            layer,
            weight_shape,
            bias_len,
            values,
        });
    }
    let theta_at = c.pos;
    let theta = c.f32s("parameter vector")?;
    if theta.len() != expected_offset {
        return Err(c.fail(
            theta_at,
            format!(
                "p = {} but segments hold {expected_offset} values",
                theta.len()
            ),
        ));
    }
    let mut offset = 0;
    for s in &segments {
        let slice = &theta[offset..offset + s.values.len()];
        if slice
            .iter()
            .zip(&s.values)
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(c.fail(
                theta_at,
                format!("segment {} payload differs from the flat vector", s.layer),
            ));
        }
        offset += s.values.len();
    }
    let seed = c.u64("seed")?;
    let epoch = c.u64("epoch")?;
    if c.pos != bytes.len() {
        return Err(c.fail(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(Checkpoint {
        segments,
        theta,
        seed,
        epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::xavier_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::conv_net(2, 3).unwrap();
        let mut params: ParamStore = xavier_init(&net, &mut ChaCha8Rng::seed_from_u64(5));
        params.theta_mut()[0] = f32::from_bits(0x7f7f_ffff);
        params.theta_mut()[1] = -0.0;
        let path = dir.path().join("a.lws");
        save_checkpoint(&params, 42, 17, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!((ck.seed, ck.epoch), (42, 17));
        let back = ck.into_params(&net).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.theta()), bits(params.theta()));
    }

    #[test]
    fn mismatched_architecture_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::relu_net(1, 4, 6, 2).unwrap();
        let other = Network::relu_net(1, 5, 6, 2).unwrap();
        let params: ParamStore = xavier_init(&net, &mut ChaCha8Rng::seed_from_u64(1));
        let path = dir.path().join("a.lws");
        save_checkpoint(&params, 0, 0, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(matches!(ck.into_params(&other), Err(Error::State(_))));
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::relu_net(1, 2, 3, 2).unwrap();
        let params: ParamStore = xavier_init(&net, &mut ChaCha8Rng::seed_from_u64(1));
        let path = dir.path().join("a.lws");
        save_checkpoint(&params, 0, 0, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Format { offset: 0, .. })
        ));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        let mut extra = good.clone();
        extra.push(0);
        std::fs::write(&path, &extra).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
