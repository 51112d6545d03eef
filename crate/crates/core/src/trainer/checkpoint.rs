//! Flat binary checkpoint, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "TILECOV\0"
//! version          u32
//! height, width, in_channels, vtiles, htiles   u32 each
//! encoder depth d  u32, then d encoder widths (u32)
//! head_channels, head_depth, mode   u32 each
//! param count      u32
//! per param:
//!   name length u32, name (UTF-8), group u8,
//!   ndim u32, dims (u32 each), value count u32, values (f32 each)
//! ```
//!
//! Parameters appear in model order, batch-norm running statistics
//! included.

use std::path::Path;

use super::model::{HeadMode, ModelConfig, ToyModel};
use super::params::ParamGroup;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"TILECOV\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(model: &ToyModel<f32>) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.height,
        c.width,
        c.in_channels,
        c.vtiles,
        c.htiles,
        c.encoder_channels.len(),
    ] {
        put(&mut out, v);
    }
    for &v in &c.encoder_channels {
        put(&mut out, v);
    }
    for v in [c.head_channels, c.head_depth, c.mode.code() as usize] {
        put(&mut out, v);
    }
    put(&mut out, model.store.len());
    for p in &model.store.params {
        put(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.group.code());
        put(&mut out, p.shape.len());
        for &d in &p.shape {
            put(&mut out, d);
        }
        put(&mut out, p.data.len());
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, what: &str) -> Error {
        Error::Validation(format!(
            "{}: checkpoint {what} at byte {}",
            self.path.display(),
            self.pos
        ))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(&format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ToyModel<f32>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Validation(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Validation(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let (height, width, in_channels, vtiles, htiles) = (
        r.u32("height")?,
        r.u32("width")?,
        r.u32("in_channels")?,
        r.u32("vtiles")?,
        r.u32("htiles")?,
    );
    let depth = r.u32("encoder depth")?;
    if depth > 64 {
        return Err(r.fail("encoder depth out of range"));
    }
    let encoder_channels = (0..depth)
        .map(|_| r.u32("encoder width"))
        .collect::<Result<_>>()?;
    let (head_channels, head_depth) = (r.u32("head_channels")?, r.u32("head_depth")?);
    let mode_code = r.u32("mode")?;
    let mode = HeadMode::from_code(mode_code as u32).ok_or_else(|| r.fail("unknown head mode"))?;
    let config = ModelConfig {
        height,
        width,
        in_channels,
        vtiles,
        htiles,
        encoder_channels,
        head_channels,
        head_depth,
        mode,
    };
    let mut model = ToyModel::<f32>::zeroed(config)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let count = r.u32("param count")?;
    if count != model.store.len() {
        return Err(r.fail(&format!(
            "holds {count} params, model has {}",
            model.store.len()
        )));
    }
    for i in 0..count {
        let len = r.u32("name length")?;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| r.fail("non-UTF-8 name"))?;
        let group =
            ParamGroup::from_code(r.take(1, "group")?[0]).ok_or_else(|| r.fail("unknown group"))?;
        let ndim = r.u32("ndim")?;
        if ndim > 8 {
            return Err(r.fail("ndim out of range"));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32("dim")).collect::<Result<_>>()?;
        let n = r.u32("value count")?;
        let expected = &model.store.params[i];
        if name != expected.name
            || group != expected.group
            || shape != expected.shape
            || n != expected.data.len()
        {
            return Err(r.fail(&format!(
                "param {name} does not match model param {}",
                expected.name
            )));
        }
        let raw = r.take(n * 4, "values")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        model.store.params[i].data = data;
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ToyModel<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            mode: HeadMode::Classification,
            vtiles: 2,
            htiles: 2,
            ..ModelConfig::default()
        };
        let model = ToyModel::<f32>::new(cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.config, model.config);
        assert_eq!(std::fs::read(&path).unwrap()[..8], CHECKPOINT_MAGIC);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = ToyModel::<f32>::new(ModelConfig::default(), 1).unwrap();
        let bytes = encode_checkpoint(&model);
        let p = Path::new("x.ckpt");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, p),
            Err(Error::Validation(_))
        ));
        let mut version = bytes;
        version[8] = 9;
        assert!(decode_checkpoint(&version, p).is_err());
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/m")),
            Err(Error::Io { .. })
        ));
    }
}
