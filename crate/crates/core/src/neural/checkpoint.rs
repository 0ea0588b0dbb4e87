//! Binary model checkpoints.
//!
//! Little-endian layout: magic `FCLS01`, version `u16`, scheme tag `u8`
//! (0 early, 1 late), then `image_dim`, `text_dim`, `hidden`, `attn_hidden`,
//! `classes` and the block count as `u32`; one shape-table entry per block
//! (`u16` name length, name bytes, `u32` rows, `u32` cols); finally every
//! parameter as `f64` in block order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{FusionClassifier, ModelConfig, Scheme};
use crate::{Error, Result};

pub const MAGIC: &[u8; 6] = b"FCLS01";
pub const VERSION: u16 = 1;

fn read<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(read(r)?) as usize)
}

impl FusionClassifier {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let c = self.config();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[match c.scheme {
            Scheme::Early => 0,
            Scheme::Late => 1,
        }])?;
        let blocks: Vec<_> = self.blocks().collect();
        for v in [c.image_dim, c.text_dim, c.hidden, c.attn_hidden, c.classes, blocks.len()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for (name, _, rows, cols) in &blocks {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(*rows as u32).to_le_bytes())?;
            w.write_all(&(*cols as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.num_params() * 8);
        for p in self.params() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        if &read::<6>(&mut r)? != MAGIC {
            return Err(Error::Format("not an FCLS01 checkpoint".into()));
        }
        let version = u16::from_le_bytes(read(&mut r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let scheme = match read::<1>(&mut r)?[0] {
            0 => Scheme::Early,
            1 => Scheme::Late,
            t => return Err(Error::Format(format!("unknown scheme tag {t}"))),
        };
        let config = ModelConfig {
            scheme,
            image_dim: read_u32(&mut r)?,
            text_dim: read_u32(&mut r)?,
            hidden: read_u32(&mut r)?,
            attn_hidden: read_u32(&mut r)?,
            classes: read_u32(&mut r)?,
        };
        let n_blocks = read_u32(&mut r)?;
        let template =
            FusionClassifier::new(config, 0).map_err(|e| Error::Format(format!("invalid model shape: {e}")))?;
        let expected: Vec<(String, usize, usize)> =
            template.blocks().map(|(n, _, r, c)| (n.to_string(), r, c)).collect();
        if n_blocks != expected.len() {
            return Err(Error::Format(format!("{n_blocks} blocks, expected {}", expected.len())));
        }
        for (name, rows, cols) in &expected {
            let len = u16::from_le_bytes(read(&mut r)?) as usize;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
            let got = (String::from_utf8_lossy(&bytes).into_owned(), read_u32(&mut r)?, read_u32(&mut r)?);
            if got != (name.clone(), *rows, *cols) {
                return Err(Error::Format(format!("shape table mismatch: {got:?} vs {name} {rows}x{cols}")));
            }
        }
        let mut bytes = vec![0u8; template.num_params() * 8];
        r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        FusionClassifier::from_params(config, params).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }
}
