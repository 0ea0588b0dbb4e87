//! Binary embedding matrices stored next to a corpus file.
//!
//! Layout (little-endian): magic `XMVEC1`, `u32` row count, `u32` dim, then
//! `count * dim` `f32` values row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 6] = b"XMVEC1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> Option<&[f32]> {
        (i < self.rows()).then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Appends a row and returns its index.
    pub fn push(&mut self, row: &[f32]) -> usize {
        assert_eq!(row.len(), self.dim, "row width mismatch");
        self.data.extend_from_slice(row);
        self.rows() - 1
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let count = u32::try_from(self.rows()).map_err(|_| Error::Format("too many rows".into()))?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::Format("dimension too large".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&dim.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an XMVEC1 embedding file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let dim = u32::from_le_bytes(word) as usize;
        let mut bytes = vec![0u8; count * dim * 4];
        r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated embedding file: {e}")))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { dim, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut m = EmbeddingMatrix::new(3);
        m.push(&[1.0, -2.5, 3.25]);
        m.push(&[0.0, f32::MIN_POSITIVE, 7.0]);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..6], MAGIC);
        assert_eq!(buf.len(), 6 + 8 + 6 * 4);
        assert_eq!(EmbeddingMatrix::read_from(&buf[..]).unwrap(), m);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(EmbeddingMatrix::read_from(&b"XMVEC2\0\0\0\0\0\0\0\0"[..]), Err(Error::Format(_))));
        let mut m = EmbeddingMatrix::new(2);
        m.push(&[1.0, 2.0]);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        buf.pop();
        assert!(EmbeddingMatrix::read_from(&buf[..]).is_err());
    }
}
