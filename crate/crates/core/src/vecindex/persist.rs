//! Binary index files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "IVFPQ1" | version u16
//! dim u32 | nlist u32 | m u32 | ks u32 | trained u8 | frozen u8
//! coarse centroids: nlist*dim f32     (only when trained)
//! codebooks:        m*ks*(dim/m) f32  (only when trained)
//! nlist times: length u32, then length entries of (ordinal u64, m code bytes)
//! ```

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ivfpq::{InvertedList, IvfPqIndex};
use crate::{Error, Result};

pub const MAGIC: &[u8; 6] = b"IVFPQ1";
pub const VERSION: u16 = 1;

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated index file: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(read_array(r)?) as usize)
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated index file: {e}")))?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v).map(u32::to_le_bytes).map_err(|_| Error::Format(format!("{what} does not fit in u32")))
}

impl IvfPqIndex {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (v, what) in [(self.dim, "dim"), (self.nlist, "nlist"), (self.m, "m"), (self.ks, "ks")] {
            w.write_all(&u32_of(v, what)?)?;
        }
        w.write_all(&[self.trained as u8, self.frozen as u8])?;
        if self.trained {
            let mut buf = Vec::with_capacity((self.coarse.len() + self.codebooks.len()) * 4);
            for x in self.coarse.iter().chain(&self.codebooks) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        for list in &self.lists {
            w.write_all(&u32_of(list.ordinals.len(), "list length")?)?;
            for (o, code) in list.ordinals.iter().zip(list.codes.chunks_exact(self.m.max(1))) {
                w.write_all(&o.to_le_bytes())?;
                w.write_all(code)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let magic: [u8; 6] = read_array(&mut r)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an IVFPQ1 index file".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let dim = read_u32(&mut r)?;
        let nlist = read_u32(&mut r)?;
        let m = read_u32(&mut r)?;
        let ks = read_u32(&mut r)?;
        if dim == 0 || m == 0 || dim % m != 0 || ks == 0 || ks > 256 || nlist == 0 {
            return Err(Error::Format(format!("inconsistent index header dim={dim} nlist={nlist} m={m} ks={ks}")));
        }
        let [trained, frozen] = read_array::<2>(&mut r)?;
        let trained = trained != 0;
        let (coarse, codebooks) = if trained {
            (read_f32s(&mut r, nlist * dim)?, read_f32s(&mut r, m * ks * (dim / m))?)
        } else {
            (Vec::new(), Vec::new())
        };
        let mut lists = Vec::with_capacity(nlist);
        let mut locations = HashMap::new();
        for l in 0..nlist {
            let len = read_u32(&mut r)?;
            let mut list = InvertedList { ordinals: Vec::with_capacity(len), codes: Vec::with_capacity(len * m) };
            for pos in 0..len {
                let o = u64::from_le_bytes(read_array(&mut r)?);
                let mut code = vec![0u8; m];
                r.read_exact(&mut code).map_err(|e| Error::Format(format!("truncated index file: {e}")))?;
                if code.iter().any(|&c| c as usize >= ks) {
                    return Err(Error::Format(format!("code byte out of range for ks={ks}")));
                }
                if locations.insert(o, (l as u32, pos as u32)).is_some() {
                    return Err(Error::Format(format!("ordinal {o} stored twice")));
                }
                list.ordinals.push(o);
                list.codes.extend(code);
            }
            lists.push(list);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after index data".into()));
        }
        Ok(IvfPqIndex { dim, nlist, m, ks, trained, frozen: frozen != 0, coarse, codebooks, lists, locations })
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

#[cfg(test)]
mod tests {
    use super::super::{train_ivfpq, IvfPqParams};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn index() -> (Vec<f32>, IvfPqIndex) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut data = Vec::new();
        for _ in 0..300 {
            let mut v: Vec<f32> = (0..8).map(|_| rng.random::<f32>() - 0.5).collect();
            crate::vector::normalize(&mut v);
            data.extend(v);
        }
        let params = IvfPqParams { nlist: 5, m: 4, ks: 16, kmeans_iters: 8, seed: 1 };
        let mut index = train_ivfpq(&data, 8, &params).unwrap();
        index.add_batch(0, &data).unwrap();
        index.freeze();
        (data, index)
    }

    #[test]
    fn bit_exact_round_trip() {
        let (data, index) = index();
        let mut bytes = Vec::new();
        index.write_to(&mut bytes).unwrap();
        let back = IvfPqIndex::read_from(&bytes[..]).unwrap();
        assert_eq!(back, index);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        for q in data.chunks(8).step_by(37) {
            assert_eq!(back.search(q, 20, 3).unwrap(), index.search(q, 20, 3).unwrap());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (_, index) = index();
        let mut bytes = Vec::new();
        index.write_to(&mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(IvfPqIndex::read_from(&bad_magic[..]), Err(Error::Format(_))));

        let mut bad_version = bytes.clone();
        bad_version[6] = 9;
        assert!(matches!(IvfPqIndex::read_from(&bad_version[..]), Err(Error::Format(_))));

        assert!(IvfPqIndex::read_from(&bytes[..bytes.len() - 1]).is_err());

        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(IvfPqIndex::read_from(&trailing[..]), Err(Error::Format(_))));
    }
}
