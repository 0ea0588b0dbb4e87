//! Inverted file index with product-quantized residuals.

use std::collections::HashMap;

use rayon::prelude::*;

use super::kmeans::kmeans;
use super::{sort_and_truncate, SearchHit};
use crate::vector::squared_l2;
use crate::{Error, Result};

/// Training parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IvfPqParams {
    /// Coarse clusters (inverted lists).
    pub nlist: usize,
    /// Subquantizers; must divide the vector dimension.
    pub m: usize,
    /// Centroids per subquantizer, at most 256.
    pub ks: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IvfPqParams {
    fn default() -> Self {
        Self { nlist: 64, m: 8, ks: 256, kmeans_iters: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct InvertedList {
    pub(crate) ordinals: Vec<u64>,
    /// `ordinals.len() * m` code bytes.
    pub(crate) codes: Vec<u8>,
}

/// One modality's IVFPQ index.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfPqIndex {
    pub(crate) dim: usize,
    pub(crate) nlist: usize,
    pub(crate) m: usize,
    pub(crate) ks: usize,
    pub(crate) trained: bool,
    pub(crate) frozen: bool,
    /// `nlist * dim`.
    pub(crate) coarse: Vec<f32>,
    /// `m * ks * dsub`; subquantizer-major.
    pub(crate) codebooks: Vec<f32>,
    pub(crate) lists: Vec<InvertedList>,
    pub(crate) locations: HashMap<u64, (u32, u32)>,
}

/// Trains the coarse quantizer and residual codebooks on `vectors` (`n * dim`).
pub fn train_ivfpq(vectors: &[f32], dim: usize, params: &IvfPqParams) -> Result<IvfPqIndex> {
    let IvfPqParams { nlist, m, ks, kmeans_iters, seed } = *params;
    if dim == 0 || m == 0 || !dim.is_multiple_of(m) {
        return Err(Error::Argument(format!("dimension {dim} is not divisible by m={m}")));
    }
    if !(1..=256).contains(&ks) || nlist == 0 {
        return Err(Error::Argument(format!("need 1 <= ks <= 256 and nlist >= 1 (ks={ks}, nlist={nlist})")));
    }
    if !vectors.len().is_multiple_of(dim) {
        return Err(Error::Argument("training buffer is not a whole number of vectors".into()));
    }
    let n = vectors.len() / dim;
    if n < nlist.max(ks) {
        return Err(Error::Training(format!("{n} training vectors is fewer than max(nlist={nlist}, ks={ks})")));
    }
    if vectors.iter().any(|x| !x.is_finite()) {
        return Err(Error::Training("training vectors must be finite".into()));
    }

    let coarse = kmeans(vectors, dim, nlist, kmeans_iters, seed)?.centroids;
    let mut index = IvfPqIndex {
        dim,
        nlist,
        m,
        ks,
        trained: false,
        frozen: false,
        coarse,
        codebooks: Vec::new(),
        lists: vec![InvertedList::default(); nlist],
        locations: HashMap::new(),
    };

    let dsub = index.dsub();
    let residuals: Vec<f32> = vectors
        .par_chunks_exact(dim)
        .flat_map_iter(|v| {
            let list = index.assign(v);
            let c = index.coarse_centroid(list);
            v.iter().zip(c).map(|(x, y)| x - y).collect::<Vec<_>>()
        })
        .collect();

    let books: Vec<Vec<f32>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let sub: Vec<f32> =
                residuals.chunks_exact(dim).flat_map(|r| r[j * dsub..(j + 1) * dsub].iter().copied()).collect();
            kmeans(&sub, dsub, ks, kmeans_iters, seed.wrapping_add(j as u64 + 1)).map(|km| km.centroids)
        })
        .collect::<Result<_>>()?;
    index.codebooks = books.concat();
    index.trained = true;
    Ok(index)
}

impl IvfPqIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nlist(&self) -> usize {
        self.nlist
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn ks(&self) -> usize {
        self.ks
    }

    pub fn dsub(&self) -> usize {
        self.dim / self.m
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Number of stored vectors.
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn list_len(&self, list: usize) -> usize {
        self.lists[list].ordinals.len()
    }

    pub fn list_ordinals(&self, list: usize) -> &[u64] {
        &self.lists[list].ordinals
    }

    /// Inverted list and code of a stored ordinal.
    pub fn code_of(&self, ordinal: usize) -> Option<(usize, &[u8])> {
        let &(list, pos) = self.locations.get(&(ordinal as u64))?;
        let (list, pos) = (list as usize, pos as usize);
        Some((list, &self.lists[list].codes[pos * self.m..(pos + 1) * self.m]))
    }

    pub fn coarse_centroid(&self, list: usize) -> &[f32] {
        &self.coarse[list * self.dim..(list + 1) * self.dim]
    }

    /// Codebook entry `k` of subquantizer `j`.
    pub fn codeword(&self, j: usize, k: usize) -> &[f32] {
        let dsub = self.dsub();
        let start = (j * self.ks + k) * dsub;
        &self.codebooks[start..start + dsub]
    }

    /// Nearest coarse centroid; ties go to the lower list.
    pub fn assign(&self, v: &[f32]) -> usize {
        let mut best = (0, f64::INFINITY);
        for list in 0..self.nlist {
            let d = squared_l2(v, self.coarse_centroid(list));
            if d < best.1 {
                best = (list, d);
            }
        }
        best.0
    }

    fn check_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("index is not trained".into()))
        }
    }

    fn check_dim(&self, v: &[f32]) -> Result<()> {
        if v.len() == self.dim {
            Ok(())
        } else {
            Err(Error::Argument(format!("vector length {} != index dim {}", v.len(), self.dim)))
        }
    }

    /// Coarse list and per-subspace code bytes for `v`.
    pub fn encode(&self, v: &[f32]) -> Result<(usize, Vec<u8>)> {
        self.check_trained()?;
        self.check_dim(v)?;
        let list = self.assign(v);
        let c = self.coarse_centroid(list);
        let residual: Vec<f32> = v.iter().zip(c).map(|(x, y)| x - y).collect();
        let dsub = self.dsub();
        let code = residual
            .chunks_exact(dsub)
            .enumerate()
            .map(|(j, r)| {
                let mut best = (0usize, f64::INFINITY);
                for k in 0..self.ks {
                    let d = squared_l2(r, self.codeword(j, k));
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                best.0 as u8
            })
            .collect();
        Ok((list, code))
    }

    /// Reconstructs the residual encoded by `code` (without the coarse centroid).
    pub fn decode_residual(&self, code: &[u8]) -> Vec<f32> {
        code.iter().enumerate().flat_map(|(j, &k)| self.codeword(j, k as usize).iter().copied()).collect()
    }

    /// Reconstructs a full vector from its list and code.
    pub fn decode(&self, list: usize, code: &[u8]) -> Vec<f32> {
        self.decode_residual(code).iter().zip(self.coarse_centroid(list)).map(|(r, c)| r + c).collect()
    }

    fn push_encoded(&mut self, ordinal: u64, list: usize, code: &[u8]) {
        let l = &mut self.lists[list];
        self.locations.insert(ordinal, (list as u32, l.ordinals.len() as u32));
        l.ordinals.push(ordinal);
        l.codes.extend_from_slice(code);
    }

    fn check_writable(&self) -> Result<()> {
        self.check_trained()?;
        if self.frozen {
            return Err(Error::State("index is frozen".into()));
        }
        Ok(())
    }

    /// Encodes and stores one vector under `ordinal`.
    pub fn add(&mut self, ordinal: usize, v: &[f32]) -> Result<()> {
        self.check_writable()?;
        if self.locations.contains_key(&(ordinal as u64)) {
            return Err(Error::State(format!("ordinal {ordinal} already present")));
        }
        let (list, code) = self.encode(v)?;
        self.push_encoded(ordinal as u64, list, &code);
        Ok(())
    }

    /// Adds `vectors` (`n * dim`) under ordinals `first, first + 1, ...`.
    /// Encoding runs in parallel; insertion order is the input order.
    pub fn add_batch(&mut self, first: usize, vectors: &[f32]) -> Result<()> {
        self.check_writable()?;
        if !vectors.len().is_multiple_of(self.dim) {
            return Err(Error::Argument("batch is not a whole number of vectors".into()));
        }
        let n = vectors.len() / self.dim;
        if let Some(dup) = (first..first + n).find(|o| self.locations.contains_key(&(*o as u64))) {
            return Err(Error::State(format!("ordinal {dup} already present")));
        }
        let encoded: Vec<(usize, Vec<u8>)> =
            vectors.par_chunks_exact(self.dim).map(|v| self.encode(v)).collect::<Result<_>>()?;
        for (i, (list, code)) in encoded.into_iter().enumerate() {
            self.push_encoded((first + i) as u64, list, &code);
        }
        Ok(())
    }

    /// Ends the build phase; further `add` calls fail.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Per-subspace squared distances between `residual` and every codeword,
    /// `m * ks` entries.
    fn distance_table(&self, residual: &[f32]) -> Vec<f64> {
        let dsub = self.dsub();
        let mut table = Vec::with_capacity(self.m * self.ks);
        for (j, r) in residual.chunks_exact(dsub).enumerate() {
            for k in 0..self.ks {
                table.push(squared_l2(r, self.codeword(j, k)));
            }
        }
        table
    }

    fn residual(&self, query: &[f32], list: usize) -> Vec<f32> {
        query.iter().zip(self.coarse_centroid(list)).map(|(q, c)| q - c).collect()
    }

    fn table_distance(&self, table: &[f64], code: &[u8]) -> f64 {
        code.iter().enumerate().map(|(j, &k)| table[j * self.ks + k as usize]).sum()
    }

    /// ADC squared distance between `query` and the stored code of `ordinal`.
    pub fn adc_distance(&self, query: &[f32], ordinal: usize) -> Result<Option<f64>> {
        self.check_trained()?;
        self.check_dim(query)?;
        let Some((list, code)) = self.code_of(ordinal) else {
            return Ok(None);
        };
        let table = self.distance_table(&self.residual(query, list));
        Ok(Some(self.table_distance(&table, code)))
    }

    /// ADC similarity `1 - d^2 / 2` of `query` to a stored ordinal.
    pub fn adc_similarity(&self, query: &[f32], ordinal: usize) -> Result<Option<f64>> {
        Ok(self.adc_distance(query, ordinal)?.map(|d| 1.0 - d / 2.0))
    }

    /// The `nprobe` coarse lists nearest to `query`, nearest first.
    pub fn probe_order(&self, query: &[f32], nprobe: usize) -> Vec<usize> {
        let mut lists: Vec<(f64, usize)> =
            (0..self.nlist).map(|l| (squared_l2(query, self.coarse_centroid(l)), l)).collect();
        lists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        lists.into_iter().take(nprobe).map(|(_, l)| l).collect()
    }

    /// Top-`r` stored vectors by ADC similarity over the `nprobe` nearest lists.
    pub fn search(&self, query: &[f32], r: usize, nprobe: usize) -> Result<Vec<SearchHit>> {
        self.check_trained()?;
        self.check_dim(query)?;
        if !(1..=self.nlist).contains(&nprobe) {
            return Err(Error::Argument(format!("nprobe {nprobe} outside [1, {}]", self.nlist)));
        }
        if self.is_empty() || r == 0 {
            return Ok(Vec::new());
        }
        let probes = self.probe_order(query, nprobe);
        let per_list: Vec<Vec<SearchHit>> = probes
            .par_iter()
            .map(|&list| {
                let l = &self.lists[list];
                if l.ordinals.is_empty() {
                    return Vec::new();
                }
                let table = self.distance_table(&self.residual(query, list));
                l.ordinals
                    .iter()
                    .zip(l.codes.chunks_exact(self.m))
                    .map(|(&o, code)| SearchHit {
                        ordinal: o as usize,
                        similarity: 1.0 - self.table_distance(&table, code) / 2.0,
                    })
                    .collect()
            })
            .collect();
        Ok(sort_and_truncate(per_list.concat(), r))
    }
}
