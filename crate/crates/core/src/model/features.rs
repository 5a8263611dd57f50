//! Rigid-motion-invariant residue features built from frames.

use crate::error::{Error, Result};
use crate::geometry::FrameSet;
use crate::structure::aa_index;

pub const AA_DIM: usize = 21;
pub const TIME_DIM: usize = 8;
pub const SEQ_DIM: usize = 8;
pub const RBF_DIM: usize = 16;
/// Local Cα coordinate (3), relative rotation (9), sequence offset, distance basis.
pub const EDGE_DIM: usize = 3 + 9 + SEQ_DIM + RBF_DIM;
pub const NODE_DIM: usize = AA_DIM + TIME_DIM;
pub const MAX_SEQ_OFFSET: i64 = 32;
pub const RBF_MAX: f64 = 20.0;
pub const DEFAULT_K: usize = 16;

/// Per-residue node features and per-(residue, neighbour) edge features,
/// stored row-major in flat buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidueFeatures {
    pub n_res: usize,
    pub k: usize,
    /// `n_res × NODE_DIM`: amino-acid one-hot then timestep embedding.
    pub node: Vec<f64>,
    /// `n_res × k × EDGE_DIM`.
    pub edge: Vec<f64>,
    /// `n_res × k` neighbour indices, nearest first.
    pub neighbors: Vec<usize>,
}

impl ResidueFeatures {
    pub fn node(&self, i: usize) -> &[f64] {
        &self.node[i * NODE_DIM..(i + 1) * NODE_DIM]
    }

    pub fn edge(&self, i: usize, slot: usize) -> &[f64] {
        let start = (i * self.k + slot) * EDGE_DIM;
        &self.edge[start..start + EDGE_DIM]
    }

    pub fn neighbor(&self, i: usize, slot: usize) -> usize {
        self.neighbors[i * self.k + slot]
    }
}

fn sinusoid(x: f64, out: &mut [f64]) {
    for (m, pair) in out.chunks_exact_mut(2).enumerate() {
        let w = 0.5f64.powi(m as i32);
        pair[0] = (x * w).sin();
        pair[1] = (x * w).cos();
    }
}

/// Sinusoidal embedding of a clipped sequence offset.
pub fn seq_offset_embedding(offset: i64) -> [f64; SEQ_DIM] {
    let mut out = [0.0; SEQ_DIM];
    sinusoid(offset.clamp(-MAX_SEQ_OFFSET, MAX_SEQ_OFFSET) as f64, &mut out);
    out
}

pub fn timestep_embedding(t: usize) -> [f64; TIME_DIM] {
    let mut out = [0.0; TIME_DIM];
    for (m, pair) in out.chunks_exact_mut(2).enumerate() {
        let w = 0.25f64.powi(m as i32);
        pair[0] = (t as f64 * w).sin();
        pair[1] = (t as f64 * w).cos();
    }
    out
}

/// Gaussian radial basis with centres evenly spaced on `[0, RBF_MAX]`.
pub fn distance_rbf(d: f64) -> [f64; RBF_DIM] {
    let spacing = RBF_MAX / (RBF_DIM - 1) as f64;
    std::array::from_fn(|c| {
        let z = (d - c as f64 * spacing) / spacing;
        (-z * z).exp()
    })
}

/// Builds features from frames (Cα at each frame origin). Neighbours are the
/// `k` nearest residues by Cα distance, ties broken by residue index.
pub fn featurize(p: &FrameSet, seq: &str, t: usize, k: usize) -> Result<ResidueFeatures> {
    let n = p.len();
    if n < 2 || k == 0 || k > n - 1 {
        return Err(Error::TooShort {
            min: k.max(1) + 1,
            found: n,
        });
    }
    let aa: Vec<char> = seq.chars().collect();
    if aa.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: aa.len(),
        });
    }
    let temb = timestep_embedding(t);
    let mut node = vec![0.0; n * NODE_DIM];
    for (i, row) in node.chunks_exact_mut(NODE_DIM).enumerate() {
        row[aa_index(aa[i])] = 1.0;
        row[AA_DIM..].copy_from_slice(&temb);
    }

    let mut edge = vec![0.0; n * k * EDGE_DIM];
    let mut neighbors = Vec::with_capacity(n * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let fi = &p[i];
        order.clear();
        order.extend((0..n).filter(|&j| j != i).map(|j| ((p[j].trans - fi.trans).norm(), j)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (slot, &(d, j)) in order[..k].iter().enumerate() {
            neighbors.push(j);
            let start = (i * k + slot) * EDGE_DIM;
            let e = &mut edge[start..start + EDGE_DIM];
            let local = fi.to_local(&p[j].trans);
            e[..3].copy_from_slice(local.as_slice());
            let rel = fi.rot.matrix().tr_mul(p[j].rot.matrix());
            for r in 0..3 {
                for c in 0..3 {
                    e[3 + 3 * r + c] = rel[(r, c)];
                }
            }
            e[12..12 + SEQ_DIM].copy_from_slice(&seq_offset_embedding(j as i64 - i as i64));
            e[12 + SEQ_DIM..].copy_from_slice(&distance_rbf(d));
        }
    }
    Ok(ResidueFeatures {
        n_res: n,
        k,
        node,
        edge,
        neighbors,
    })
}
