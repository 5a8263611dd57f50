//! Per-residue MLP over mean-pooled neighbour features, with bounded
//! rotation-vector and local-translation heads and hand-written backprop.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::{ResidueFeatures, EDGE_DIM, NODE_DIM};
use crate::error::{Error, Result};
use crate::geometry::{so3_exp, FrameSet, Vec3};
use crate::refinement::FrameUpdate;

pub const EDGE_HIDDEN: usize = 32;
pub const HIDDEN: usize = 64;
pub const INPUT: usize = EDGE_HIDDEN + NODE_DIM;
pub const OUTPUT: usize = 6;
/// Per-component bound on the rotation vector, so its norm is at most π/2.
pub const ROT_BOUND: f64 = std::f64::consts::PI / (2.0 * 1.732_050_807_568_877_2);
/// Per-component bound on the local translation, so its norm is at most 10 Å.
pub const TRANS_BOUND: f64 = 10.0 / 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Edge,
    Hidden1,
    Hidden2,
    Output,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::Edge, Layer::Hidden1, Layer::Hidden2, Layer::Output];

    /// `(rows, cols)` of the weight matrix; the bias has `rows` entries.
    pub fn shape(self) -> (usize, usize) {
        match self {
            Layer::Edge => (EDGE_HIDDEN, EDGE_DIM),
            Layer::Hidden1 => (HIDDEN, INPUT),
            Layer::Hidden2 => (HIDDEN, HIDDEN),
            Layer::Output => (OUTPUT, HIDDEN),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Edge => "edge",
            Layer::Hidden1 => "hidden1",
            Layer::Hidden2 => "hidden2",
            Layer::Output => "output",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Weight and bias ranges of every layer in the flat buffer.
fn layout() -> [(std::ops::Range<usize>, std::ops::Range<usize>); 4] {
    let mut off = 0;
    Layer::ALL.map(|l| {
        let (r, c) = l.shape();
        let w = off..off + r * c;
        let b = w.end..w.end + r;
        off = b.end;
        (w, b)
    })
}

pub fn param_count() -> usize {
    layout()[3].1.end
}

/// Shape manifest entry for checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn shape_manifest() -> Vec<TensorShape> {
    Layer::ALL
        .iter()
        .flat_map(|l| {
            let (r, c) = l.shape();
            [
                TensorShape {
                    name: format!("{}.weight", l.name()),
                    shape: vec![r, c],
                },
                TensorShape {
                    name: format!("{}.bias", l.name()),
                    shape: vec![r],
                },
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToyRefinerParams {
    values: Vec<f64>,
}

impl ToyRefinerParams {
    pub fn zeros() -> Self {
        ToyRefinerParams {
            values: vec![0.0; param_count()],
        }
    }

    /// Hidden layers drawn from N(0, 1/fan_in); the output layer starts at
    /// zero so an untrained model proposes identity updates.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = Self::zeros();
        for (layer, (w, _)) in Layer::ALL.iter().zip(layout()) {
            if *layer == Layer::Output {
                continue;
            }
            let sd = (1.0 / layer.shape().1 as f64).sqrt();
            for x in &mut p.values[w] {
                *x = rng.sample::<f64, _>(StandardNormal) * sd;
            }
        }
        p
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != param_count() {
            return Err(Error::LengthMismatch {
                expected: param_count(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        Ok(ToyRefinerParams { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn weight(&self, l: Layer) -> &[f64] {
        &self.values[layout()[l.index()].0.clone()]
    }

    fn bias(&self, l: Layer) -> &[f64] {
        &self.values[layout()[l.index()].1.clone()]
    }
}

/// Flat index range of a layer's weights and bias.
pub fn layer_range(l: Layer) -> std::ops::Range<usize> {
    let (w, b) = &layout()[l.index()];
    w.start..b.end
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `out = W·x + b` with row-major `W`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = b[r] + w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// Accumulates `dW += d·xᵀ`, `db += d` and returns `Wᵀ·d` into `dx` if given.
fn affine_back(w: &[f64], x: &[f64], d: &[f64], gw: &mut [f64], gb: &mut [f64], dx: Option<&mut [f64]>) {
    let cols = x.len();
    for (r, &dr) in d.iter().enumerate() {
        if dr == 0.0 {
            continue;
        }
        gb[r] += dr;
        for (g, xc) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *g += dr * xc;
        }
    }
    if let Some(dx) = dx {
        dx.fill(0.0);
        for (r, &dr) in d.iter().enumerate() {
            for (o, wc) in dx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *o += dr * wc;
            }
        }
    }
}

/// Activations of one residue, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ResidueCache {
    edge_pre: Vec<f64>,
    x: [f64; INPUT],
    z1: [f64; HIDDEN],
    h1: [f64; HIDDEN],
    z2: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    out: [f64; OUTPUT],
}

/// Head outputs: rotation vector (rad) then local translation (Å).
pub type Heads = [f64; OUTPUT];

pub fn forward_heads(params: &ToyRefinerParams, feats: &ResidueFeatures) -> (Vec<Heads>, Vec<ResidueCache>) {
    let k = feats.k;
    let (we, be) = (params.weight(Layer::Edge), params.bias(Layer::Edge));
    let (w1, b1) = (params.weight(Layer::Hidden1), params.bias(Layer::Hidden1));
    let (w2, b2) = (params.weight(Layer::Hidden2), params.bias(Layer::Hidden2));
    let (w3, b3) = (params.weight(Layer::Output), params.bias(Layer::Output));
    let mut heads = Vec::with_capacity(feats.n_res);
    let mut caches = Vec::with_capacity(feats.n_res);
    for i in 0..feats.n_res {
        let mut edge_pre = vec![0.0; k * EDGE_HIDDEN];
        let mut x = [0.0; INPUT];
        for slot in 0..k {
            let pre = &mut edge_pre[slot * EDGE_HIDDEN..(slot + 1) * EDGE_HIDDEN];
            affine(we, be, feats.edge(i, slot), pre);
            for (m, a) in x[..EDGE_HIDDEN].iter_mut().zip(pre.iter()) {
                *m += silu(*a) / k as f64;
            }
        }
        x[EDGE_HIDDEN..].copy_from_slice(feats.node(i));
        let mut c = ResidueCache {
            edge_pre,
            x,
            z1: [0.0; HIDDEN],
            h1: [0.0; HIDDEN],
            z2: [0.0; HIDDEN],
            h2: [0.0; HIDDEN],
            out: [0.0; OUTPUT],
        };
        affine(w1, b1, &c.x, &mut c.z1);
        c.h1 = c.z1.map(silu);
        affine(w2, b2, &c.h1, &mut c.z2);
        c.h2 = c.z2.map(silu);
        affine(w3, b3, &c.h2, &mut c.out);
        heads.push(std::array::from_fn(|m| {
            let bound = if m < 3 { ROT_BOUND } else { TRANS_BOUND };
            bound * c.out[m].tanh()
        }));
        caches.push(c);
    }
    (heads, caches)
}

/// Turns head outputs into a frame update: `ΔO = exp(rotvec)`, `Δt = O·t_local`.
pub fn heads_to_update(heads: &[Heads], p: &FrameSet) -> FrameUpdate {
    FrameUpdate {
        delta_rot: heads.iter().map(|h| so3_exp(&Vec3::new(h[0], h[1], h[2]))).collect(),
        delta_trans: heads
            .iter()
            .zip(p.iter())
            .map(|(h, f)| f.rot.apply(&Vec3::new(h[3], h[4], h[5])))
            .collect(),
    }
}

pub fn forward(params: &ToyRefinerParams, feats: &ResidueFeatures, p: &FrameSet) -> FrameUpdate {
    heads_to_update(&forward_heads(params, feats).0, p)
}

/// Accumulates parameter gradients into `grad` given `∂L/∂heads`.
/// Layers listed in `frozen` receive exactly zero gradient.
pub fn backward_heads(
    params: &ToyRefinerParams,
    feats: &ResidueFeatures,
    caches: &[ResidueCache],
    d_heads: &[Heads],
    grad: &mut [f64],
    frozen: &[Layer],
) {
    let k = feats.k;
    let lay = layout();
    let (we, w1, w2, w3) = (
        params.weight(Layer::Edge),
        params.weight(Layer::Hidden1),
        params.weight(Layer::Hidden2),
        params.weight(Layer::Output),
    );
    // Split the gradient buffer into per-layer weight/bias slices.
    let (g_edge, rest) = grad.split_at_mut(lay[1].0.start);
    let (g_h1, rest) = rest.split_at_mut(lay[2].0.start - lay[1].0.start);
    let (g_h2, g_out) = rest.split_at_mut(lay[3].0.start - lay[2].0.start);
    let (gwe, gbe) = g_edge.split_at_mut(lay[0].0.len());
    let (gw1, gb1) = g_h1.split_at_mut(lay[1].0.len());
    let (gw2, gb2) = g_h2.split_at_mut(lay[2].0.len());
    let (gw3, gb3) = g_out.split_at_mut(lay[3].0.len());

    for i in 0..feats.n_res {
        let c = &caches[i];
        let d_out: [f64; OUTPUT] = std::array::from_fn(|m| {
            let bound = if m < 3 { ROT_BOUND } else { TRANS_BOUND };
            let th = c.out[m].tanh();
            d_heads[i][m] * bound * (1.0 - th * th)
        });
        if d_out.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut d_h2 = [0.0; HIDDEN];
        affine_back(w3, &c.h2, &d_out, gw3, gb3, Some(&mut d_h2));
        let d_z2: [f64; HIDDEN] = std::array::from_fn(|m| d_h2[m] * silu_grad(c.z2[m]));
        let mut d_h1 = [0.0; HIDDEN];
        affine_back(w2, &c.h1, &d_z2, gw2, gb2, Some(&mut d_h1));
        let d_z1: [f64; HIDDEN] = std::array::from_fn(|m| d_h1[m] * silu_grad(c.z1[m]));
        let mut d_x = [0.0; INPUT];
        affine_back(w1, &c.x, &d_z1, gw1, gb1, Some(&mut d_x));
        for slot in 0..k {
            let pre = &c.edge_pre[slot * EDGE_HIDDEN..(slot + 1) * EDGE_HIDDEN];
            let d_a: [f64; EDGE_HIDDEN] = std::array::from_fn(|m| d_x[m] / k as f64 * silu_grad(pre[m]));
            affine_back(we, feats.edge(i, slot), &d_a, gwe, gbe, None);
        }
    }
    for l in frozen {
        grad[layer_range(*l)].fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::features::featurize;
    use crate::rng::{stream, Stream};
    use crate::structure::{make_synthetic, SyntheticKind};

    #[test]
    fn parameter_budget() {
        assert!(param_count() <= 30_000);
        let total: usize = shape_manifest().iter().map(|t| t.shape.iter().product::<usize>()).sum();
        assert_eq!(total, param_count());
    }

    #[test]
    fn zero_params_give_identity_update() {
        let s = make_synthetic(SyntheticKind::Helix, 6, 1).unwrap();
        let p = s.frames().unwrap();
        let f = featurize(&p, &s.sequence(), 3, 4).unwrap();
        let u = forward(&ToyRefinerParams::zeros(), &f, &p);
        assert!(u.delta_trans.iter().all(|t| t.norm() == 0.0));
        assert!(u.delta_rot.iter().all(|r| *r.matrix() == nalgebra::Matrix3::identity()));
        // The default init also starts at the identity.
        let init = ToyRefinerParams::init(&mut stream(0, Stream::Init));
        assert!(forward(&init, &f, &p).delta_trans.iter().all(|t| t.norm() == 0.0));
    }

    #[test]
    fn heads_are_bounded() {
        let s = make_synthetic(SyntheticKind::Extended, 8, 2).unwrap();
        let p = s.frames().unwrap();
        let f = featurize(&p, &s.sequence(), 50, 7).unwrap();
        let mut params = ToyRefinerParams::init(&mut stream(2, Stream::Init));
        params.values_mut().iter_mut().for_each(|v| *v *= 50.0);
        let (heads, _) = forward_heads(&params, &f);
        for h in heads {
            assert!(Vec3::new(h[0], h[1], h[2]).norm() <= std::f64::consts::FRAC_PI_2 + 1e-12);
            assert!(Vec3::new(h[3], h[4], h[5]).norm() <= 10.0 + 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient_and_masking_zeroes_layers() {
        let s = make_synthetic(SyntheticKind::Helix, 5, 3).unwrap();
        let p = s.frames().unwrap();
        let f = featurize(&p, &s.sequence(), 10, 4).unwrap();
        let mut params = ToyRefinerParams::init(&mut stream(3, Stream::Init));
        params.values_mut()[layer_range(Layer::Output)]
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.01 * (i as f64).sin());
        let (_, caches) = forward_heads(&params, &f);
        let mut g = vec![0.0; param_count()];
        backward_heads(&params, &f, &caches, &vec![[0.0; OUTPUT]; 5], &mut g, &[]);
        assert!(g.iter().all(|&v| v == 0.0));
        let d = vec![[1.0, -0.5, 0.2, 0.3, 0.1, -1.0]; 5];
        backward_heads(&params, &f, &caches, &d, &mut g, &[Layer::Hidden1]);
        assert!(g[layer_range(Layer::Hidden1)].iter().all(|&v| v == 0.0));
        assert!(g[layer_range(Layer::Edge)].iter().any(|&v| v != 0.0));
    }
}
