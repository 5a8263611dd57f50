//! A small trainable refiner: invariant features, a per-residue network with
//! frame-transported outputs, a differentiable refinement loss, training and
//! evaluation.

pub mod features;
pub mod network;
pub mod train;

use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{so3_exp, so3_exp_jacobian, BackboneAtoms, FrameSet, Vec3};
use crate::losses::{bond_loss_grad, combine, fape_local_mse_grad, BondSpec, FapeOptions, LossBreakdown, LossWeights};
use crate::refinement::{apply_update, place_local, FrameUpdate, RefineContext, Refiner};

pub use features::{featurize, ResidueFeatures, DEFAULT_K};
pub use network::{forward, Layer, ToyRefinerParams};
pub use train::{
    evaluate, evaluate_with, log_to_tsv, train, EvalReport, LogRow, LOG_HEADER, OptimizerKind, ScheduleConfig, TrainConfig, TrainExample,
    TrainOutcome, ValidationSet,
};

/// Neighbour count actually used for a structure of `n_res` residues.
pub fn effective_k(k: usize, n_res: usize) -> usize {
    k.min(n_res.saturating_sub(1)).max(1)
}

/// The network used as a [`Refiner`]; features are recomputed from the
/// current frames on every call.
#[derive(Debug, Clone)]
pub struct ModelRefiner {
    pub params: ToyRefinerParams,
    pub k: usize,
}

impl Refiner for ModelRefiner {
    fn propose(&self, p: &FrameSet, ctx: &RefineContext<'_>) -> Result<FrameUpdate> {
        let feats = featurize(p, ctx.sequence, ctx.timestep, effective_k(self.k, p.len()))?;
        Ok(forward(&self.params, &feats, p))
    }
}

/// Translation-noise regression target for one corrupted example.
#[derive(Debug, Clone)]
pub struct ScoreTarget {
    pub noise: Vec<Vec3>,
    /// Centroid the forward process diffused about.
    pub center: Vec3,
    pub alpha_bar: f64,
    pub coord_scale: f64,
}

/// One supervised refinement problem.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: FrameSet,
    /// Each residue's atoms in its own frame; they move rigidly with it.
    pub local: Vec<[Vec3; 4]>,
    pub sequence: String,
    pub timestep: usize,
    pub truth_frames: FrameSet,
    pub truth_atoms: Vec<BackboneAtoms>,
    pub score: Option<ScoreTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub n_steps: usize,
    pub k: usize,
    pub weights: LossWeights,
    pub bond: BondSpec,
    pub fape: FapeOptions,
    /// Average the loss over every refinement iteration instead of the last only.
    pub intermediate_supervision: bool,
    pub frozen: Vec<Layer>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            n_steps: crate::refinement::DEFAULT_REFINE_STEPS,
            k: DEFAULT_K,
            weights: LossWeights::default(),
            bond: BondSpec::default(),
            fape: FapeOptions::default(),
            intermediate_supervision: false,
            frozen: Vec::new(),
        }
    }
}

/// Loss of one refinement state and its gradient with respect to the
/// state's rotation matrices and translations.
fn state_loss(
    frames: &FrameSet,
    ex: &Example,
    opts: &PipelineOptions,
    scale: f64,
    g_rot: &mut [Matrix3<f64>],
    g_trans: &mut [Vec3],
) -> Result<LossBreakdown> {
    let w = &opts.weights;
    let atoms = place_local(frames, &ex.local);
    let (mse, fg) = fape_local_mse_grad(frames, &atoms, &ex.truth_frames, &ex.truth_atoms, &opts.fape)?;
    let (bond, bg) = bond_loss_grad(&atoms, &opts.bond)?;
    let mut score = 0.0;
    if let (Some(st), true) = (&ex.score, w.w_score > 0.0) {
        let (sa, sb) = (st.alpha_bar.sqrt(), (1.0 - st.alpha_bar).sqrt());
        let n = frames.len() as f64;
        for (i, (f_in, f)) in ex.input.iter().zip(frames.iter()).enumerate() {
            let xt = (f_in.trans - st.center) / st.coord_scale;
            let x0 = (f.trans - st.center) / st.coord_scale;
            let resid = (xt - x0 * sa) / sb - st.noise[i];
            score += resid.norm_squared() / n;
            g_trans[i] += resid * (-2.0 * sa / (n * sb * st.coord_scale)) * (w.w_score * scale);
        }
    }
    for i in 0..frames.len() {
        g_rot[i] += fg.rot[i] * (w.w_mse * scale);
        g_trans[i] += fg.trans[i] * (w.w_mse * scale);
        for a in 0..4 {
            let ga = fg.atoms[i][a] * w.w_mse + bg[i][a] * w.w_bond;
            g_rot[i] += ga * ex.local[i][a].transpose() * scale;
            g_trans[i] += ga * scale;
        }
    }
    Ok(combine(mse, bond, score, w))
}

/// Runs `n_steps` of featurize → forward → apply_update and scores the
/// result. Features are treated as constants of each step (no gradient flows
/// through featurization); pass `frozen_features` to reuse those of an
/// earlier run, which makes the returned loss exactly the function whose
/// gradient is computed.
pub fn loss_and_grad(
    params: &ToyRefinerParams,
    ex: &Example,
    opts: &PipelineOptions,
    want_grad: bool,
    frozen_features: Option<&[ResidueFeatures]>,
) -> Result<(LossBreakdown, Option<Vec<f64>>, Vec<ResidueFeatures>)> {
    if opts.n_steps == 0 {
        return Err(Error::InvalidConfig("n_refine_steps must be at least 1".into()));
    }
    let n = ex.input.len();
    let k = effective_k(opts.k, n);
    let mut states = vec![ex.input.clone()];
    let mut feats_all = Vec::with_capacity(opts.n_steps);
    let mut steps = Vec::with_capacity(opts.n_steps);
    for s in 0..opts.n_steps {
        let feats = match frozen_features {
            Some(f) => f[s].clone(),
            None => featurize(&states[s], &ex.sequence, ex.timestep, k)?,
        };
        let (heads, caches) = network::forward_heads(params, &feats);
        let next = apply_update(&states[s], &network::heads_to_update(&heads, &states[s]))?;
        states.push(next);
        steps.push((heads, caches));
        feats_all.push(feats);
    }

    let n_scored = if opts.intermediate_supervision { opts.n_steps } else { 1 };
    let weight = 1.0 / n_scored as f64;
    let mut g_rot = vec![Matrix3::zeros(); n];
    let mut g_trans = vec![Vec3::zeros(); n];
    let mut per_step_grads = Vec::new();
    let mut sum = LossBreakdown::default();
    for s in opts.n_steps + 1 - n_scored..=opts.n_steps {
        let (mut gr, mut gt) = (vec![Matrix3::zeros(); n], vec![Vec3::zeros(); n]);
        let part = state_loss(&states[s], ex, opts, weight, &mut gr, &mut gt)?;
        sum.mse += part.mse * weight;
        sum.bond += part.bond * weight;
        sum.score += part.score * weight;
        sum.total += part.total * weight;
        per_step_grads.push((s, gr, gt));
    }
    if !want_grad {
        return Ok((sum, None, feats_all));
    }

    let mut grad = vec![0.0; params.len()];
    for s in (0..opts.n_steps).rev() {
        if let Some((_, gr, gt)) = per_step_grads.iter().find(|(idx, _, _)| *idx == s + 1) {
            for i in 0..n {
                g_rot[i] += gr[i];
                g_trans[i] += gt[i];
            }
        }
        let (heads, caches) = &steps[s];
        let prev = &states[s];
        let mut d_heads = Vec::with_capacity(n);
        for i in 0..n {
            let h = heads[i];
            let r = Vec3::new(h[0], h[1], h[2]);
            let tau = Vec3::new(h[3], h[4], h[5]);
            let o = prev[i].rot.matrix();
            let e = so3_exp(&r);
            let jac = so3_exp_jacobian(&r);
            let d_e = o.transpose() * g_rot[i];
            let d_tau = o.transpose() * g_trans[i];
            d_heads.push([
                d_e.component_mul(&jac[0]).sum(),
                d_e.component_mul(&jac[1]).sum(),
                d_e.component_mul(&jac[2]).sum(),
                d_tau.x,
                d_tau.y,
                d_tau.z,
            ]);
            // Carry the gradient to the previous state's frame.
            g_rot[i] = g_rot[i] * e.matrix().transpose() + g_trans[i] * tau.transpose();
        }
        network::backward_heads(params, &feats_all[s], caches, &d_heads, &mut grad, &opts.frozen);
    }
    Ok((sum, Some(grad), feats_all))
}

pub const CHECKPOINT_FORMAT: &str = "toy-refiner";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: flat parameter array plus a shape manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub k_neighbors: usize,
    pub shapes: Vec<network::TensorShape>,
    pub params: ToyRefinerParams,
}

impl Checkpoint {
    pub fn new(params: ToyRefinerParams, k_neighbors: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            k_neighbors,
            shapes: network::shape_manifest(),
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        if c.shapes != network::shape_manifest() {
            return Err(Error::InvalidConfig("checkpoint shapes do not match this network".into()));
        }
        let params = ToyRefinerParams::from_values(c.params.values().to_vec())?;
        Ok(Checkpoint { params, ..c })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn refiner(&self) -> ModelRefiner {
        ModelRefiner {
            params: self.params.clone(),
            k: self.k_neighbors,
        }
    }
}
