//! Training objectives: local-frame point error, peptide-bond hinge loss,
//! noise-prediction loss, and their weighted sum.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseRecord;
use crate::error::{Error, Result};
use crate::geometry::{BackboneAtoms, FrameSet, Vec3};
use crate::structure::BackboneStructure;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BondSpec {
    /// Ideal C(i)–N(i+1) length, Å.
    pub l_lit: f64,
    /// Tolerance, Å.
    pub r: f64,
}

impl Default for BondSpec {
    fn default() -> Self {
        BondSpec { l_lit: 1.329, r: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_bond: f64,
    pub w_score: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_mse: 1.0,
            w_bond: 0.1,
            w_score: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_mse, self.w_bond, self.w_score];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().all(|x| *x == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be non-negative with at least one positive, got {w:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub bond: f64,
    pub score: f64,
    pub total: f64,
}

pub fn combine(mse: f64, bond: f64, score: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        mse,
        bond,
        score,
        total: w.w_mse * mse + w.w_bond * bond + w.w_score * score,
    }
}

/// Which (frame, atom) pairs enter the local-frame error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSet {
    /// Every frame against every backbone atom of every residue.
    #[default]
    AllResidues,
    /// Each frame only against its own residue's atoms.
    OwnResidue,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FapeOptions {
    pub clamp: Option<f64>,
    pub pairs: PairSet,
}

impl FapeOptions {
    pub const CLAMP_DEFAULT: f64 = 10.0;
}

/// Gradient of the local-frame error with respect to the predicted frames
/// (rotation matrix entries and translations) and predicted atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct FapeGrad {
    pub rot: Vec<Matrix3<f64>>,
    pub trans: Vec<Vec3>,
    pub atoms: Vec<[Vec3; 4]>,
}

impl FapeGrad {
    fn zeros(n: usize) -> Self {
        FapeGrad {
            rot: vec![Matrix3::zeros(); n],
            trans: vec![Vec3::zeros(); n],
            atoms: vec![[Vec3::zeros(); 4]; n],
        }
    }
}

fn check_lengths(expected: usize, lens: &[usize]) -> Result<()> {
    match lens.iter().find(|&&l| l != expected) {
        Some(&found) => Err(Error::LengthMismatch { expected, found }),
        None => Ok(()),
    }
}

fn fape_impl(
    pred_frames: &FrameSet,
    pred_atoms: &[BackboneAtoms],
    true_frames: &FrameSet,
    true_atoms: &[BackboneAtoms],
    opts: &FapeOptions,
    mut grad: Option<&mut FapeGrad>,
) -> Result<f64> {
    let n = true_frames.len();
    check_lengths(n, &[pred_frames.len(), pred_atoms.len(), true_atoms.len()])?;
    let count = match opts.pairs {
        PairSet::AllResidues => n * n * 4,
        PairSet::OwnResidue => n * 4,
    } as f64;

    let mut total = 0.0;
    for i in 0..n {
        let (fp, ft) = (&pred_frames[i], &true_frames[i]);
        let atom_range = match opts.pairs {
            PairSet::AllResidues => 0..n,
            PairSet::OwnResidue => i..i + 1,
        };
        for j in atom_range {
            for a in 0..4 {
                let u = pred_atoms[j].0[a] - fp.trans;
                let diff = fp.rot.matrix().tr_mul(&u) - ft.to_local(&true_atoms[j].0[a]);
                let d = diff.norm();
                let clamped = opts.clamp.is_some_and(|c| d > c);
                total += opts.clamp.map_or(d, |c| d.min(c));
                if let Some(g) = grad.as_deref_mut() {
                    if clamped || d == 0.0 {
                        continue;
                    }
                    let gy = diff / (d * count);
                    let gx = fp.rot.apply(&gy);
                    g.atoms[j][a] += gx;
                    g.trans[i] -= gx;
                    g.rot[i] += u * gy.transpose();
                }
            }
        }
    }
    Ok(total / count)
}

/// Mean over (frame i, atom j) pairs of `‖T_i⁻¹ x_j − T_i^{true,−1} x_j^{true}‖`.
pub fn fape_local_mse(
    pred_frames: &FrameSet,
    pred_atoms: &[BackboneAtoms],
    true_frames: &FrameSet,
    true_atoms: &[BackboneAtoms],
    opts: &FapeOptions,
) -> Result<f64> {
    fape_impl(pred_frames, pred_atoms, true_frames, true_atoms, opts, None)
}

pub fn fape_local_mse_grad(
    pred_frames: &FrameSet,
    pred_atoms: &[BackboneAtoms],
    true_frames: &FrameSet,
    true_atoms: &[BackboneAtoms],
    opts: &FapeOptions,
) -> Result<(f64, FapeGrad)> {
    let mut g = FapeGrad::zeros(true_frames.len());
    let v = fape_impl(pred_frames, pred_atoms, true_frames, true_atoms, opts, Some(&mut g))?;
    Ok((v, g))
}

/// Local-frame error between two structures, frames derived from N/Cα/C.
pub fn fape_structures(pred: &BackboneStructure, truth: &BackboneStructure, opts: &FapeOptions) -> Result<f64> {
    fape_local_mse(
        &pred.frames()?,
        &pred.atoms(),
        &truth.frames()?,
        &truth.atoms(),
        opts,
    )
}

fn bond_impl(atoms: &[BackboneAtoms], spec: &BondSpec, mut grad: Option<&mut Vec<[Vec3; 4]>>) -> Result<f64> {
    if atoms.len() < 2 {
        return Err(Error::TooShort {
            min: 2,
            found: atoms.len(),
        });
    }
    let n_bonds = (atoms.len() - 1) as f64;
    let mut total = 0.0;
    for (i, pair) in atoms.windows(2).enumerate() {
        let v = pair[0].c() - pair[1].n();
        let len = v.norm();
        let excess = (len - spec.l_lit).abs() - spec.r;
        if excess > 0.0 {
            total += excess;
            if let Some(g) = grad.as_deref_mut() {
                let dir = v / len * (len - spec.l_lit).signum() / n_bonds;
                g[i][2] += dir;
                g[i + 1][0] -= dir;
            }
        }
    }
    Ok(total / n_bonds)
}

/// Mean hinge `max(|l − l_lit| − r, 0)` over consecutive C(i)–N(i+1) bonds.
pub fn bond_loss(atoms: &[BackboneAtoms], spec: &BondSpec) -> Result<f64> {
    bond_impl(atoms, spec, None)
}

pub fn bond_loss_grad(atoms: &[BackboneAtoms], spec: &BondSpec) -> Result<(f64, Vec<[Vec3; 4]>)> {
    let mut g = vec![[Vec3::zeros(); 4]; atoms.len()];
    let v = bond_impl(atoms, spec, Some(&mut g))?;
    Ok((v, g))
}

/// `(1/N) Σ_j ‖ε_j − ε̂_j‖²` over the translation channel.
pub fn score_matching_loss(predicted_noise: &[Vec3], record: &NoiseRecord) -> Result<f64> {
    check_lengths(record.trans_noise.len(), &[predicted_noise.len()])?;
    let n = predicted_noise.len() as f64;
    Ok(predicted_noise
        .iter()
        .zip(&record.trans_noise)
        .map(|(p, e)| (e - p).norm_squared())
        .sum::<f64>()
        / n)
}

/// Gradient of [`score_matching_loss`] with respect to the predictions.
pub fn score_matching_grad(predicted_noise: &[Vec3], record: &NoiseRecord) -> Result<Vec<Vec3>> {
    check_lengths(record.trans_noise.len(), &[predicted_noise.len()])?;
    let n = predicted_noise.len() as f64;
    Ok(predicted_noise
        .iter()
        .zip(&record.trans_noise)
        .map(|(p, e)| (p - e) * (2.0 / n))
        .collect())
}
