//! Frame updates, refiners, the iterative refinement loop and the reverse
//! (ancestral) diffusion step.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{centroid, IgSo3Table, Schedule};
use crate::error::{Error, Result};
use crate::geometry::{
    atoms_from_frames, geodesic_flow, so3_exp, BackboneAtoms, Frame, FrameSet, IdealTemplate, Rotation, Vec3,
};
use crate::losses::{fape_local_mse, FapeOptions};
use crate::metrics::{gdt, lddt};
use crate::rng::standard_normal3;
use crate::structure::BackboneStructure;

/// Per-residue rigid update `(ΔO_i, Δt_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameUpdate {
    pub delta_rot: Vec<Rotation>,
    pub delta_trans: Vec<Vec3>,
}

impl FrameUpdate {
    pub fn identity(n: usize) -> Self {
        FrameUpdate {
            delta_rot: vec![Rotation::identity(); n],
            delta_trans: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.delta_trans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_trans.is_empty()
    }

    /// `(ΔO⁻¹, −Δt)`: undoes a right-composed update.
    pub fn inverse(&self) -> Self {
        FrameUpdate {
            delta_rot: self.delta_rot.iter().map(Rotation::inverse).collect(),
            delta_trans: self.delta_trans.iter().map(|t| -t).collect(),
        }
    }
}

/// Side on which the rotation delta is composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// `O ← O·ΔO`, a delta expressed in the residue's local frame.
    #[default]
    Right,
    /// `O ← ΔO·O`, a delta expressed in the global frame.
    Left,
}

pub fn apply_update(p: &FrameSet, u: &FrameUpdate) -> Result<FrameSet> {
    apply_update_with(p, u, Composition::Right)
}

pub fn apply_update_with(p: &FrameSet, u: &FrameUpdate, side: Composition) -> Result<FrameSet> {
    for len in [u.delta_rot.len(), u.delta_trans.len()] {
        if len != p.len() {
            return Err(Error::LengthMismatch {
                expected: p.len(),
                found: len,
            });
        }
    }
    let frames = p
        .iter()
        .zip(u.delta_rot.iter().zip(&u.delta_trans))
        .map(|(f, (dr, dt))| {
            let rot = match side {
                Composition::Right => &f.rot * dr,
                Composition::Left => dr * &f.rot,
            };
            Frame::new(rot, f.trans + dt)
        })
        .collect();
    FrameSet::new(frames)
}

/// What a refiner may look at besides the frames themselves.
#[derive(Debug, Clone, Copy)]
pub struct RefineContext<'a> {
    pub sequence: &'a str,
    /// Diffusion timestep of the input; 0 for an uncorrupted decoy.
    pub timestep: usize,
}

/// Proposes a per-residue update. Implementations must be equivariant:
/// for a global motion g, `propose(g·P)` rotates every Δt by g's rotation
/// and leaves every ΔO unchanged.
pub trait Refiner: Sync {
    fn propose(&self, p: &FrameSet, ctx: &RefineContext<'_>) -> Result<FrameUpdate>;
}

/// Always proposes the identity update.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn propose(&self, p: &FrameSet, _: &RefineContext<'_>) -> Result<FrameUpdate> {
        Ok(FrameUpdate::identity(p.len()))
    }
}

/// The update that maps `p` exactly onto `truth` in one application.
pub fn oracle_refiner(p: &FrameSet, truth: &FrameSet) -> Result<FrameUpdate> {
    if p.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            found: p.len(),
        });
    }
    Ok(FrameUpdate {
        delta_rot: p.iter().zip(truth).map(|(a, b)| a.rot.inverse() * b.rot).collect(),
        delta_trans: p.iter().zip(truth).map(|(a, b)| b.trans - a.trans).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct OracleRefiner {
    pub truth: FrameSet,
}

impl Refiner for OracleRefiner {
    fn propose(&self, p: &FrameSet, _: &RefineContext<'_>) -> Result<FrameUpdate> {
        oracle_refiner(p, &self.truth)
    }
}

const FD_STEP: f64 = 1e-4;

/// Local-frame error of frames (atoms placed from the template) against a target.
fn frame_fape(frames: &FrameSet, tpl: &IdealTemplate, truth: &FrameSet, truth_atoms: &[BackboneAtoms]) -> f64 {
    let atoms = atoms_from_frames(frames, tpl);
    fape_local_mse(frames, &atoms, truth, truth_atoms, &FapeOptions::default()).expect("lengths checked")
}

/// Steepest descent on the local-frame error over each residue's translation
/// and right-tangent rotation, with central finite-difference gradients of
/// `N·FAPE`. Rotation components are divided by the frame's mean squared
/// distance to all atoms so both move on an Å scale. A step that does not
/// lower the loss is rejected and the step size halved. Returns the net update
/// after `n_inner` steps starting at size `step`.
pub fn gradient_refiner(p: &FrameSet, truth: &FrameSet, step: f64, n_inner: usize) -> Result<FrameUpdate> {
    let tpl = IdealTemplate::default();
    gradient_descent(p, truth, &atoms_from_frames(truth, &tpl), &tpl, step, n_inner).map(|(u, _)| u)
}

/// As [`gradient_refiner`], also returning the loss before each step and after the last.
pub fn gradient_descent(
    p: &FrameSet,
    truth: &FrameSet,
    truth_atoms: &[BackboneAtoms],
    tpl: &IdealTemplate,
    step: f64,
    n_inner: usize,
) -> Result<(FrameUpdate, Vec<f64>)> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidConfig(format!("gradient step must be positive, got {step}")));
    }
    for len in [p.len(), truth_atoms.len()] {
        if len != truth.len() {
            return Err(Error::LengthMismatch {
                expected: truth.len(),
                found: len,
            });
        }
    }
    let n = p.len();
    let scale = n as f64 / (2.0 * FD_STEP);
    let mut cur = p.clone();
    let mut loss = frame_fape(&cur, tpl, truth, truth_atoms);
    let mut trace = vec![loss];
    let mut step = step;
    for _ in 0..n_inner {
        let atoms = atoms_from_frames(&cur, tpl);
        let mut grads = Vec::with_capacity(n);
        for i in 0..n {
            let mut g = [0.0; 6];
            for (k, gk) in g.iter_mut().enumerate() {
                let eval = |s: f64| {
                    let mut f = cur.clone();
                    let fr = &mut f.frames_mut()[i];
                    if k < 3 {
                        fr.trans[k] += s;
                    } else {
                        let mut e = Vec3::zeros();
                        e[k - 3] = s;
                        fr.rot = fr.rot * so3_exp(&e);
                    }
                    frame_fape(&f, tpl, truth, truth_atoms)
                };
                *gk = (eval(FD_STEP) - eval(-FD_STEP)) * scale;
            }
            let t = cur[i].trans;
            let inertia = atoms.iter().flat_map(|a| a.0.iter()).map(|x| (x - t).norm_squared()).sum::<f64>()
                / (4 * n) as f64;
            g[3..].iter_mut().for_each(|x| *x /= inertia.max(1.0));
            grads.push(g);
        }
        let mut trial = cur.clone();
        for (f, g) in trial.frames_mut().iter_mut().zip(&grads) {
            f.trans -= Vec3::new(g[0], g[1], g[2]) * step;
            f.rot = f.rot * so3_exp(&(Vec3::new(g[3], g[4], g[5]) * -step));
        }
        let trial_loss = frame_fape(&trial, tpl, truth, truth_atoms);
        if trial_loss < loss {
            cur = trial;
            loss = trial_loss;
        } else {
            step *= 0.5;
        }
        trace.push(loss);
    }
    Ok((oracle_refiner(p, &cur)?, trace))
}

#[derive(Debug, Clone)]
pub struct GradientRefiner {
    pub truth: FrameSet,
    pub truth_atoms: Vec<BackboneAtoms>,
    pub template: IdealTemplate,
    pub step: f64,
    pub n_inner: usize,
}

impl GradientRefiner {
    pub fn new(truth: &BackboneStructure, step: f64, n_inner: usize) -> Result<Self> {
        Ok(GradientRefiner {
            truth: truth.frames()?,
            truth_atoms: truth.atoms(),
            template: IdealTemplate::default(),
            step,
            n_inner,
        })
    }
}

impl Refiner for GradientRefiner {
    fn propose(&self, p: &FrameSet, _: &RefineContext<'_>) -> Result<FrameUpdate> {
        gradient_descent(p, &self.truth, &self.truth_atoms, &self.template, self.step, self.n_inner).map(|(u, _)| u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterateOptions {
    pub composition: Composition,
    /// Re-orthonormalize all rotations after every this many steps (0 = never).
    pub reorthonormalize_every: usize,
}

impl Default for IterateOptions {
    fn default() -> Self {
        IterateOptions {
            composition: Composition::Right,
            reorthonormalize_every: 64,
        }
    }
}

pub const DEFAULT_REFINE_STEPS: usize = 4;

/// Diagnostics after a refinement step (step 0 is the input).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub fape: f64,
    pub lddt: f64,
    pub gdt_ts: f64,
}

/// Atom coordinates expressed in their residue's frame.
pub fn local_atoms(frames: &FrameSet, atoms: &[BackboneAtoms]) -> Vec<[Vec3; 4]> {
    frames
        .iter()
        .zip(atoms)
        .map(|(f, a)| a.0.map(|x| f.to_local(&x)))
        .collect()
}

/// Places per-residue local atoms into frames.
pub fn place_local(frames: &FrameSet, local: &[[Vec3; 4]]) -> Vec<BackboneAtoms> {
    frames
        .iter()
        .zip(local)
        .map(|(f, l)| BackboneAtoms(l.map(|x| f.apply(&x))))
        .collect()
}

fn trace_row(
    step: usize,
    frames: &FrameSet,
    local: &[[Vec3; 4]],
    reference: &BackboneStructure,
    ref_frames: &FrameSet,
) -> Result<TraceRow> {
    let model = reference.with_atoms(place_local(frames, local))?;
    let gdt_ts = if reference.len() >= 4 { gdt(&model, reference)?.ts } else { f64::NAN };
    Ok(TraceRow {
        step,
        fape: fape_local_mse(frames, &model.atoms(), ref_frames, &reference.atoms(), &FapeOptions::default())?,
        lddt: lddt(&model, reference)?,
        gdt_ts,
    })
}

fn iterate_with<R: Refiner + ?Sized>(
    r: &R,
    p: &FrameSet,
    ctx: &RefineContext<'_>,
    n_steps: usize,
    opts: &IterateOptions,
    mut observe: impl FnMut(usize, &FrameSet) -> Result<()>,
) -> Result<FrameSet> {
    if n_steps == 0 {
        return Err(Error::InvalidConfig("n_steps must be at least 1".into()));
    }
    let mut cur = p.clone();
    observe(0, &cur)?;
    for step in 1..=n_steps {
        let u = r.propose(&cur, ctx)?;
        cur = apply_update_with(&cur, &u, opts.composition)?;
        if opts.reorthonormalize_every > 0 && step % opts.reorthonormalize_every == 0 {
            cur = cur.orthonormalized();
        }
        observe(step, &cur)?;
    }
    Ok(cur)
}

/// Applies `propose` then `apply_update` `n_steps` times. When a reference is
/// given, atoms are placed from the ideal template and the trace holds one
/// row for the input and one per step.
pub fn iterate_refine<R: Refiner + ?Sized>(
    r: &R,
    p: &FrameSet,
    ctx: &RefineContext<'_>,
    n_steps: usize,
    opts: &IterateOptions,
    reference: Option<&BackboneStructure>,
) -> Result<(FrameSet, Vec<TraceRow>)> {
    let mut trace = Vec::new();
    let tpl = IdealTemplate::default().atoms();
    let local = vec![tpl; p.len()];
    let ref_frames = reference.map(|r| r.frames()).transpose()?;
    let out = iterate_with(r, p, ctx, n_steps, opts, |step, cur| {
        if let (Some(reference), Some(rf)) = (reference, &ref_frames) {
            trace.push(trace_row(step, cur, &local, reference, rf)?);
        }
        Ok(())
    })?;
    Ok((out, trace))
}

/// Refines a structure, moving each residue's own atoms rigidly with its frame.
pub fn refine_structure<R: Refiner + ?Sized>(
    r: &R,
    decoy: &BackboneStructure,
    timestep: usize,
    n_steps: usize,
    opts: &IterateOptions,
    reference: Option<&BackboneStructure>,
) -> Result<(BackboneStructure, Vec<TraceRow>)> {
    let frames = decoy.frames()?;
    let local = local_atoms(&frames, &decoy.atoms());
    let seq = decoy.sequence();
    let ctx = RefineContext {
        sequence: &seq,
        timestep,
    };
    let ref_frames = reference.map(|r| r.frames()).transpose()?;
    let mut trace = Vec::new();
    let out = iterate_with(r, &frames, &ctx, n_steps, opts, |step, cur| {
        if let (Some(reference), Some(rf)) = (reference, &ref_frames) {
            trace.push(trace_row(step, cur, &local, reference, rf)?);
        }
        Ok(())
    })?;
    Ok((decoy.with_atoms(place_local(&out, &local))?, trace))
}

pub const TRACE_HEADER: &str = "step\tfape\tlddt\tgdt_ts";

pub fn trace_to_tsv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows {
        writeln!(out, "{}\t{:.6}\t{:.4}\t{:.4}", r.step, r.fape, r.lddt, r.gdt_ts).unwrap();
    }
    out
}

/// One reverse diffusion step from timestep `t` to `t − 1`.
///
/// The refiner's output applied to `p_t` is the denoised estimate P̂⁰.
/// Translations (centered on P̂⁰'s centroid, in units of `coord_scale`) move
/// to the DDPM posterior mean, plus `√β(t−1)` Gaussian noise. Orientations
/// follow the geodesic from O_t toward Ô⁰ by the fraction that carries
/// `√ᾱ_t` to `√ᾱ_{t−1}`, then receive an IGSO(3) draw of variance `β(t−1)`.
/// At `t = 1` no noise is added.
#[allow(clippy::too_many_arguments)]
pub fn ancestral_step<R: Refiner + ?Sized, G: Rng + ?Sized>(
    r: &R,
    p_t: &FrameSet,
    t: usize,
    s_pos: &Schedule,
    s_ori: &Schedule,
    coord_scale: f64,
    ctx: &RefineContext<'_>,
    rng: &mut G,
) -> Result<FrameSet> {
    let table = (t >= 2 && s_ori.beta(t - 1) > 0.0).then(|| IgSo3Table::new(s_ori.beta(t - 1)));
    reverse_step(r, p_t, t, s_pos, s_ori, coord_scale, ctx, table.as_ref(), rng)
}

/// The noise-free part of [`ancestral_step`]: posterior mean translations
/// and geodesically interpolated orientations.
#[allow(clippy::too_many_arguments)]
pub fn ancestral_mean<R: Refiner + ?Sized>(
    r: &R,
    p_t: &FrameSet,
    t: usize,
    s_pos: &Schedule,
    s_ori: &Schedule,
    coord_scale: f64,
    ctx: &RefineContext<'_>,
) -> Result<FrameSet> {
    s_pos.check_timestep(t)?;
    s_ori.check_timestep(t)?;
    let ctx = RefineContext { timestep: t, ..*ctx };
    let p0 = apply_update(p_t, &r.propose(p_t, &ctx)?)?;

    let (ab_t, ab_prev, beta_t) = (s_pos.alpha_bar(t), s_pos.alpha_bar(t - 1), s_pos.beta(t));
    let (c0, ct) = if ab_t < 1.0 {
        (
            ab_prev.sqrt() * beta_t / (1.0 - ab_t),
            (1.0 - beta_t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t),
        )
    } else {
        (1.0, 0.0)
    };
    let (a_t, a_prev) = (s_ori.alpha_bar(t).sqrt(), s_ori.alpha_bar(t - 1).sqrt());
    let w = if a_t < 1.0 { (a_prev - a_t) / (1.0 - a_t) } else { 1.0 };

    let center = centroid(&p0.translations());
    let frames = p_t
        .iter()
        .zip(p0.iter())
        .map(|(ft, f0)| {
            let x0 = (f0.trans - center) / coord_scale;
            let xt = (ft.trans - center) / coord_scale;
            let rot = ft.rot * geodesic_flow(w, &(ft.rot.inverse() * f0.rot));
            Frame::new(rot, (x0 * c0 + xt * ct) * coord_scale + center)
        })
        .collect();
    FrameSet::new(frames)
}

#[allow(clippy::too_many_arguments)]
fn reverse_step<R: Refiner + ?Sized, G: Rng + ?Sized>(
    r: &R,
    p_t: &FrameSet,
    t: usize,
    s_pos: &Schedule,
    s_ori: &Schedule,
    coord_scale: f64,
    ctx: &RefineContext<'_>,
    table: Option<&IgSo3Table>,
    rng: &mut G,
) -> Result<FrameSet> {
    let mut out = ancestral_mean(r, p_t, t, s_pos, s_ori, coord_scale, ctx)?;
    let sd = s_pos.beta(t - 1).sqrt() * coord_scale;
    for f in out.frames_mut() {
        if sd > 0.0 {
            f.trans += standard_normal3(rng) * sd;
        }
        if let Some(tab) = table {
            f.rot = f.rot * tab.sample_perturbation(rng);
        }
    }
    Ok(out)
}

/// Runs reverse steps from `t_start` down to 1, reusing one IGSO(3) table per step.
#[allow(clippy::too_many_arguments)]
pub fn ancestral_chain<R: Refiner + ?Sized, G: Rng + ?Sized>(
    r: &R,
    p: &FrameSet,
    t_start: usize,
    s_pos: &Schedule,
    s_ori: &Schedule,
    coord_scale: f64,
    ctx: &RefineContext<'_>,
    tables: &mut Vec<Option<IgSo3Table>>,
    rng: &mut G,
) -> Result<FrameSet> {
    s_pos.check_timestep(t_start)?;
    if tables.len() < t_start + 1 {
        tables.resize_with(t_start + 1, || None);
    }
    let mut cur = p.clone();
    for t in (1..=t_start).rev() {
        if t >= 2 && tables[t].is_none() && s_ori.beta(t - 1) > 0.0 {
            tables[t] = Some(IgSo3Table::new(s_ori.beta(t - 1)));
        }
        let table = if t >= 2 { tables[t].as_ref() } else { None };
        cur = reverse_step(r, &cur, t, s_pos, s_ori, coord_scale, ctx, table, rng)?;
    }
    Ok(cur)
}
