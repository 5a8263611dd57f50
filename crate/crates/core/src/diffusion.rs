//! Forward diffusion of residue frames.
//!
//! Translations follow the Gaussian DDPM kernel; orientations are drawn from
//! the isotropic Gaussian on SO(3) (IGSO(3)) around a mean shrunk toward the
//! identity by geodesic flow.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geodesic_flow, so3_exp, Frame, FrameSet, Rotation, Vec3};
use crate::rng::{standard_normal3, unit_vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::InvalidSchedule(format!("unknown kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Pos,
    Ori,
}

/// Variance schedule. Index `T` runs over `1..=t_max`; `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRecord", into = "ScheduleRecord")]
pub struct Schedule {
    kind: ScheduleKind,
    channel: Channel,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// On-disk form; arrays are stored in full so reloads are bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleRecord {
    kind: ScheduleKind,
    channel: Channel,
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const COSINE_BETA_MIN: f64 = 1e-5;
const COSINE_BETA_MAX: f64 = 0.999;

pub const DEFAULT_T_MAX: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.05;

fn running_product(beta: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    beta.iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

pub fn make_schedule(
    kind: ScheduleKind,
    channel: Channel,
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<Schedule> {
    if t_max == 0 {
        return Err(Error::InvalidSchedule("t_max must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear if t_max == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * PI / 2.0).cos().powi(2)
            };
            (1..=t_max)
                .map(|t| (1.0 - f(t) / f(t - 1)).clamp(COSINE_BETA_MIN, COSINE_BETA_MAX))
                .collect()
        }
    };
    let alpha_bar = running_product(&beta);
    Ok(Schedule {
        kind,
        channel,
        beta_start,
        beta_end,
        beta,
        alpha_bar,
    })
}

impl Schedule {
    pub fn default_for(channel: Channel) -> Self {
        make_schedule(
            ScheduleKind::Linear,
            channel,
            DEFAULT_T_MAX,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
        )
        .expect("default schedule is valid")
    }

    /// Explicit β table. Unlike [`make_schedule`], β = 0 is allowed here so
    /// degenerate noise-free steps can be expressed.
    pub fn from_betas(kind: ScheduleKind, channel: Channel, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidSchedule("empty beta table".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside [0, 1)")));
        }
        let alpha_bar = running_product(&beta);
        Ok(Schedule {
            kind,
            channel,
            beta_start: beta[0],
            beta_end: *beta.last().unwrap(),
            beta,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// β at step `t` (1-based); β(0) is defined as 0.
    pub fn beta(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.beta[t - 1]
        }
    }

    /// ᾱ at step `t` (1-based); ᾱ(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if (1..=self.t_max()).contains(&t) {
            Ok(())
        } else {
            Err(Error::InvalidTimestep {
                timestep: t,
                min: 1,
                max: self.t_max(),
            })
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl From<Schedule> for ScheduleRecord {
    fn from(s: Schedule) -> Self {
        ScheduleRecord {
            kind: s.kind,
            channel: s.channel,
            t_max: s.beta.len(),
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            beta: s.beta,
            alpha_bar: s.alpha_bar,
        }
    }
}

impl TryFrom<ScheduleRecord> for Schedule {
    type Error = Error;

    fn try_from(r: ScheduleRecord) -> Result<Self> {
        if r.beta.len() != r.t_max || r.alpha_bar.len() != r.t_max || r.t_max == 0 {
            return Err(Error::InvalidSchedule(
                "beta/alpha_bar lengths disagree with t_max".into(),
            ));
        }
        if r.beta.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::InvalidSchedule("beta outside [0, 1)".into()));
        }
        let mut prev = 1.0;
        for (b, ab) in r.beta.iter().zip(&r.alpha_bar) {
            if ((1.0 - b) * prev - ab).abs() > 1e-12 {
                return Err(Error::InvalidSchedule(
                    "alpha_bar does not match the running product of (1 - beta)".into(),
                ));
            }
            prev = *ab;
        }
        Ok(Schedule {
            kind: r.kind,
            channel: r.channel,
            beta_start: r.beta_start,
            beta_end: r.beta_end,
            beta: r.beta,
            alpha_bar: r.alpha_bar,
        })
    }
}

/// Closed-form marginal `√ᾱ·t⁰ + √(1−ᾱ)·ε` applied point-wise.
pub fn diffuse_translations(t0: &[Vec3], t: usize, s: &Schedule, noise: &[Vec3]) -> Result<Vec<Vec3>> {
    s.check_timestep(t)?;
    if noise.len() != t0.len() {
        return Err(Error::LengthMismatch {
            expected: t0.len(),
            found: noise.len(),
        });
    }
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(t0.iter().zip(noise).map(|(x, e)| x * a + e * b).collect())
}

/// Runs the one-step kernel `√(1−β)·t + √β·ε` for steps 1..=t.
pub fn diffuse_translations_stepwise<R: Rng + ?Sized>(
    t0: &[Vec3],
    t: usize,
    s: &Schedule,
    rng: &mut R,
) -> Result<Vec<Vec3>> {
    s.check_timestep(t)?;
    let mut x = t0.to_vec();
    for step in 1..=t {
        let b = s.beta(step);
        let (keep, sd) = ((1.0 - b).sqrt(), b.sqrt());
        for xi in &mut x {
            *xi = *xi * keep + standard_normal3(rng) * sd;
        }
    }
    Ok(x)
}

const IGSO3_REL_TOL: f64 = 1e-8;
const IGSO3_MAX_L: usize = 5000;
/// Below this variance the series needs more than the term cap; the
/// Poisson-resummed form is used instead.
pub const IGSO3_SMALL_EPS: f64 = 1e-5;
const HALF_ANGLE_FLOOR: f64 = 1e-7;

/// Character-weighted heat-kernel sum `Σ (2l+1) e^{−l(l+1)ε} χ_l(ω)` with
/// `χ_l(ω) = sin((l+½)ω) / sin(ω/2)`. Returns the value and the number of terms used.
pub fn igso3_series(omega: f64, eps: f64) -> (f64, usize) {
    let half = omega / 2.0;
    let use_limit = half.abs() < HALF_ANGLE_FLOOR;
    let sin_half = half.sin();
    let mut sum = 0.0;
    for l in 0..=IGSO3_MAX_L {
        let lf = l as f64;
        let weight = (2.0 * lf + 1.0) * (-lf * (lf + 1.0) * eps).exp();
        let chi = if use_limit {
            2.0 * lf + 1.0
        } else {
            ((lf + 0.5) * omega).sin() / sin_half
        };
        sum += weight * chi;
        // |χ_l| ≤ 2l+1 bounds every remaining term's size.
        if l > 0 && weight * (2.0 * lf + 1.0) < IGSO3_REL_TOL * sum.abs().max(1.0) {
            return (sum, l + 1);
        }
    }
    (sum, IGSO3_MAX_L + 1)
}

/// Poisson-resummed form of [`igso3_series`], accurate for small `eps`.
pub fn igso3_series_resummed(omega: f64, eps: f64) -> f64 {
    let sin_half = (omega / 2.0).sin();
    let pref = 0.5 * PI.sqrt() * eps.powf(-1.5) * (eps / 4.0).exp();
    if (omega / 2.0).abs() < HALF_ANGLE_FLOOR {
        // ω/sin(ω/2) → 2 for the k = 0 image; others vanish.
        return pref * 2.0;
    }
    let mut acc = 0.0;
    for k in -2i32..=2 {
        let x = omega + 2.0 * PI * k as f64;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * x * (-x * x / (4.0 * eps)).exp();
    }
    pref * acc / sin_half
}

/// Density of the rotation angle ω ∈ [0, π] under IGSO(3) with variance `eps`,
/// relative to Lebesgue measure on [0, π]. Integrates to 1.
pub fn igso3_density(omega: f64, eps: f64) -> f64 {
    let haar = (1.0 - omega.cos()) / PI;
    let series = if eps < IGSO3_SMALL_EPS {
        igso3_series_resummed(omega, eps)
    } else {
        igso3_series(omega, eps).0
    };
    (haar * series).max(0.0)
}

pub const IGSO3_TABLE_BINS: usize = 4096;

/// Tabulated angle CDF for inverse-transform sampling.
#[derive(Debug, Clone)]
pub struct IgSo3Table {
    eps: f64,
    cdf: Vec<f64>,
}

impl IgSo3Table {
    pub fn new(eps: f64) -> Self {
        assert!(eps > 0.0, "IGSO(3) variance must be positive");
        let n = IGSO3_TABLE_BINS;
        let h = PI / n as f64;
        let dens: Vec<f64> = (0..=n).map(|k| igso3_density(k as f64 * h, eps)).collect();
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        cdf.push(0.0);
        for k in 0..n {
            acc += 0.5 * (dens[k] + dens[k + 1]) * h;
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        IgSo3Table { eps, cdf }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn bin_width() -> f64 {
        PI / IGSO3_TABLE_BINS as f64
    }

    /// Piecewise-linear CDF through the table nodes.
    pub fn cdf(&self, omega: f64) -> f64 {
        let x = (omega / Self::bin_width()).clamp(0.0, IGSO3_TABLE_BINS as f64);
        let k = (x.floor() as usize).min(IGSO3_TABLE_BINS - 1);
        let frac = x - k as f64;
        self.cdf[k] + frac * (self.cdf[k + 1] - self.cdf[k])
    }

    /// Inverse of [`IgSo3Table::cdf`].
    pub fn quantile(&self, u: f64) -> f64 {
        let k = self.cdf.partition_point(|&c| c < u).clamp(1, IGSO3_TABLE_BINS);
        let (lo, hi) = (self.cdf[k - 1], self.cdf[k]);
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.0 };
        ((k - 1) as f64 + frac.clamp(0.0, 1.0)) * Self::bin_width()
    }

    /// Rotation `exp(ω·axis)` with ω from the table and a uniform axis.
    pub fn sample_perturbation<R: Rng + ?Sized>(&self, rng: &mut R) -> Rotation {
        let omega = self.quantile(rng.random::<f64>());
        let axis = unit_vector(rng);
        so3_exp(&(axis * omega))
    }

    pub fn sample<R: Rng + ?Sized>(&self, mean: &Rotation, rng: &mut R) -> Rotation {
        mean * &self.sample_perturbation(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IgSo3Params {
    pub eps: f64,
    pub mean: Rotation,
}

/// One draw `mean · exp(ω·axis)`. Builds a fresh table; reuse an
/// [`IgSo3Table`] when sampling repeatedly at one variance.
pub fn sample_igso3<R: Rng + ?Sized>(p: &IgSo3Params, rng: &mut R) -> Rotation {
    IgSo3Table::new(p.eps).sample(&p.mean, rng)
}

/// The exact noise used by one corruption, sufficient to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub timestep: usize,
    /// Standard-normal translation draws εⱼ, one per residue.
    pub trans_noise: Vec<Vec3>,
    /// Right-multiplied rotation perturbations, one per residue.
    pub rot_noise: Vec<Rotation>,
}

/// Forward process over both channels, with cached IGSO(3) tables per timestep.
#[derive(Debug, Clone)]
pub struct ForwardProcess {
    pos: Schedule,
    ori: Schedule,
    coord_scale: f64,
    tables: Vec<OnceLock<IgSo3Table>>,
}

impl ForwardProcess {
    pub fn new(pos: Schedule, ori: Schedule) -> Result<Self> {
        if pos.t_max() != ori.t_max() {
            return Err(Error::InvalidSchedule(format!(
                "position and orientation schedules differ in length ({} vs {})",
                pos.t_max(),
                ori.t_max()
            )));
        }
        let tables = (0..pos.t_max()).map(|_| OnceLock::new()).collect();
        Ok(ForwardProcess {
            pos,
            ori,
            coord_scale: 1.0,
            tables,
        })
    }

    /// Translation noise is applied in units of `scale` Å (1.0 = plain Å).
    pub fn with_coord_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("coord_scale must be positive, got {scale}")));
        }
        self.coord_scale = scale;
        Ok(self)
    }

    pub fn pos(&self) -> &Schedule {
        &self.pos
    }

    pub fn ori(&self) -> &Schedule {
        &self.ori
    }

    pub fn coord_scale(&self) -> f64 {
        self.coord_scale
    }

    pub fn t_max(&self) -> usize {
        self.pos.t_max()
    }

    /// IGSO(3) table for the orientation variance at step `t`, or `None`
    /// when that variance is zero.
    pub fn table(&self, t: usize) -> Option<&IgSo3Table> {
        let eps = 1.0 - self.ori.alpha_bar(t);
        (eps > 0.0).then(|| self.tables[t - 1].get_or_init(|| IgSo3Table::new(eps)))
    }

    /// Draws noise for `n_res` residues, sequentially in residue order.
    pub fn sample_noise<R: Rng + ?Sized>(&self, n_res: usize, t: usize, rng: &mut R) -> Result<NoiseRecord> {
        self.pos.check_timestep(t)?;
        let table = self.table(t);
        let mut trans_noise = Vec::with_capacity(n_res);
        let mut rot_noise = Vec::with_capacity(n_res);
        for _ in 0..n_res {
            trans_noise.push(standard_normal3(rng));
            rot_noise.push(match table {
                Some(tab) => tab.sample_perturbation(rng),
                None => Rotation::identity(),
            });
        }
        Ok(NoiseRecord {
            timestep: t,
            trans_noise,
            rot_noise,
        })
    }

    /// Deterministically applies recorded noise to clean frames.
    pub fn apply_noise(&self, p0: &FrameSet, noise: &NoiseRecord) -> Result<FrameSet> {
        let t = noise.timestep;
        self.pos.check_timestep(t)?;
        for len in [noise.trans_noise.len(), noise.rot_noise.len()] {
            if len != p0.len() {
                return Err(Error::LengthMismatch {
                    expected: p0.len(),
                    found: len,
                });
            }
        }
        let centroid = centroid(&p0.translations());
        let centered: Vec<Vec3> = p0.iter().map(|f| (f.trans - centroid) / self.coord_scale).collect();
        let moved = diffuse_translations(&centered, t, &self.pos, &noise.trans_noise)?;
        let shrink = self.ori.alpha_bar(t).sqrt();
        let frames = p0
            .iter()
            .zip(moved)
            .zip(&noise.rot_noise)
            .map(|((f, x), perturb)| {
                let mean = geodesic_flow(shrink, &f.rot);
                Frame::new(&mean * perturb, x * self.coord_scale + centroid)
            })
            .collect();
        FrameSet::new(frames)
    }

    pub fn corrupt<R: Rng + ?Sized>(&self, p0: &FrameSet, t: usize, rng: &mut R) -> Result<(FrameSet, NoiseRecord)> {
        let noise = self.sample_noise(p0.len(), t, rng)?;
        let out = self.apply_noise(p0, &noise)?;
        Ok((out, noise))
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// One-shot corruption with explicit schedules.
pub fn corrupt<R: Rng + ?Sized>(
    p0: &FrameSet,
    t: usize,
    s_pos: &Schedule,
    s_ori: &Schedule,
    rng: &mut R,
) -> Result<(FrameSet, NoiseRecord)> {
    ForwardProcess::new(s_pos.clone(), s_ori.clone())?.corrupt(p0, t, rng)
}
