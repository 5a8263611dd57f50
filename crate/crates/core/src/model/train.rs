//! Training loop for the toy refiner and the before/after evaluation protocol.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::ToyRefinerParams;
use super::{loss_and_grad, Example, ModelRefiner, PipelineOptions, ScoreTarget};
use crate::diffusion::{centroid, make_schedule, Channel, ForwardProcess, ScheduleKind, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T_MAX};
use crate::error::{Error, Result};
use crate::losses::{fape_structures, BondSpec, FapeOptions, LossWeights};
use crate::metrics::{delta, lddt, mean_row, report, report_structures, ReportRow};
use crate::refinement::{local_atoms, refine_structure, IterateOptions, Refiner};
use crate::rng::{stream, substream, Stream};
use crate::structure::{BackboneStructure, DecoyPair};

/// Desk-scale limits on training data.
pub const MAX_TRAIN_RESIDUES: usize = 64;
pub const MAX_TRAIN_STRUCTURES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Linear,
            t_max: DEFAULT_T_MAX,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub bond: BondSpec,
    pub fape: FapeOptions,
    pub pos_schedule: ScheduleConfig,
    pub ori_schedule: ScheduleConfig,
    pub coord_scale: f64,
    pub n_refine_steps: usize,
    pub seed: u64,
    pub k_neighbors: usize,
    /// Train on uncorrupted inputs (T = 0) instead of sampling T.
    pub direct_psr: bool,
    /// Inclusive range T is sampled from; `None` means `[1, t_max]`.
    pub t_range: Option<(usize, usize)>,
    pub intermediate_supervision: bool,
    /// Global gradient-norm clip applied before the optimizer step.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            weights: LossWeights::default(),
            bond: BondSpec::default(),
            fape: FapeOptions::default(),
            pos_schedule: ScheduleConfig::default(),
            ori_schedule: ScheduleConfig::default(),
            coord_scale: 1.0,
            n_refine_steps: crate::refinement::DEFAULT_REFINE_STEPS,
            seed: 0,
            k_neighbors: super::DEFAULT_K,
            direct_psr: false,
            t_range: None,
            intermediate_supervision: false,
            grad_clip: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.n_refine_steps == 0 || self.k_neighbors == 0 {
            return bad("n_refine_steps and k_neighbors must be positive".into());
        }
        self.weights.validate()?;
        if let Some((lo, hi)) = self.t_range {
            if lo == 0 || lo > hi || hi > self.pos_schedule.t_max {
                return bad(format!("t_range ({lo}, {hi}) outside [1, {}]", self.pos_schedule.t_max));
            }
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn process(&self) -> Result<ForwardProcess> {
        let mk = |c: &ScheduleConfig, ch| make_schedule(c.kind, ch, c.t_max, c.beta_start, c.beta_end);
        ForwardProcess::new(mk(&self.pos_schedule, Channel::Pos)?, mk(&self.ori_schedule, Channel::Ori)?)?
            .with_coord_scale(self.coord_scale)
    }

    pub fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            n_steps: self.n_refine_steps,
            k: self.k_neighbors,
            weights: self.weights,
            bond: self.bond,
            fape: self.fape,
            intermediate_supervision: self.intermediate_supervision,
            frozen: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// A training target; when a decoy is present it is corrupted and
/// supervised against the reference, otherwise the reference itself is.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub reference: BackboneStructure,
    pub decoy: Option<BackboneStructure>,
}

impl TrainExample {
    pub fn reference_only(reference: BackboneStructure) -> Self {
        TrainExample {
            reference,
            decoy: None,
        }
    }
}

/// Held-out decoys refined after every epoch, at a fixed timestep label.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub pairs: Vec<DecoyPair>,
    pub timestep: usize,
}

/// One row per epoch; row 0 is the untrained model (training columns NaN).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub total: f64,
    pub mse: f64,
    pub bond: f64,
    pub score: f64,
    pub val_fape: f64,
    pub val_lddt: f64,
}

pub const LOG_HEADER: &str = "step\ttotal\tmse\tbond\tscore\tval_fape\tval_lddt";

pub fn log_to_tsv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}",
            r.step, r.total, r.mse, r.bond, r.score, r.val_fape, r.val_lddt
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ToyRefinerParams,
    pub log: Vec<LogRow>,
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Optimizer {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= self.lr * g),
            OptimizerKind::Adam => {
                self.t += 1;
                let (c1, c2) = (1.0 - Self::BETA1.powi(self.t), 1.0 - Self::BETA2.powi(self.t));
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

fn check_desk_scale(data: &[TrainExample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one structure".into()));
    }
    if data.len() > MAX_TRAIN_STRUCTURES {
        return Err(Error::InvalidConfig(format!(
            "{} training structures exceeds the limit of {MAX_TRAIN_STRUCTURES}",
            data.len()
        )));
    }
    for ex in data {
        let n = ex.reference.len();
        if n > MAX_TRAIN_RESIDUES {
            return Err(Error::InvalidConfig(format!(
                "{} has {n} residues; the limit is {MAX_TRAIN_RESIDUES}",
                ex.reference.source
            )));
        }
        if let Some(d) = &ex.decoy {
            DecoyPair::new(d.clone(), ex.reference.clone(), "train")?;
        }
    }
    Ok(())
}

/// Builds one corrupted training example.
fn make_example<R: Rng + ?Sized>(
    ex: &TrainExample,
    cfg: &TrainConfig,
    process: &ForwardProcess,
    rng: &mut R,
) -> Result<Example> {
    let base = ex.decoy.as_ref().unwrap_or(&ex.reference);
    let base_frames = base.frames()?;
    let local = local_atoms(&base_frames, &base.atoms());
    let t = if cfg.direct_psr {
        0
    } else {
        let (lo, hi) = cfg.t_range.unwrap_or((1, process.t_max()));
        rng.random_range(lo..=hi)
    };
    let (input, score) = if t == 0 {
        (base_frames, None)
    } else {
        let (frames, record) = process.corrupt(&base_frames, t, rng)?;
        let score = ScoreTarget {
            noise: record.trans_noise,
            center: centroid(&base_frames.translations()),
            alpha_bar: process.pos().alpha_bar(t),
            coord_scale: process.coord_scale(),
        };
        (frames, Some(score))
    };
    Ok(Example {
        input,
        local,
        sequence: ex.reference.sequence(),
        timestep: t,
        truth_frames: ex.reference.frames()?,
        truth_atoms: ex.reference.atoms(),
        score,
    })
}

fn validate_model(params: &ToyRefinerParams, cfg: &TrainConfig, val: &ValidationSet) -> Result<(f64, f64)> {
    let r = ModelRefiner {
        params: params.clone(),
        k: cfg.k_neighbors,
    };
    let (mut f, mut l) = (0.0, 0.0);
    for pair in &val.pairs {
        let (refined, _) = refine_structure(
            &r,
            &pair.decoy,
            val.timestep,
            cfg.n_refine_steps,
            &IterateOptions::default(),
            None,
        )?;
        f += fape_structures(&refined, &pair.reference, &FapeOptions::default())?;
        l += lddt(&refined, &pair.reference)?;
    }
    let n = val.pairs.len() as f64;
    Ok((f / n, l / n))
}

/// Trains from `init` (or a seeded initialization). Deterministic given the
/// config seed: every example draws from its own counter-indexed stream.
pub fn train(
    data: &[TrainExample],
    cfg: &TrainConfig,
    val: Option<&ValidationSet>,
    init: Option<ToyRefinerParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_desk_scale(data)?;
    let process = cfg.process()?;
    let opts = cfg.pipeline();
    let mut params = init.unwrap_or_else(|| ToyRefinerParams::init(&mut stream(cfg.seed, Stream::Init)));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = stream(cfg.seed, Stream::Custom(0x5348));

    let val_stats = |p: &ToyRefinerParams| -> Result<(f64, f64)> {
        match val {
            Some(v) if !v.pairs.is_empty() => validate_model(p, cfg, v),
            _ => Ok((f64::NAN, f64::NAN)),
        }
    };
    let (vf, vl) = val_stats(&params)?;
    let mut log = vec![LogRow {
        step: 0,
        total: f64::NAN,
        mse: f64::NAN,
        bond: f64::NAN,
        score: f64::NAN,
        val_fape: vf,
        val_lddt: vl,
    }];

    let mut step = 0usize;
    let mut draw = 0u64;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 4];
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.len()];
            let mut batch_total = 0.0;
            for &idx in batch {
                let mut rng = substream(cfg.seed, Stream::Train, draw);
                draw += 1;
                let ex = make_example(&data[idx], cfg, &process, &mut rng)?;
                let (loss, g, _) = loss_and_grad(&params, &ex, &opts, true, None)?;
                if !loss.total.is_finite() {
                    return Err(Error::DivergedTraining {
                        step,
                        loss: loss.total,
                    });
                }
                batch_total += loss.total;
                for (acc, gi) in grad.iter_mut().zip(g.expect("gradient requested")) {
                    *acc += gi / batch.len() as f64;
                }
                sums[0] += loss.total;
                sums[1] += loss.mse;
                sums[2] += loss.bond;
                sums[3] += loss.score;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergedTraining {
                    step,
                    loss: batch_total,
                });
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    grad.iter_mut().for_each(|g| *g *= clip / norm);
                }
            }
            opt.step(params.values_mut(), &grad);
            step += 1;
        }
        let n = data.len() as f64;
        let (vf, vl) = val_stats(&params)?;
        log.push(LogRow {
            step,
            total: sums[0] / n,
            mse: sums[1] / n,
            bond: sums[2] / n,
            score: sums[3] / n,
            val_fape: vf,
            val_lddt: vl,
        });
    }
    Ok(TrainOutcome { params, log })
}

/// Per-target starting metrics and refined-minus-starting deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub mean: ReportRow,
}

/// Refines every decoy with the refiner built for it and reports deltas.
pub fn evaluate_with<F>(pairs: &[DecoyPair], n_steps: usize, timestep: usize, make: F) -> Result<EvalReport>
where
    F: Fn(&DecoyPair) -> Result<Box<dyn Refiner>>,
{
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one pair".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let start = report(pair)?;
        let r = make(pair)?;
        let (refined, _) = refine_structure(
            r.as_ref(),
            &pair.decoy,
            timestep,
            n_steps,
            &IterateOptions::default(),
            None,
        )?;
        let end = report_structures(&refined, &pair.reference)?;
        rows.push(ReportRow {
            target_id: pair.target_id.clone(),
            start,
            delta: delta(&start, &end),
        });
    }
    let mean = mean_row(&rows).expect("non-empty");
    Ok(EvalReport { rows, mean })
}

pub fn evaluate(
    params: &ToyRefinerParams,
    k: usize,
    pairs: &[DecoyPair],
    n_steps: usize,
    timestep: usize,
) -> Result<EvalReport> {
    evaluate_with(pairs, n_steps, timestep, |_| {
        Ok(Box::new(ModelRefiner {
            params: params.clone(),
            k,
        }))
    })
}
