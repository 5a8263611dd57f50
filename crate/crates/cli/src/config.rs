//! Sub-command arguments. Each struct doubles as the JSON run record echoed
//! into the output directory, so a run can be replayed with `bbrefine run`.

use std::path::PathBuf;

use backbone_refine::diffusion::{Channel, ScheduleKind};
use backbone_refine::model::ScheduleConfig;
use backbone_refine::structure::SyntheticKind;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindArg {
    Helix,
    Extended,
    /// Alternate helix and extended, starting with a helix.
    Mixed,
}

impl KindArg {
    pub fn for_index(self, i: usize) -> SyntheticKind {
        match self {
            KindArg::Helix => SyntheticKind::Helix,
            KindArg::Extended => SyntheticKind::Extended,
            KindArg::Mixed if i.is_multiple_of(2) => SyntheticKind::Helix,
            KindArg::Mixed => SyntheticKind::Extended,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKindArg {
    Linear,
    Cosine,
}

impl From<ScheduleKindArg> for ScheduleKind {
    fn from(k: ScheduleKindArg) -> Self {
        match k {
            ScheduleKindArg::Linear => ScheduleKind::Linear,
            ScheduleKindArg::Cosine => ScheduleKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelArg {
    Pos,
    Ori,
}

impl From<ChannelArg> for Channel {
    fn from(c: ChannelArg) -> Self {
        match c {
            ChannelArg::Pos => Channel::Pos,
            ChannelArg::Ori => Channel::Ori,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Tsv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenSyntheticArgs {
    #[arg(long, value_enum, default_value = "helix")]
    pub kind: KindArg,
    /// Residues per structure.
    #[arg(long, default_value_t = 24)]
    pub n_res: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Mark the last N entries as validation instead of training.
    #[arg(long, default_value_t = 0)]
    pub val_count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Forward-process settings. Field names match the training config, so a
/// training config file can be passed where a schedule config is expected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub pos_schedule: ScheduleConfig,
    pub ori_schedule: ScheduleConfig,
    pub coord_scale: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            pos_schedule: ScheduleConfig::default(),
            ori_schedule: ScheduleConfig::default(),
            coord_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CorruptArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, conflicts_with = "random_t", required_unless_present = "random_t")]
    pub timestep: Option<usize>,
    /// Draw each entry's timestep uniformly from the schedule.
    #[arg(long)]
    pub random_t: bool,
    #[arg(long)]
    pub schedule_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RefineArgs {
    #[arg(long, conflicts_with_all = ["oracle", "gradient"], required_unless_present_any = ["oracle", "gradient"])]
    pub checkpoint: Option<PathBuf>,
    /// Jump straight to the reference (harness check).
    #[arg(long, conflicts_with = "gradient")]
    pub oracle: bool,
    /// Descend FAPE against the reference with finite differences.
    #[arg(long)]
    pub gradient: bool,
    #[arg(long, default_value_t = 0.05)]
    pub grad_step: f64,
    #[arg(long, default_value_t = 3)]
    pub grad_inner: usize,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
    /// Diffusion timestep the model is told its input comes from.
    #[arg(long, default_value_t = 0)]
    pub timestep: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Manifest columns: starting model, optional refined model, reference.
    #[arg(long, value_delimiter = ',', default_value = "decoy,refined,reference")]
    pub pairs: Vec<String>,
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint path; the log and config echo are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Timestep validation decoys are refined at; defaults to mid-schedule.
    #[arg(long)]
    pub val_timestep: Option<usize>,
    /// Corrupt manifest decoys instead of references for training inputs.
    #[arg(long)]
    pub use_decoys: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ScheduleArgs {
    #[arg(long, value_enum, default_value = "linear")]
    pub kind: ScheduleKindArg,
    #[arg(long, value_enum, default_value = "pos")]
    pub channel: ChannelArg,
    #[arg(long, default_value_t = 100)]
    pub t_max: usize,
    #[arg(long, default_value_t = 1e-4, allow_negative_numbers = true)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    pub beta_end: f64,
    /// Write the schedule JSON here; otherwise print a TSV table.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

/// The record written to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    GenSynthetic(GenSyntheticArgs),
    Corrupt(CorruptArgs),
    Refine(RefineArgs),
    Eval(EvalArgs),
    Train(TrainArgs),
    Schedule(ScheduleArgs),
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes") + "\n"
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_roundtrips() {
        let runs = [
            RunConfig::Corrupt(CorruptArgs {
                manifest: "m.json".into(),
                timestep: Some(7),
                random_t: false,
                schedule_config: None,
                seed: u64::MAX,
                out_dir: "out".into(),
                force: true,
            }),
            RunConfig::Schedule(ScheduleArgs {
                kind: ScheduleKindArg::Cosine,
                channel: ChannelArg::Ori,
                t_max: 3,
                beta_start: 0.1 + 0.2,
                beta_end: 1e-300,
                dump: Some("s.json".into()),
                seed: 1,
                force: false,
            }),
        ];
        for r in runs {
            assert_eq!(RunConfig::from_json(&r.to_json()).unwrap(), r);
        }
    }
}
