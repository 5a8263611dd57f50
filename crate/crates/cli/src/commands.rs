use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use backbone_refine::diffusion::{make_schedule, Channel, ForwardProcess};
use backbone_refine::geometry::FrameSet;
use backbone_refine::losses::{fape_structures, FapeOptions};
use backbone_refine::metrics::{delta, report_structures, rows_to_json, rows_to_tsv, ReportRow};
use backbone_refine::model::{
    log_to_tsv, train, Checkpoint, TrainConfig, TrainExample, ValidationSet,
};
use backbone_refine::refinement::{
    local_atoms, place_local, refine_structure, trace_to_tsv, GradientRefiner, IterateOptions, OracleRefiner,
    Refiner,
};
use backbone_refine::rng::{substream, Stream};
use backbone_refine::structure::{
    load_manifest, make_synthetic, read_pdb, write_pdb, BackboneStructure, DecoyPair, Manifest, ManifestEntry, Split,
};
use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::config::*;

/// Failures that originate in the CLI layer rather than the library.
#[derive(Debug)]
pub enum CliError {
    /// Output already exists and `--force` was not given.
    Exists(PathBuf),
    Usage(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Exists(p) => write!(f, "{} already exists (pass --force to overwrite)", p.display()),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg {
        RunConfig::GenSynthetic(a) => gen_synthetic(a, cfg),
        RunConfig::Corrupt(a) => corrupt(a, cfg),
        RunConfig::Refine(a) => refine(a, cfg),
        RunConfig::Eval(a) => eval(a),
        RunConfig::Train(a) => train_cmd(a, cfg),
        RunConfig::Schedule(a) => schedule(a),
    }
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force && fs::read_dir(dir)?.next().is_some() {
        bail!(CliError::Exists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(CliError::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn echo_run(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write(&dir.join("run.json"), &cfg.to_json())
}

fn load_structure(path: &Path) -> Result<BackboneStructure> {
    let parsed = read_pdb(path)?;
    if parsed.dropped_residues > 0 {
        eprintln!(
            "warning\t{}\tdropped {} incomplete residue(s)",
            path.display(),
            parsed.dropped_residues
        );
    }
    Ok(parsed.structure)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))
}

/// Moves every residue's atoms rigidly from `s`'s frames onto `frames`.
pub fn carry_atoms(s: &BackboneStructure, frames: &FrameSet) -> Result<BackboneStructure> {
    let local = local_atoms(&s.frames()?, &s.atoms());
    Ok(s.with_atoms(place_local(frames, &local))?)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        bail!(CliError::Usage("--jobs must be at least 1".into()));
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

fn gen_synthetic(a: &GenSyntheticArgs, cfg: &RunConfig) -> Result<()> {
    if a.val_count > a.count {
        bail!(CliError::Usage(format!("--val-count {} exceeds --count {}", a.val_count, a.count)));
    }
    prepare_out_dir(&a.out_dir, a.force)?;
    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let seed = substream(a.seed, Stream::Synthetic, i as u64).next_u64();
        let s = make_synthetic(a.kind.for_index(i), a.n_res, seed)?;
        let id = format!("syn_{i:04}");
        let file = format!("{id}.pdb");
        write(&a.out_dir.join(&file), &write_pdb(&s))?;
        entries.push(ManifestEntry {
            target_id: id,
            decoy_path: None,
            reference_path: file.into(),
            refined_path: None,
            split: if i + a.val_count >= a.count { Split::Val } else { Split::Train },
        });
    }
    Manifest {
        entries,
        base_dir: a.out_dir.clone(),
    }
    .save(&a.out_dir.join("manifest.json"))?;
    echo_run(&a.out_dir, cfg)
}

pub fn noise_process(config: Option<&Path>) -> Result<(NoiseConfig, ForwardProcess)> {
    let nc = match config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => NoiseConfig::default(),
    };
    let mk = |c: &backbone_refine::model::ScheduleConfig, ch| make_schedule(c.kind, ch, c.t_max, c.beta_start, c.beta_end);
    let process = ForwardProcess::new(mk(&nc.pos_schedule, Channel::Pos)?, mk(&nc.ori_schedule, Channel::Ori)?)?
        .with_coord_scale(nc.coord_scale)?;
    Ok((nc, process))
}

fn corrupt(a: &CorruptArgs, cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let (nc, process) = noise_process(a.schedule_config.as_deref())?;
    prepare_out_dir(&a.out_dir, a.force)?;
    let mut report = String::from("target_id\ttimestep\tfape\n");
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let ref_path = manifest.resolve(&e.reference_path);
        let reference = load_structure(&ref_path)?;
        let mut rng = substream(a.seed, Stream::Corrupt, i as u64);
        let t = match a.timestep {
            Some(t) => t,
            None => rng.random_range(1..=process.t_max()),
        };
        let (frames, noise) = process.corrupt(&reference.frames()?, t, &mut rng)?;
        let decoy = carry_atoms(&reference, &frames)?;
        let fape = fape_structures(&decoy, &reference, &FapeOptions::default())?;
        writeln!(report, "{}\t{}\t{:.6}", e.target_id, t, fape)?;
        let file = format!("{}.pdb", e.target_id);
        write(&a.out_dir.join(&file), &write_pdb(&decoy))?;
        write(
            &a.out_dir.join(format!("{}.noise.json", e.target_id)),
            &serde_json::to_string_pretty(&noise)?,
        )?;
        entries.push(ManifestEntry {
            target_id: e.target_id.clone(),
            decoy_path: Some(file.into()),
            reference_path: absolute(&ref_path)?,
            refined_path: None,
            split: e.split,
        });
    }
    Manifest {
        entries,
        base_dir: a.out_dir.clone(),
    }
    .save(&a.out_dir.join("manifest.json"))?;
    write(&a.out_dir.join("noise_config.json"), &serde_json::to_string_pretty(&nc)?)?;
    write(&a.out_dir.join("corrupt.tsv"), &report)?;
    print!("{report}");
    echo_run(&a.out_dir, cfg)
}

fn entry_decoy(e: &ManifestEntry) -> Result<&Path> {
    e.decoy_path
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("entry {} has no decoy_path", e.target_id)).into())
}

fn refine(a: &RefineArgs, cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let model = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    if a.steps == 0 {
        bail!(CliError::Usage("--steps must be at least 1".into()));
    }
    prepare_out_dir(&a.out_dir, a.force)?;

    let refine_one = |e: &ManifestEntry| -> Result<(BackboneStructure, String)> {
        let decoy = load_structure(&manifest.resolve(entry_decoy(e)?))?;
        let reference = load_structure(&manifest.resolve(&e.reference_path))?;
        let refiner: Box<dyn Refiner> = match &model {
            Some(c) => Box::new(c.refiner()),
            None if a.oracle => Box::new(OracleRefiner {
                truth: reference.frames()?,
            }),
            None => Box::new(GradientRefiner::new(&reference, a.grad_step, a.grad_inner)?),
        };
        let (refined, trace) = refine_structure(
            refiner.as_ref(),
            &decoy,
            a.timestep,
            a.steps,
            &IterateOptions::default(),
            Some(&reference),
        )?;
        let rows: String = trace_to_tsv(&trace)
            .lines()
            .skip(1)
            .map(|l| format!("{}\t{l}\n", e.target_id))
            .collect();
        Ok((refined, rows))
    };
    let results: Vec<(BackboneStructure, String)> =
        pool(a.jobs)?.install(|| manifest.entries.par_iter().map(refine_one).collect::<Result<_>>())?;

    let mut trace = format!("target_id\t{}\n", backbone_refine::refinement::TRACE_HEADER);
    let mut entries = Vec::with_capacity(results.len());
    for (e, (refined, rows)) in manifest.entries.iter().zip(results) {
        let file = format!("{}.pdb", e.target_id);
        write(&a.out_dir.join(&file), &write_pdb(&refined))?;
        trace.push_str(&rows);
        entries.push(ManifestEntry {
            target_id: e.target_id.clone(),
            decoy_path: Some(absolute(&manifest.resolve(entry_decoy(e)?))?),
            reference_path: absolute(&manifest.resolve(&e.reference_path))?,
            refined_path: Some(file.into()),
            split: e.split,
        });
    }
    write(&a.out_dir.join("trace.tsv"), &trace)?;
    Manifest {
        entries,
        base_dir: a.out_dir.clone(),
    }
    .save(&a.out_dir.join("manifest.json"))?;
    echo_run(&a.out_dir, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    Decoy,
    Refined,
    Reference,
}

fn column_path(e: &ManifestEntry, c: Column) -> Result<&Path> {
    let p = match c {
        Column::Decoy => e.decoy_path.as_deref(),
        Column::Refined => e.refined_path.as_deref(),
        Column::Reference => Some(e.reference_path.as_path()),
    };
    p.ok_or_else(|| CliError::Usage(format!("entry {} has no {c:?} path", e.target_id).to_lowercase()).into())
}

fn parse_pairs(names: &[String]) -> Result<(Column, Option<Column>)> {
    let cols = names
        .iter()
        .map(|n| match n.trim() {
            "decoy" => Ok(Column::Decoy),
            "refined" => Ok(Column::Refined),
            "reference" => Ok(Column::Reference),
            other => Err(CliError::Usage(format!("unknown --pairs column {other:?}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let bad = || CliError::Usage("--pairs must list start[,refined],reference with reference last".into());
    match cols.as_slice() {
        [s, Column::Reference] if *s != Column::Reference => Ok((*s, None)),
        [s, r, Column::Reference] if *s != Column::Reference && *r != Column::Reference => {
            Ok((*s, Some(*r)))
        }
        _ => Err(bad().into()),
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (start_col, refined_col) = parse_pairs(&a.pairs)?;
    if let Some(out) = &a.out {
        refuse_existing(out, a.force)?;
    }
    let manifest = load_manifest(&a.manifest)?;
    if manifest.entries.is_empty() {
        bail!(CliError::Usage("manifest has no entries".into()));
    }
    let row = |e: &ManifestEntry| -> Result<ReportRow> {
        let load = |c| -> Result<BackboneStructure> { load_structure(&manifest.resolve(column_path(e, c)?)) };
        let reference = load(Column::Reference)?;
        let start_model = load(start_col)?;
        DecoyPair::new(start_model.clone(), reference.clone(), e.target_id.clone())?;
        let start = report_structures(&start_model, &reference)?;
        let end = match refined_col {
            Some(c) => report_structures(&load(c)?, &reference)?,
            None => start,
        };
        Ok(ReportRow {
            target_id: e.target_id.clone(),
            start,
            delta: delta(&start, &end),
        })
    };
    let rows: Vec<ReportRow> =
        pool(a.jobs)?.install(|| manifest.entries.par_iter().map(row).collect::<Result<_>>())?;
    let text = match a.format {
        Format::Tsv => rows_to_tsv(&rows),
        Format::Json => rows_to_json(&rows) + "\n",
    };
    match &a.out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn train_cmd(a: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let mut tc = match &a.config {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    tc.validate()?;
    refuse_existing(&a.out, a.force)?;
    let manifest = load_manifest(&a.manifest)?;

    let mut data = Vec::new();
    let mut val_pairs = Vec::new();
    for e in &manifest.entries {
        let reference = load_structure(&manifest.resolve(&e.reference_path))?;
        match e.split {
            Split::Train => {
                let decoy = match (&e.decoy_path, a.use_decoys) {
                    (Some(p), true) => Some(load_structure(&manifest.resolve(p))?),
                    _ => None,
                };
                data.push(TrainExample { reference, decoy });
            }
            Split::Val => {
                if let Some(p) = &e.decoy_path {
                    let decoy = load_structure(&manifest.resolve(p))?;
                    val_pairs.push(DecoyPair::new(decoy, reference, e.target_id.clone())?);
                }
            }
            Split::Test => {}
        }
    }
    if data.is_empty() {
        bail!(CliError::Usage("manifest has no train-split entries".into()));
    }
    let val = ValidationSet {
        pairs: val_pairs,
        timestep: a.val_timestep.unwrap_or(tc.pos_schedule.t_max / 2),
    };
    let outcome = train(&data, &tc, Some(&val), None)?;

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Checkpoint::new(outcome.params, tc.k_neighbors).save(&a.out)?;
    write(&sibling(&a.out, "log.tsv"), &log_to_tsv(&outcome.log))?;
    write(&sibling(&a.out, "config.json"), &(tc.to_json() + "\n"))?;
    write(&sibling(&a.out, "run.json"), &cfg.to_json())?;
    if let Some(last) = outcome.log.last() {
        println!("step\t{}\tval_fape\t{:.4}\tval_lddt\t{:.4}", last.step, last.val_fape, last.val_lddt);
    }
    Ok(())
}

fn schedule(a: &ScheduleArgs) -> Result<()> {
    let s = make_schedule(a.kind.into(), a.channel.into(), a.t_max, a.beta_start, a.beta_end)?;
    match &a.dump {
        Some(p) => {
            refuse_existing(p, a.force)?;
            write(p, &(s.to_json() + "\n"))
        }
        None => {
            println!("t\tbeta\talpha_bar");
            for t in 1..=s.t_max() {
                println!("{t}\t{}\t{}", s.beta(t), s.alpha_bar(t));
            }
            Ok(())
        }
    }
}
