//! Acceptance suite: one test per headline criterion. Each prints a single
//! `PASS`/`FAIL` line (run with `--nocapture` to see them) and fails the test
//! when any check misses its tolerance or the runtime budget.

use std::f64::consts::PI;
use std::time::Instant;

use backbone_refine::diffusion::*;
use backbone_refine::geometry::*;
use backbone_refine::losses::*;
use backbone_refine::metrics::{gdt, kabsch, lddt};
use backbone_refine::model::{evaluate, train, TrainConfig, TrainExample, ValidationSet};
use backbone_refine::refinement::{ancestral_chain, refine_structure, IterateOptions, OracleRefiner, RefineContext};
use backbone_refine::rng::{standard_normal3, stream, substream, uniform_rotation, Stream};
use backbone_refine::structure::{make_synthetic, BackboneStructure, DecoyPair, SyntheticKind};
use rand::Rng;

struct Criterion {
    name: &'static str,
    budget_s: f64,
    start: Instant,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Criterion {
    fn new(name: &'static str, budget_s: f64) -> Self {
        Criterion {
            name,
            budget_s,
            start: Instant::now(),
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, what: impl Into<String>, ok: bool) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    fn finish(mut self) {
        let secs = self.start.elapsed().as_secs_f64();
        if secs >= self.budget_s {
            self.failures.push(format!("runtime {secs:.1}s over {}s budget", self.budget_s));
        }
        let status = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        let mut line = format!("{status} {} ({secs:.2}s of {}s)", self.name, self.budget_s);
        if !self.notes.is_empty() {
            line += &format!(" | {}", self.notes.join("; "));
        }
        if !self.failures.is_empty() {
            line += &format!(" | failed: {}", self.failures.join("; "));
        }
        println!("{line}");
        assert!(self.failures.is_empty(), "{line}");
    }
}

fn process() -> ForwardProcess {
    ForwardProcess::new(Schedule::default_for(Channel::Pos), Schedule::default_for(Channel::Ori)).unwrap()
}

fn synthetic(i: usize, len: usize, seed: u64) -> BackboneStructure {
    let kind = if i.is_multiple_of(2) { SyntheticKind::Helix } else { SyntheticKind::Extended };
    make_synthetic(kind, len, seed).unwrap()
}

/// Corrupts `s` at `t` and carries each residue's atoms rigidly with its frame.
fn corrupted(s: &BackboneStructure, t: usize, seed: u64) -> BackboneStructure {
    let frames = s.frames().unwrap();
    let (moved, _) = process().corrupt(&frames, t, &mut substream(seed, Stream::Corrupt, 0)).unwrap();
    let atoms = s
        .atoms()
        .iter()
        .zip(frames.iter().zip(moved.iter()))
        .map(|(a, (f, g))| BackboneAtoms(a.0.map(|x| g.apply(&f.to_local(&x)))))
        .collect();
    s.with_atoms(atoms).unwrap()
}

fn random_rigid<R: Rng>(rng: &mut R, max_trans: f64) -> Frame {
    let t = Vec3::new(
        rng.random_range(-max_trans..max_trans),
        rng.random_range(-max_trans..max_trans),
        rng.random_range(-max_trans..max_trans),
    );
    Frame::new(uniform_rotation(rng), t)
}

fn max_atom_gap(a: &[BackboneAtoms], b: &[BackboneAtoms]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.0.iter().zip(y.0.iter()).map(|(p, q)| (p - q).norm()))
        .fold(0.0, f64::max)
}

#[test]
fn geometry_suite() {
    let mut c = Criterion::new("geometry suite", 5.0);
    let mut rng = stream(1, Stream::Custom(1));

    let mut roundtrip = 0.0f64;
    let mut flow = 0.0f64;
    for _ in 0..2000 {
        let axis = backbone_refine::rng::unit_vector(&mut rng);
        let v = axis * rng.random_range(0.0..PI - 1e-3);
        roundtrip = roundtrip.max((so3_log(&so3_exp(&v)) - v).norm());
        let r = uniform_rotation(&mut rng);
        roundtrip = roundtrip.max((so3_exp(&so3_log(&r)).matrix() - r.matrix()).abs().max());
        let a = rng.random_range(0.0..1.0);
        let b = rng.random_range(0.0..1.0 - a);
        let lhs = geodesic_flow(a, &r).matrix() * geodesic_flow(b, &r).matrix();
        flow = flow.max((lhs - geodesic_flow(a + b, &r).matrix()).abs().max());
    }
    c.check(format!("exp/log roundtrip {roundtrip:.1e}"), roundtrip <= 1e-9);
    c.check(format!("flow composition {flow:.1e}"), flow <= 1e-9);

    let mut equiv = 0.0f64;
    let mut ideal = 0.0f64;
    for i in 0..20 {
        let s = synthetic(i, 8 + i, i as u64);
        let frames = s.frames().unwrap();
        let g = random_rigid(&mut rng, 100.0);
        let moved = frames_from_backbone(&s.transformed(&g).atoms()).unwrap();
        for (f, m) in frames.iter().zip(moved.iter()) {
            let expect = g.compose(f);
            equiv = equiv.max((expect.rot.matrix() - m.rot.matrix()).abs().max());
            equiv = equiv.max((expect.trans - m.trans).norm());
        }
        let rebuilt = atoms_from_frames(&frames, &IdealTemplate::default());
        ideal = ideal.max(max_atom_gap(&rebuilt, &s.atoms()));
    }
    c.check(format!("frame equivariance {equiv:.1e}"), equiv <= 1e-9);
    c.check(format!("atoms/frames roundtrip {ideal:.1e} A"), ideal <= 1e-6);
    c.note(format!("roundtrip {roundtrip:.1e}, flow {flow:.1e}, equivariance {equiv:.1e}, ideal {ideal:.1e}"));
    c.finish();
}

/// Kolmogorov distribution tail `P(K > λ)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn moments(xs: &[Vec3]) -> (Vec3, Vec3) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<Vec3>() / n;
    let var = xs.iter().map(|x| (x - mean).component_mul(&(x - mean))).sum::<Vec3>() / (n - 1.0);
    (mean, var)
}

#[test]
fn diffusion_suite() {
    let mut c = Criterion::new("diffusion suite", 60.0);
    let s = Schedule::default_for(Channel::Pos);
    let n = 100_000;
    let x0 = Vec3::new(10.0, -8.0, 6.0);
    let start = vec![x0; n];
    let mut worst = 0.0f64;
    for t in [1usize, 10, 100] {
        let ab = s.alpha_bar(t);
        let (mean_ref, var_ref) = (x0 * ab.sqrt(), 1.0 - ab);
        let stepwise = diffuse_translations_stepwise(&start, t, &s, &mut substream(2, Stream::Custom(2), t as u64)).unwrap();
        let mut rng = substream(3, Stream::Custom(2), t as u64);
        let noise: Vec<Vec3> = (0..n).map(|_| standard_normal3(&mut rng)).collect();
        let closed = diffuse_translations(&start, t, &s, &noise).unwrap();
        for (label, xs) in [("stepwise", &stepwise), ("closed", &closed)] {
            let (m, v) = moments(xs);
            for k in 0..3 {
                let em = (m[k] - mean_ref[k]).abs() / mean_ref[k].abs();
                let ev = (v[k] - var_ref).abs() / var_ref;
                worst = worst.max(em).max(ev);
                c.check(format!("{label} T={t} axis {k}: mean err {em:.4}, var err {ev:.4}"), em <= 0.02 && ev <= 0.02);
            }
        }
        let ((ms, vs), (mc, vc)) = (moments(&stepwise), moments(&closed));
        for k in 0..3 {
            let gap = ((ms[k] - mc[k]).abs() / mean_ref[k].abs()).max((vs[k] - vc[k]).abs() / var_ref);
            c.check(format!("stepwise vs closed T={t} axis {k}: {gap:.4}"), gap <= 0.02);
        }
    }
    c.note(format!("worst marginal rel err {worst:.4}"));

    for eps in [0.05, 0.5, 2.0] {
        let z = simpson(|w| igso3_density(w, eps), 0.0, PI, 20_000);
        c.check(format!("IGSO3 eps={eps} integrates to {z:.6}"), (z - 1.0).abs() <= 1e-3);
        c.note(format!("norm({eps})={z:.6}"));
    }
    let haar_gap = (0..=2000)
        .map(|i| {
            let w = PI * i as f64 / 2000.0;
            (igso3_density(w, 10.0) - (1.0 - w.cos()) / PI).abs()
        })
        .fold(0.0, f64::max);
    c.check(format!("Haar limit gap {haar_gap:.1e}"), haar_gap <= 1e-3);
    c.note(format!("haar gap {haar_gap:.1e}"));

    for (i, eps) in [0.05, 0.5, 2.0].into_iter().enumerate() {
        let table = IgSo3Table::new(eps);
        let mut rng = substream(4, Stream::Custom(4), i as u64);
        let mut angles: Vec<f64> = (0..n).map(|_| table.sample_perturbation(&mut rng).angle()).collect();
        angles.sort_by(f64::total_cmp);
        let nf = n as f64;
        let d = angles
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let f = table.cdf(w);
                (f - k as f64 / nf).abs().max(((k + 1) as f64 / nf - f).abs())
            })
            .fold(0.0, f64::max);
        let p = kolmogorov_q((nf.sqrt() + 0.12 + 0.11 / nf.sqrt()) * d);
        c.check(format!("KS eps={eps}: D={d:.2e} p={p:.3}"), p > 0.01);
        c.note(format!("KS p({eps})={p:.3}"));
    }
    c.finish();
}

/// Two residues with identity frames at the origin and at (3.8, 0, 0).
fn two_residue_case() -> (FrameSet, Vec<BackboneAtoms>, FrameSet, Vec<BackboneAtoms>) {
    let tpl = IdealTemplate::default();
    let truth = FrameSet::new(vec![Frame::identity(), Frame::from_translation(Vec3::new(3.8, 0.0, 0.0))]).unwrap();
    let pred = FrameSet::new(vec![Frame::identity(), Frame::from_translation(Vec3::new(4.8, 0.0, 0.0))]).unwrap();
    let (ta, pa) = (atoms_from_frames(&truth, &tpl), atoms_from_frames(&pred, &tpl));
    (pred, pa, truth, ta)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn perturbed_pair(seed: u64) -> (BackboneStructure, BackboneStructure) {
    let truth = synthetic(seed as usize, 8, seed);
    let mut rng = stream(seed, Stream::Custom(5));
    let noisy = corrupted(&truth, 20, seed);
    let atoms = noisy
        .atoms()
        .iter()
        .map(|a| BackboneAtoms(a.0.map(|x| x + standard_normal3(&mut rng) * 0.3)))
        .collect();
    (truth.with_atoms(atoms).unwrap(), truth)
}

#[test]
fn loss_suite() {
    let mut c = Criterion::new("loss suite", 30.0);
    let opts = FapeOptions::default();
    let mut rng = stream(6, Stream::Custom(6));

    let mut drift = 0.0f64;
    for seed in 0..20 {
        let (pred, truth) = perturbed_pair(seed);
        let base = fape_structures(&pred, &truth, &opts).unwrap();
        drift = drift.max(fape_structures(&truth, &truth, &opts).unwrap());
        let (g, h) = (random_rigid(&mut rng, 100.0), random_rigid(&mut rng, 100.0));
        drift = drift.max((fape_structures(&pred.transformed(&g), &truth, &opts).unwrap() - base).abs());
        drift = drift.max((fape_structures(&pred, &truth.transformed(&h), &opts).unwrap() - base).abs());
        drift = drift.max(fape_structures(&truth.transformed(&g), &truth, &opts).unwrap());
    }
    c.check(format!("FAPE zero/invariance drift {drift:.1e}"), drift <= 1e-9);

    let (pf, pa, tf, ta) = two_residue_case();
    let lib = fape_local_mse(&pf, &pa, &tf, &ta, &opts).unwrap();
    let mut terms = Vec::new();
    for i in 0..2 {
        for res in 0..2 {
            for a in 0..4 {
                let p = pf[i].rot.matrix().transpose() * (pa[res].0[a] - pf[i].trans);
                let t = tf[i].rot.matrix().transpose() * (ta[res].0[a] - tf[i].trans);
                terms.push((p - t).norm());
            }
        }
    }
    let oracle = terms.iter().sum::<f64>() / terms.len() as f64;
    let ones = terms.iter().filter(|&&x| (x - 1.0).abs() < 1e-12).count();
    c.check(
        format!("hand case lib {lib} oracle {oracle} ({ones} unit pairs of {})", terms.len()),
        terms.len() == 16 && ones == 8 && (oracle - 0.5).abs() < 1e-12 && (lib - 0.5).abs() < 1e-12,
    );

    let spec = BondSpec::default();
    let mut bond_gap = 0.0f64;
    for seed in 0..10 {
        let (pred, _) = perturbed_pair(100 + seed);
        let atoms = pred.atoms();
        let direct = (0..atoms.len() - 1)
            .map(|i| (((atoms[i].c() - atoms[i + 1].n()).norm() - spec.l_lit).abs() - spec.r).max(0.0))
            .sum::<f64>()
            / (atoms.len() - 1) as f64;
        bond_gap = bond_gap.max((bond_loss(&atoms, &spec).unwrap() - direct).abs());
    }
    c.check(format!("bond vs direct loop {bond_gap:.1e}"), bond_gap <= 1e-12);

    // Relative error is taken over each whole gradient vector: single
    // components near zero sit at the h² truncation floor of the difference
    // quotient, which the component-wise ratio would amplify.
    let mut worst = 0.0f64;
    let mut worst_component = 0.0f64;
    let mut truncation = Vec::new();
    for h in [1e-4, 1e-5] {
        let mut blocks: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for seed in 0..3 {
            let (pred, truth) = perturbed_pair(200 + seed);
            let (pf, tf) = (pred.frames().unwrap(), truth.frames().unwrap());
            let (pa, ta) = (pred.atoms(), truth.atoms());
            let (_, fg) = fape_local_mse_grad(&pf, &pa, &tf, &ta, &opts).unwrap();
            let (_, bg) = bond_loss_grad(&pa, &spec).unwrap();
            let (mut fape_atoms, mut bond_atoms, mut fape_trans) = (
                (Vec::new(), Vec::new()),
                (Vec::new(), Vec::new()),
                (Vec::new(), Vec::new()),
            );
            for r in 0..pa.len() {
                for a in 0..4 {
                    for k in 0..3 {
                        let shifted = |d: f64| {
                            let mut x = pa.clone();
                            x[r].0[a][k] += d;
                            x
                        };
                        let (up, dn) = (shifted(h), shifted(-h));
                        fape_atoms.0.push(fg.atoms[r][a][k]);
                        fape_atoms.1.push(
                            (fape_local_mse(&pf, &up, &tf, &ta, &opts).unwrap()
                                - fape_local_mse(&pf, &dn, &tf, &ta, &opts).unwrap())
                                / (2.0 * h),
                        );
                        bond_atoms.0.push(bg[r][a][k]);
                        bond_atoms.1.push((bond_loss(&up, &spec).unwrap() - bond_loss(&dn, &spec).unwrap()) / (2.0 * h));
                    }
                }
                for k in 0..3 {
                    let shifted = |d: f64| {
                        let mut f = pf.clone();
                        f.frames_mut()[r].trans[k] += d;
                        f
                    };
                    fape_trans.0.push(fg.trans[r][k]);
                    fape_trans.1.push(
                        (fape_local_mse(&shifted(h), &pa, &tf, &ta, &opts).unwrap()
                            - fape_local_mse(&shifted(-h), &pa, &tf, &ta, &opts).unwrap())
                            / (2.0 * h),
                    );
                }
            }
            let n = pa.len();
            let mut nrng = stream(seed, Stream::Custom(7));
            let record = NoiseRecord {
                timestep: 1,
                trans_noise: (0..n).map(|_| standard_normal3(&mut nrng)).collect(),
                rot_noise: vec![Rotation::identity(); n],
            };
            let guess: Vec<Vec3> = (0..n).map(|_| standard_normal3(&mut nrng)).collect();
            let sg = score_matching_grad(&guess, &record).unwrap();
            let mut score = (Vec::new(), Vec::new());
            for r in 0..n {
                for k in 0..3 {
                    let shifted = |d: f64| {
                        let mut g = guess.clone();
                        g[r][k] += d;
                        g
                    };
                    score.0.push(sg[r][k]);
                    score.1.push(
                        (score_matching_loss(&shifted(h), &record).unwrap()
                            - score_matching_loss(&shifted(-h), &record).unwrap())
                            / (2.0 * h),
                    );
                }
            }
            blocks.extend([fape_atoms, bond_atoms, fape_trans, score]);
        }
        let mut vector_err = 0.0f64;
        let mut component_err = 0.0f64;
        for (analytic, fd) in &blocks {
            let diff = analytic.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
            vector_err = vector_err.max(diff / norm);
            for (a, b) in analytic.iter().zip(fd) {
                component_err = component_err.max(rel_err(*a, *b));
            }
        }
        if h == 1e-4 {
            worst = vector_err;
            worst_component = component_err;
        }
        truncation.push(format!("h={h:.0e}: component {component_err:.1e}"));
    }
    c.check(format!("gradients vs central differences {worst:.1e}"), worst < 1e-4);
    c.note(format!(
        "invariance {drift:.1e}, hand case {lib}, bond {bond_gap:.1e}, grad rel err {worst:.1e} (worst single component {worst_component:.1e}; {})",
        truncation.join(", ")
    ));
    c.finish();
}

/// Superposes `pred` onto `reference` (all Cα) and blends atoms linearly.
fn blend(pred: &BackboneStructure, reference: &BackboneStructure, lambda: f64) -> BackboneStructure {
    let idx: Vec<usize> = (0..pred.len()).collect();
    let (g, _) = kabsch(&pred.ca(), &reference.ca(), &idx).unwrap();
    let moved = pred.transformed(&g);
    let atoms = moved
        .atoms()
        .iter()
        .zip(reference.atoms())
        .map(|(p, r)| BackboneAtoms(std::array::from_fn(|a| p.0[a] * (1.0 - lambda) + r.0[a] * lambda)))
        .collect();
    pred.with_atoms(atoms).unwrap()
}

#[test]
fn metric_suite() {
    let mut c = Criterion::new("metric suite", 60.0);
    let mut rng = stream(8, Stream::Custom(8));
    for i in 0..10 {
        let s = synthetic(i, 10 + 3 * i, i as u64);
        let g = random_rigid(&mut rng, 50.0);
        for (label, model) in [("identity", s.clone()), ("rigid copy", s.transformed(&g))] {
            let (l, gd) = (lddt(&model, &s).unwrap(), gdt(&model, &s).unwrap());
            c.check(
                format!("{label} #{i}: lddt {l} gdt {}/{}", gd.ts, gd.ha),
                (l - 100.0).abs() < 1e-9 && (gd.ts - 100.0).abs() < 1e-9 && (gd.ha - 100.0).abs() < 1e-9,
            );
        }
    }

    // Three residues exact and one displaced 100 Å: 3/4 inside every cutoff.
    let four = make_synthetic(SyntheticKind::Helix, 4, 0).unwrap();
    let mut atoms = four.atoms();
    atoms[3] = atoms[3].transformed(&Frame::from_translation(Vec3::new(100.0, 0.0, 0.0)));
    let outlier = four.with_atoms(atoms).unwrap();
    let expect = 100.0 * [0.75; 4].iter().sum::<f64>() / 4.0;
    let got = gdt(&outlier, &four).unwrap().ts;
    c.check(format!("3/4 case gdt_ts {got}"), (got - expect).abs() < 1e-9);

    let mut ha_ok = 0;
    for i in 0..100 {
        let s = synthetic(i, 8 + i % 25, 1000 + i as u64);
        let t = 1 + (i * 37) % 100;
        let g = gdt(&corrupted(&s, t, i as u64), &s).unwrap();
        if g.ha <= g.ts + 1e-12 {
            ha_ok += 1;
        }
    }
    c.check(format!("gdt_ha <= gdt_ts on {ha_ok}/100 pairs"), ha_ok == 100);

    let lambdas = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let mut worst_drop = 0.0f64;
    let mut violating_cases = 0;
    for i in 0..50 {
        let s = synthetic(i, 12 + i % 20, 2000 + i as u64);
        let pred = corrupted(&s, 10 + (i * 13) % 80, 50 + i as u64);
        let mut prev: Option<(f64, f64)> = None;
        let mut bad = false;
        for &lam in &lambdas {
            let m = blend(&pred, &s, lam);
            let cur = (lddt(&m, &s).unwrap(), gdt(&m, &s).unwrap().ts);
            if let Some(p) = prev {
                let drop = (p.0 - cur.0).max(p.1 - cur.1);
                worst_drop = worst_drop.max(drop);
                bad |= drop > 1e-6;
            }
            prev = Some(cur);
        }
        violating_cases += bad as usize;
    }
    c.check(
        format!("interpolation monotone: {violating_cases}/50 cases drop, worst {worst_drop:.2e}"),
        violating_cases == 0,
    );
    c.note(format!("3/4 case {got}, ha<=ts {ha_ok}/100, interpolation worst drop {worst_drop:.1e}"));
    c.finish();
}

#[test]
fn harness_inversion() {
    let mut c = Criterion::new("harness inversion", 120.0);
    let fp = process();
    let mut worst_fape = 0.0f64;
    let mut min_gdt = 100.0f64;
    for i in 0..20 {
        let truth = synthetic(i, 10 + i, 300 + i as u64);
        let t = 1 + (i * 41) % 100;
        let decoy = corrupted(&truth, t, i as u64);
        let oracle = OracleRefiner {
            truth: truth.frames().unwrap(),
        };
        let (out, _) = refine_structure(&oracle, &decoy, t, 1, &IterateOptions::default(), None).unwrap();
        worst_fape = worst_fape.max(fape_structures(&out, &truth, &FapeOptions::default()).unwrap());
        min_gdt = min_gdt.min(gdt(&out, &truth).unwrap().ts);
    }
    c.check(format!("one-step oracle worst FAPE {worst_fape:.1e}"), worst_fape < 1e-9);
    c.check(format!("one-step oracle min GDT-TS {min_gdt}"), min_gdt == 100.0);

    let reference = make_synthetic(SyntheticKind::Helix, 16, 11).unwrap();
    let truth = reference.frames().unwrap();
    let oracle = OracleRefiner { truth: truth.clone() };
    let seq = reference.sequence();
    let ctx = RefineContext {
        sequence: &seq,
        timestep: 0,
    };
    let mut tables = Vec::new();
    let mut worst_chain = 0.0f64;
    for seed in 0..20 {
        let (xt, _) = fp.corrupt(&truth, fp.t_max(), &mut substream(seed, Stream::Corrupt, 0)).unwrap();
        let out = ancestral_chain(
            &oracle,
            &xt,
            fp.t_max(),
            fp.pos(),
            fp.ori(),
            fp.coord_scale(),
            &ctx,
            &mut tables,
            &mut substream(seed, Stream::Ancestral, 0),
        )
        .unwrap();
        let model = reference.with_frames(&out, &IdealTemplate::default()).unwrap();
        worst_chain = worst_chain.max(fape_structures(&model, &reference, &FapeOptions::default()).unwrap());
    }
    c.check(format!("oracle ancestral chain worst FAPE {worst_chain:.3}"), worst_chain < 0.5);
    c.note(format!("one-step FAPE {worst_fape:.1e}, chain worst FAPE {worst_chain:.3} A over 20 seeds"));
    c.finish();
}

const MID_T: usize = 50;

fn learning_config() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 4,
        learning_rate: 3e-3,
        k_neighbors: 16,
        n_refine_steps: 4,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn corpus(seed0: u64, n: usize) -> Vec<BackboneStructure> {
    (0..n).map(|i| synthetic(i, 16 + (i * 7) % 17, seed0 + i as u64)).collect()
}

fn held_out(cfg: &TrainConfig) -> Vec<DecoyPair> {
    let process = cfg.process().unwrap();
    corpus(5000, 10)
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let frames = r.frames().unwrap();
            let (moved, _) = process.corrupt(&frames, MID_T, &mut substream(77, Stream::Eval, i as u64)).unwrap();
            let atoms = r
                .atoms()
                .iter()
                .zip(frames.iter().zip(moved.iter()))
                .map(|(a, (f, g))| BackboneAtoms(a.0.map(|x| g.apply(&f.to_local(&x)))))
                .collect();
            DecoyPair::new(r.with_atoms(atoms).unwrap(), r, format!("held_{i}")).unwrap()
        })
        .collect()
}

#[test]
fn end_to_end_learning_signal() {
    let mut c = Criterion::new("end-to-end learning signal", 600.0);
    let cfg = learning_config();
    let data: Vec<TrainExample> = corpus(1000, 20).into_iter().map(TrainExample::reference_only).collect();
    c.check("corpus lengths <= 32", data.iter().all(|d| d.reference.len() <= 32));
    let pairs = held_out(&cfg);
    let val = ValidationSet {
        pairs: pairs.clone(),
        timestep: MID_T,
    };
    let run = train(&data, &cfg, Some(&val), None).unwrap();
    let again = train(&data, &cfg, Some(&val), None).unwrap();
    c.check("deterministic per seed", run.params == again.params);

    let (first, last) = (run.log[0].val_fape, run.log.last().unwrap().val_fape);
    let drop = 1.0 - last / first;
    c.check(format!("val FAPE {first:.3} -> {last:.3} ({:.0}% drop)", 100.0 * drop), drop >= 0.30);
    let report = evaluate(&run.params, cfg.k_neighbors, &pairs, cfg.n_refine_steps, MID_T).unwrap();
    let d = report.mean.delta;
    c.check(format!("mean delta lDDT {:+.3}", d.delta_lddt), d.delta_lddt > 0.0);
    c.check(format!("mean delta GDT-TS {:+.3}", d.delta_gdt_ts), d.delta_gdt_ts > 0.0);
    c.note(format!(
        "val FAPE {first:.2} -> {last:.2} ({:.0}% drop), dLDDT {:+.2}, dGDT-TS {:+.2}, dGDT-HA {:+.2}",
        100.0 * drop,
        d.delta_lddt,
        d.delta_gdt_ts,
        d.delta_gdt_ha
    ));
    c.finish();
}

#[test]
fn ablation_hook() {
    let mut c = Criterion::new("ablation hook", 120.0);
    let base = TrainConfig {
        epochs: 3,
        ..learning_config()
    };
    let data: Vec<TrainExample> = corpus(1000, 8)
        .into_iter()
        .enumerate()
        .map(|(i, r)| TrainExample {
            decoy: Some(corrupted(&r, 20, i as u64)),
            reference: r,
        })
        .collect();
    let sampled = train(&data, &base, None, None).unwrap();
    let direct = train(
        &data,
        &TrainConfig {
            direct_psr: true,
            ..base.clone()
        },
        None,
        None,
    )
    .unwrap();
    let differs = sampled
        .log
        .iter()
        .zip(&direct.log)
        .skip(1)
        .all(|(a, b)| a.total != b.total);
    c.check("every epoch's training loss differs between the two modes", differs);
    c.check("same number of log rows", sampled.log.len() == direct.log.len());
    c.note(format!(
        "final loss sampled-T {:.3}, direct {:.3}",
        sampled.log.last().unwrap().total,
        direct.log.last().unwrap().total
    ));
    c.finish();
}
