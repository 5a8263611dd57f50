//! Structure-comparison metrics: Kabsch superposition, GDT-TS/GDT-HA, lDDT,
//! and before/after refinement reports.

use std::fmt::Write as _;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, Rotation, Vec3};
use crate::losses::{fape_structures, FapeOptions};
use crate::structure::{BackboneStructure, DecoyPair};

const DEGENERATE_SV: f64 = 1e-9;

/// Least-squares rigid transform mapping `pred[subset]` onto `reference[subset]`,
/// with the RMSD after superposition over the subset.
pub fn kabsch(pred: &[Vec3], reference: &[Vec3], subset: &[usize]) -> Result<(Frame, f64)> {
    if pred.len() != reference.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            found: pred.len(),
        });
    }
    if subset.len() < 3 {
        return Err(Error::DegenerateSubset);
    }
    let m = subset.len() as f64;
    let pc = subset.iter().map(|&i| pred[i]).sum::<Vec3>() / m;
    let rc = subset.iter().map(|&i| reference[i]).sum::<Vec3>() / m;
    let mut h = Matrix3::zeros();
    for &i in subset {
        h += (pred[i] - pc) * (reference[i] - rc).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    if sv[1] < DEGENERATE_SV {
        return Err(Error::DegenerateSubset);
    }
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = Rotation::from_matrix_unchecked(v * d * u.transpose());
    let frame = Frame::new(rot, rc - rot.apply(&pc));
    let msd = subset
        .iter()
        .map(|&i| (frame.apply(&pred[i]) - reference[i]).norm_squared())
        .sum::<f64>()
        / m;
    Ok((frame, msd.sqrt()))
}

pub fn rmsd_after_superposition(pred: &[Vec3], reference: &[Vec3]) -> Result<f64> {
    let all: Vec<usize> = (0..pred.len()).collect();
    kabsch(pred, reference, &all).map(|(_, r)| r)
}

pub const GDT_TS_CUTOFFS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
pub const GDT_HA_CUTOFFS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
const GDT_SEED_LENGTHS: [usize; 3] = [4, 8, 16];
const GDT_MAX_ITER: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdtScores {
    pub ts: f64,
    pub ha: f64,
}

fn seed_windows(n: usize) -> Vec<Vec<usize>> {
    let mut lengths: Vec<usize> = GDT_SEED_LENGTHS.iter().copied().filter(|&l| l < n).collect();
    lengths.push(n);
    lengths
        .into_iter()
        .flat_map(|len| (0..=n - len).map(move |s| (s..s + len).collect()))
        .collect()
}

/// Largest number of residues within `cutoff` found from one seed by
/// superposing on the current inlier set until it stops changing. When fewer
/// than three residues are inliers, the three closest are used instead.
fn best_from_seed(pred: &[Vec3], reference: &[Vec3], seed: &[usize], cutoff: f64) -> usize {
    let mut subset = seed.to_vec();
    let mut best = 0;
    for _ in 0..GDT_MAX_ITER {
        let Ok((frame, _)) = kabsch(pred, reference, &subset) else {
            break;
        };
        let dist: Vec<f64> = pred
            .iter()
            .zip(reference)
            .map(|(p, r)| (frame.apply(p) - r).norm())
            .collect();
        let mut next: Vec<usize> = (0..pred.len()).filter(|&i| dist[i] <= cutoff).collect();
        best = best.max(next.len());
        if next.len() < 3 {
            let mut order: Vec<usize> = (0..pred.len()).collect();
            order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
            next = order[..3].to_vec();
            next.sort_unstable();
        }
        if next == subset {
            break;
        }
        subset = next;
    }
    best
}

/// Maximum fraction of Cα atoms within `cutoff` over all seeds.
pub fn gdt_fraction(pred: &[Vec3], reference: &[Vec3], cutoff: f64) -> f64 {
    let n = pred.len();
    let best = seed_windows(n)
        .iter()
        .map(|seed| best_from_seed(pred, reference, seed, cutoff))
        .max()
        .unwrap_or(0);
    best as f64 / n as f64
}

/// GDT-TS and GDT-HA on Cα atoms, in percent.
pub fn gdt(pred: &BackboneStructure, reference: &BackboneStructure) -> Result<GdtScores> {
    if pred.len() != reference.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            found: pred.len(),
        });
    }
    if pred.len() < 4 {
        return Err(Error::TooShort {
            min: 4,
            found: pred.len(),
        });
    }
    let (p, r) = (pred.ca(), reference.ca());
    let mut cache: Vec<(f64, f64)> = Vec::new();
    let mut frac = |d: f64| {
        if let Some(&(_, f)) = cache.iter().find(|(c, _)| *c == d) {
            return f;
        }
        let f = gdt_fraction(&p, &r, d);
        cache.push((d, f));
        f
    };
    let ts = GDT_TS_CUTOFFS.iter().map(|&d| frac(d)).sum::<f64>() * 25.0;
    let ha = GDT_HA_CUTOFFS.iter().map(|&d| frac(d)).sum::<f64>() * 25.0;
    Ok(GdtScores { ts, ha })
}

pub const LDDT_INCLUSION_RADIUS: f64 = 15.0;
pub const LDDT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Superposition-free lDDT over all four backbone atoms, in percent.
/// Pairs come from different residues with reference distance below 15 Å.
pub fn lddt(pred: &BackboneStructure, reference: &BackboneStructure) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            found: pred.len(),
        });
    }
    if pred.len() < 2 {
        return Err(Error::TooShort {
            min: 2,
            found: pred.len(),
        });
    }
    let (pa, ra) = (pred.atoms(), reference.atoms());
    let n = pa.len();
    let mut included = 0usize;
    let mut preserved = [0usize; 4];
    for i in 0..n {
        for j in i + 1..n {
            for a in 0..4 {
                for b in 0..4 {
                    let d_ref = (ra[i].0[a] - ra[j].0[b]).norm();
                    if d_ref >= LDDT_INCLUSION_RADIUS {
                        continue;
                    }
                    included += 1;
                    let err = ((pa[i].0[a] - pa[j].0[b]).norm() - d_ref).abs();
                    for (k, thr) in LDDT_THRESHOLDS.iter().enumerate() {
                        if err < *thr {
                            preserved[k] += 1;
                        }
                    }
                }
            }
        }
    }
    if included == 0 {
        return Err(Error::InvalidStructure(
            "no atom pairs within the lDDT inclusion radius".into(),
        ));
    }
    Ok(preserved.iter().map(|&c| c as f64 / included as f64).sum::<f64>() * 25.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lddt: f64,
    pub gdt_ts: f64,
    pub gdt_ha: f64,
    pub rmsd: f64,
    pub fape: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaReport {
    pub delta_lddt: f64,
    pub delta_gdt_ts: f64,
    pub delta_gdt_ha: f64,
}

pub fn report_structures(model: &BackboneStructure, reference: &BackboneStructure) -> Result<MetricReport> {
    let g = gdt(model, reference)?;
    Ok(MetricReport {
        lddt: lddt(model, reference)?,
        gdt_ts: g.ts,
        gdt_ha: g.ha,
        rmsd: rmsd_after_superposition(&model.ca(), &reference.ca())?,
        fape: fape_structures(model, reference, &FapeOptions::default())?,
    })
}

pub fn report(pair: &DecoyPair) -> Result<MetricReport> {
    report_structures(&pair.decoy, &pair.reference)
}

/// Refined minus starting, component-wise.
pub fn delta(start: &MetricReport, refined: &MetricReport) -> DeltaReport {
    DeltaReport {
        delta_lddt: refined.lddt - start.lddt,
        delta_gdt_ts: refined.gdt_ts - start.gdt_ts,
        delta_gdt_ha: refined.gdt_ha - start.gdt_ha,
    }
}

/// One target: starting metrics and, when a refined model exists, signed deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub target_id: String,
    #[serde(flatten)]
    pub start: MetricReport,
    #[serde(flatten)]
    pub delta: DeltaReport,
}

pub const TSV_HEADER: &str =
    "target_id\tlddt\tgdt_ts\tgdt_ha\trmsd\tfape\tdelta_lddt\tdelta_gdt_ts\tdelta_gdt_ha";

/// Component-wise mean over rows, labelled `mean`.
pub fn mean_row(rows: &[ReportRow]) -> Option<ReportRow> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Some(ReportRow {
        target_id: "mean".to_string(),
        start: MetricReport {
            lddt: avg(&|r| r.start.lddt),
            gdt_ts: avg(&|r| r.start.gdt_ts),
            gdt_ha: avg(&|r| r.start.gdt_ha),
            rmsd: avg(&|r| r.start.rmsd),
            fape: avg(&|r| r.start.fape),
        },
        delta: DeltaReport {
            delta_lddt: avg(&|r| r.delta.delta_lddt),
            delta_gdt_ts: avg(&|r| r.delta.delta_gdt_ts),
            delta_gdt_ha: avg(&|r| r.delta.delta_gdt_ha),
        },
    })
}

/// TSV with the fixed header, one row per target, then the `mean` row.
pub fn rows_to_tsv(rows: &[ReportRow]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in rows.iter().chain(mean_row(rows).iter()) {
        writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:+.4}\t{:+.4}\t{:+.4}",
            r.target_id,
            r.start.lddt,
            r.start.gdt_ts,
            r.start.gdt_ha,
            r.start.rmsd,
            r.start.fape,
            r.delta.delta_lddt,
            r.delta.delta_gdt_ts,
            r.delta.delta_gdt_ha
        )
        .unwrap();
    }
    out
}

#[derive(Serialize)]
struct JsonReport<'a> {
    rows: &'a [ReportRow],
    mean: Option<ReportRow>,
}

pub fn rows_to_json(rows: &[ReportRow]) -> String {
    serde_json::to_string_pretty(&JsonReport {
        rows,
        mean: mean_row(rows),
    })
    .expect("report serializes")
}

/// Summary in the layout of a refinement benchmark table: the starting
/// averages, then one line of signed deltas per method.
pub fn summary_table(start: &MetricReport, methods: &[(&str, DeltaReport)]) -> String {
    let mut out = String::from("method\tgdt_ha\tgdt_ts\tlddt\n");
    writeln!(
        out,
        "starting\t{:.2}\t{:.2}\t{:.2}",
        start.gdt_ha, start.gdt_ts, start.lddt
    )
    .unwrap();
    for (name, d) in methods {
        writeln!(
            out,
            "{name}\t{:+.2}\t{:+.2}\t{:+.2}",
            d.delta_gdt_ha, d.delta_gdt_ts, d.delta_lddt
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{so3_exp, BackboneAtoms};
    use crate::structure::{make_synthetic, SyntheticKind};

    fn points() -> Vec<Vec3> {
        vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(3.8, 0.0, 0.0),
            Vec3::new(5.0, 3.0, 0.5),
            Vec3::new(4.0, 6.0, 2.0),
            Vec3::new(1.0, 7.0, 4.0),
        ]
    }

    #[test]
    fn kabsch_identity_and_rigid_copy() {
        let p = points();
        let all: Vec<usize> = (0..p.len()).collect();
        let (f, rmsd) = kabsch(&p, &p, &all).unwrap();
        assert!(rmsd < 1e-12);
        assert!((f.rot.matrix() - Matrix3::identity()).amax() < 1e-12);
        assert!(f.trans.amax() < 1e-12);

        let g = Frame::new(so3_exp(&Vec3::new(0.5, -1.0, 2.0)), Vec3::new(10.0, -3.0, 4.0));
        let moved: Vec<Vec3> = p.iter().map(|x| g.apply(x)).collect();
        let (f, rmsd) = kabsch(&moved, &p, &all).unwrap();
        assert!(rmsd < 1e-9);
        let ginv = g.invert();
        assert!((f.rot.matrix() - ginv.rot.matrix()).amax() < 1e-9);
        assert!((f.trans - ginv.trans).amax() < 1e-9);
    }

    #[test]
    fn kabsch_reflection_is_corrected() {
        let p = points();
        let mirrored: Vec<Vec3> = p.iter().map(|x| Vec3::new(x.x, x.y, -x.z)).collect();
        let all: Vec<usize> = (0..p.len()).collect();
        let (f, _) = kabsch(&mirrored, &p, &all).unwrap();
        assert!((f.rot.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kabsch_degenerate_subsets() {
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let all: Vec<usize> = (0..5).collect();
        assert!(matches!(kabsch(&line, &points(), &all), Err(Error::DegenerateSubset)));
        let same = vec![Vec3::new(1.0, 1.0, 1.0); 5];
        assert!(matches!(kabsch(&same, &points(), &all), Err(Error::DegenerateSubset)));
        assert!(matches!(kabsch(&points(), &points(), &[0, 1]), Err(Error::DegenerateSubset)));
    }

    fn ca_only(cas: &[Vec3]) -> BackboneStructure {
        // lDDT/GDT tests that only need Cα: other atoms offset rigidly.
        let atoms = cas
            .iter()
            .map(|c| {
                BackboneAtoms([
                    c + Vec3::new(-0.5, 1.3, 0.0),
                    *c,
                    c + Vec3::new(1.5, 0.0, 0.0),
                    c + Vec3::new(2.1, 1.0, 0.0),
                ])
            })
            .collect();
        BackboneStructure::from_atoms(&"A".repeat(cas.len()), atoms, "test").unwrap()
    }

    #[test]
    fn gdt_three_of_four() {
        let p = points()[..4].to_vec();
        let mut q = p.clone();
        q[3] += Vec3::new(100.0, 0.0, 0.0);
        // Hand enumeration: at every cutoff exactly residues 0..3 superpose, so
        // each fraction is 3/4 and both averages are 75.
        let g = gdt(&ca_only(&q), &ca_only(&p)).unwrap();
        assert!((g.ts - 75.0).abs() < 1e-12, "{g:?}");
        assert!((g.ha - 75.0).abs() < 1e-12, "{g:?}");
    }

    #[test]
    fn gdt_and_lddt_of_identical_and_moved_copies() {
        let s = make_synthetic(SyntheticKind::Helix, 20, 4).unwrap();
        let g = Frame::new(so3_exp(&Vec3::new(2.0, 0.3, -1.0)), Vec3::new(50.0, 0.0, -20.0));
        let moved = s.transformed(&g);
        for other in [&s, &moved] {
            let scores = gdt(other, &s).unwrap();
            assert_eq!((scores.ts, scores.ha), (100.0, 100.0));
            assert_eq!(lddt(other, &s).unwrap(), 100.0);
        }
        assert!(matches!(gdt(&ca_only(&points()[..3]), &ca_only(&points()[..3])), Err(Error::TooShort { .. })));
    }

    #[test]
    fn lddt_single_pair_stretched() {
        let far = |x: f64| {
            [
                Vec3::new(x, 0.0, 0.0),
                Vec3::new(x, 50.0, 0.0),
                Vec3::new(x, -50.0, 0.0),
            ]
        };
        // Only the two Cα atoms are within 15 Å of each other.
        let build = |ca2: f64| {
            let [n1, c1, o1] = far(-100.0);
            let [n2, c2, o2] = far(100.0);
            let atoms = vec![
                BackboneAtoms([n1, Vec3::zeros(), c1, o1]),
                BackboneAtoms([n2, Vec3::new(ca2, 0.0, 0.0), c2, o2]),
            ];
            BackboneStructure::from_atoms("AA", atoms, "pair").unwrap()
        };
        let reference = build(10.0);
        let pred = build(11.5);
        assert!((lddt(&pred, &reference).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn deltas_and_tables() {
        let start = MetricReport {
            lddt: 80.84,
            gdt_ts: 85.56,
            gdt_ha: 70.13,
            rmsd: 1.0,
            fape: 0.5,
        };
        assert_eq!(delta(&start, &start), DeltaReport::default());
        let refined = MetricReport {
            lddt: 80.96,
            gdt_ts: 85.70,
            gdt_ha: 70.22,
            ..start
        };
        let d = delta(&start, &refined);
        let table = summary_table(&start, &[("refined", d)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[1], "starting\t70.13\t85.56\t80.84");
        assert_eq!(lines[2], "refined\t+0.09\t+0.14\t+0.12");
    }

    #[test]
    fn tsv_header_and_mean_row() {
        let mk = |id: &str, l: f64| ReportRow {
            target_id: id.into(),
            start: MetricReport {
                lddt: l,
                gdt_ts: 2.0 * l,
                gdt_ha: l / 2.0,
                rmsd: 1.0,
                fape: 3.0,
            },
            delta: DeltaReport {
                delta_lddt: l / 10.0,
                delta_gdt_ts: -1.0,
                delta_gdt_ha: 0.0,
            },
        };
        let rows = vec![mk("a", 10.0), mk("b", 30.0)];
        let tsv = rows_to_tsv(&rows);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], TSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "mean\t20.0000\t40.0000\t10.0000\t1.0000\t3.0000\t+2.0000\t-1.0000\t+0.0000");
        let json: serde_json::Value = serde_json::from_str(&rows_to_json(&rows)).unwrap();
        assert_eq!(json["mean"]["lddt"], 20.0);
        assert_eq!(json["rows"][1]["target_id"], "b");
    }
}
