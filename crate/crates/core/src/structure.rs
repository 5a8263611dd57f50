//! Backbone structures: PDB subset I/O, synthetic helices and strands, and
//! decoy/reference manifests.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    atoms_from_frames, frames_from_backbone, AtomKind, BackboneAtoms, Frame, FrameSet,
    IdealTemplate, Vec3,
};

pub const AMINO_ACIDS: &str = "ACDEFGHIKLMNPQRSTVWY";

const THREE_LETTER: [(&str, char); 20] = [
    ("ALA", 'A'),
    ("CYS", 'C'),
    ("ASP", 'D'),
    ("GLU", 'E'),
    ("PHE", 'F'),
    ("GLY", 'G'),
    ("HIS", 'H'),
    ("ILE", 'I'),
    ("LYS", 'K'),
    ("LEU", 'L'),
    ("MET", 'M'),
    ("ASN", 'N'),
    ("PRO", 'P'),
    ("GLN", 'Q'),
    ("ARG", 'R'),
    ("SER", 'S'),
    ("THR", 'T'),
    ("VAL", 'V'),
    ("TRP", 'W'),
    ("TYR", 'Y'),
];

pub fn one_letter(code: &str) -> char {
    THREE_LETTER
        .iter()
        .find(|(three, _)| *three == code)
        .map_or('X', |&(_, one)| one)
}

pub fn three_letter(aa: char) -> &'static str {
    THREE_LETTER
        .iter()
        .find(|(_, one)| *one == aa)
        .map_or("UNK", |&(three, _)| three)
}

/// Index into the 21-letter alphabet (20 standard residues, then X).
pub fn aa_index(aa: char) -> usize {
    AMINO_ACIDS.find(aa).unwrap_or(20)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residue {
    pub seq_num: i32,
    pub icode: Option<char>,
    pub aa: char,
    pub atoms: BackboneAtoms,
}

impl Residue {
    fn order_key(&self) -> (i32, u32) {
        (self.seq_num, self.icode.map_or(0, |c| c as u32 + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneStructure {
    residues: Vec<Residue>,
    pub chain_id: String,
    pub source: String,
}

impl BackboneStructure {
    pub fn new(residues: Vec<Residue>, chain_id: impl Into<String>, source: impl Into<String>) -> Result<Self> {
        if residues.is_empty() {
            return Err(Error::EmptyStructure);
        }
        for (i, pair) in residues.windows(2).enumerate() {
            if pair[1].order_key() <= pair[0].order_key() {
                return Err(Error::InvalidStructure(format!(
                    "residue numbering not increasing at position {}",
                    i + 1
                )));
            }
        }
        if let Some(i) = residues.iter().position(|r| !r.atoms.is_finite()) {
            return Err(Error::InvalidStructure(format!(
                "non-finite coordinate in residue {i}"
            )));
        }
        Ok(BackboneStructure {
            residues,
            chain_id: chain_id.into(),
            source: source.into(),
        })
    }

    /// Builds residues numbered 1..=N from a sequence and per-residue atoms.
    pub fn from_atoms(sequence: &str, atoms: Vec<BackboneAtoms>, source: impl Into<String>) -> Result<Self> {
        let seq: Vec<char> = sequence.chars().collect();
        if seq.len() != atoms.len() {
            return Err(Error::LengthMismatch {
                expected: seq.len(),
                found: atoms.len(),
            });
        }
        let residues = seq
            .into_iter()
            .zip(atoms)
            .enumerate()
            .map(|(i, (aa, atoms))| Residue {
                seq_num: i as i32 + 1,
                icode: None,
                aa,
                atoms,
            })
            .collect();
        BackboneStructure::new(residues, "A", source)
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn residues(&self) -> &[Residue] {
        &self.residues
    }

    pub fn atoms(&self) -> Vec<BackboneAtoms> {
        self.residues.iter().map(|r| r.atoms).collect()
    }

    pub fn ca(&self) -> Vec<Vec3> {
        self.residues.iter().map(|r| *r.atoms.ca()).collect()
    }

    pub fn sequence(&self) -> String {
        self.residues.iter().map(|r| r.aa).collect()
    }

    pub fn frames(&self) -> Result<FrameSet> {
        frames_from_backbone(&self.atoms())
    }

    /// Same residues and metadata with replaced coordinates.
    pub fn with_atoms(&self, atoms: Vec<BackboneAtoms>) -> Result<Self> {
        if atoms.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                found: atoms.len(),
            });
        }
        let residues = self
            .residues
            .iter()
            .zip(atoms)
            .map(|(r, atoms)| Residue { atoms, ..r.clone() })
            .collect();
        BackboneStructure::new(residues, self.chain_id.clone(), self.source.clone())
    }

    /// Rebuilds all four atoms from frames and the ideal template.
    pub fn with_frames(&self, frames: &FrameSet, tpl: &IdealTemplate) -> Result<Self> {
        self.with_atoms(atoms_from_frames(frames, tpl))
    }

    pub fn transformed(&self, g: &Frame) -> Self {
        let mut out = self.clone();
        for r in &mut out.residues {
            r.atoms = r.atoms.transformed(g);
        }
        out
    }
}

/// A decoy and its reference with matching residues.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoyPair {
    pub decoy: BackboneStructure,
    pub reference: BackboneStructure,
    pub target_id: String,
}

impl DecoyPair {
    pub fn new(decoy: BackboneStructure, reference: BackboneStructure, target_id: impl Into<String>) -> Result<Self> {
        if decoy.len() != reference.len() {
            return Err(Error::LengthMismatch {
                expected: reference.len(),
                found: decoy.len(),
            });
        }
        if decoy.sequence() != reference.sequence() {
            return Err(Error::InvalidStructure(
                "decoy and reference sequences differ".to_string(),
            ));
        }
        Ok(DecoyPair {
            decoy,
            reference,
            target_id: target_id.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPdb {
    pub structure: BackboneStructure,
    /// Residues skipped because one or more backbone atoms were missing.
    pub dropped_residues: usize,
}

struct PendingResidue {
    key: (i32, Option<char>),
    aa: char,
    atoms: [Option<Vec3>; 4],
}

fn column(line: &str, start: usize, end: usize) -> &str {
    line.get(start..end.min(line.len())).unwrap_or("")
}

fn parse_coord(line: &str, start: usize, lineno: usize) -> Result<f64> {
    let field = column(line, start, start + 8).trim();
    field.parse::<f64>().map_err(|_| Error::Parse {
        line: lineno,
        message: format!("bad coordinate field {field:?}"),
    })
}

/// Reads N/CA/C/O ATOM records of one chain (the first one seen when `chain`
/// is `None`). Only the first model is read; altlocs other than blank or `A`
/// are skipped.
pub fn parse_pdb_backbone(text: &str, chain: Option<&str>, source: &str) -> Result<ParsedPdb> {
    let mut selected: Option<String> = chain.map(str::to_string);
    let mut pending: Vec<PendingResidue> = Vec::new();
    let mut seen_keys: HashSet<(i32, Option<char>)> = HashSet::new();

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM  ") {
            continue;
        }
        if line.len() < 54 {
            return Err(Error::Parse {
                line: lineno,
                message: "ATOM record shorter than 54 columns".to_string(),
            });
        }
        let chain_id = column(line, 21, 22).trim().to_string();
        match &selected {
            Some(c) if *c != chain_id => continue,
            Some(_) => {}
            None => selected = Some(chain_id.clone()),
        }
        let altloc = column(line, 16, 17);
        if !(altloc.trim().is_empty() || altloc == "A") {
            continue;
        }
        let Some(kind) = AtomKind::from_pdb_name(column(line, 12, 16).trim()) else {
            continue;
        };
        let seq_field = column(line, 22, 26).trim();
        let seq_num: i32 = seq_field.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad residue number {seq_field:?}"),
        })?;
        let icode = column(line, 26, 27).chars().next().filter(|c| *c != ' ');
        let pos = Vec3::new(
            parse_coord(line, 30, lineno)?,
            parse_coord(line, 38, lineno)?,
            parse_coord(line, 46, lineno)?,
        );
        let key = (seq_num, icode);
        let is_current = pending.last().is_some_and(|r| r.key == key);
        if !is_current {
            if !seen_keys.insert(key) {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("residue {seq_num}{} appears twice", icode.unwrap_or(' ')),
                });
            }
            pending.push(PendingResidue {
                key,
                aa: one_letter(column(line, 17, 20).trim()),
                atoms: [None; 4],
            });
        }
        let slot = &mut pending.last_mut().unwrap().atoms[kind.index()];
        if slot.is_none() {
            *slot = Some(pos);
        }
    }

    let total = pending.len();
    let residues: Vec<Residue> = pending
        .into_iter()
        .filter_map(|r| {
            let [Some(n), Some(ca), Some(c), Some(o)] = r.atoms else {
                return None;
            };
            Some(Residue {
                seq_num: r.key.0,
                icode: r.key.1,
                aa: r.aa,
                atoms: BackboneAtoms([n, ca, c, o]),
            })
        })
        .collect();
    let dropped_residues = total - residues.len();
    if residues.is_empty() {
        return Err(Error::EmptyStructure);
    }
    let structure = BackboneStructure::new(residues, selected.unwrap_or_default(), source)?;
    Ok(ParsedPdb {
        structure,
        dropped_residues,
    })
}

pub fn read_pdb(path: &Path) -> Result<ParsedPdb> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pdb_backbone(&text, None, &path.display().to_string())
}

/// Fixed-width ATOM records followed by TER and END.
pub fn write_pdb(s: &BackboneStructure) -> String {
    let mut out = String::new();
    let chain = s.chain_id.chars().next().unwrap_or('A');
    let mut serial = 1;
    for r in s.residues() {
        for kind in AtomKind::ALL {
            let p = r.atoms[kind];
            let element = &kind.pdb_name()[..1];
            writeln!(
                out,
                "ATOM  {serial:>5} {:<4} {:>3} {chain}{:>4}{}   {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}          {element:>2}",
                format!(" {}", kind.pdb_name()),
                three_letter(r.aa),
                r.seq_num,
                r.icode.unwrap_or(' '),
                p.x,
                p.y,
                p.z,
                1.0,
                0.0,
            )
            .unwrap();
            serial += 1;
        }
    }
    if let Some(last) = s.residues().last() {
        writeln!(
            out,
            "TER   {serial:>5}      {:>3} {chain}{:>4}{}",
            three_letter(last.aa),
            last.seq_num,
            last.icode.unwrap_or(' ')
        )
        .unwrap();
    }
    out.push_str("END\n");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Helix,
    Extended,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "helix" => Ok(SyntheticKind::Helix),
            "extended" | "strand" => Ok(SyntheticKind::Extended),
            other => Err(Error::InvalidConfig(format!("unknown structure kind {other:?}"))),
        }
    }
}

// Peptide-unit geometry joining consecutive template residues.
const PEPTIDE_C_N: f64 = 1.329;
const CA_C_N_ANGLE_DEG: f64 = 116.2;
const C_N_CA_ANGLE_DEG: f64 = 121.7;
const OMEGA_DEG: f64 = 180.0;

fn backbone_dihedrals(kind: SyntheticKind) -> (f64, f64) {
    match kind {
        SyntheticKind::Helix => (-57.8, -47.0),
        SyntheticKind::Extended => (-120.0, 130.0),
    }
}

/// Places `d` so that |cd| = `bond`, ∠bcd = `angle` and dihedral abcd = `torsion`.
fn place_atom(a: &Vec3, b: &Vec3, c: &Vec3, bond: f64, angle: f64, torsion: f64) -> Vec3 {
    let bc = (c - b).normalize();
    let n = (b - a).cross(&bc).normalize();
    let m = nalgebra::Matrix3::from_columns(&[bc, n.cross(&bc), n]);
    let d = Vec3::new(
        -bond * angle.cos(),
        bond * angle.sin() * torsion.cos(),
        bond * angle.sin() * torsion.sin(),
    );
    c + m * d
}

/// Ideal helix or extended strand built from template residues joined by
/// planar trans peptide bonds. The seed picks the sequence and a global pose.
pub fn make_synthetic(kind: SyntheticKind, n_res: usize, seed: u64) -> Result<BackboneStructure> {
    if !(2..=512).contains(&n_res) {
        return Err(Error::InvalidConfig(format!(
            "n_res must be in 2..=512, got {n_res}"
        )));
    }
    let tpl = IdealTemplate::default();
    let (phi, psi) = backbone_dihedrals(kind);
    let (phi, psi, omega) = (phi.to_radians(), psi.to_radians(), OMEGA_DEG.to_radians());
    let n_ca = tpl.n.norm();
    let ca_c = tpl.c.norm();
    let n_ca_c = (tpl.n.dot(&tpl.c) / (n_ca * ca_c)).acos();

    let mut chain: Vec<[Vec3; 3]> = vec![[tpl.n, tpl.ca, tpl.c]];
    for _ in 1..n_res {
        let [n0, ca0, c0] = *chain.last().unwrap();
        let n1 = place_atom(&n0, &ca0, &c0, PEPTIDE_C_N, CA_C_N_ANGLE_DEG.to_radians(), psi);
        let ca1 = place_atom(&ca0, &c0, &n1, n_ca, C_N_CA_ANGLE_DEG.to_radians(), omega);
        let c1 = place_atom(&c0, &n1, &ca1, ca_c, n_ca_c, phi);
        chain.push([n1, ca1, c1]);
    }

    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Synthetic);
    let pose = Frame::new(
        crate::rng::uniform_rotation(&mut rng),
        Vec3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        ),
    );
    let sequence: String = (0..n_res)
        .map(|_| AMINO_ACIDS.as_bytes()[rng.random_range(0..20)] as char)
        .collect();

    let placed: Vec<BackboneAtoms> = chain
        .iter()
        .map(|[n, ca, c]| BackboneAtoms([pose.apply(n), pose.apply(ca), pose.apply(c), Vec3::zeros()]))
        .collect();
    // Frames from N/Cα/C, then every atom (including O) from the template.
    let frames = frames_from_backbone(&placed)?;
    let name = match kind {
        SyntheticKind::Helix => "synthetic-helix",
        SyntheticKind::Extended => "synthetic-extended",
    };
    BackboneStructure::from_atoms(&sequence, atoms_from_frames(&frames, &tpl), format!("{name}-{seed}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoy_path: Option<PathBuf>,
    pub reference_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_path: Option<PathBuf>,
    pub split: Split,
}

impl ManifestEntry {
    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        self.decoy_path
            .iter()
            .chain(std::iter::once(&self.reference_path))
            .chain(self.refined_path.iter())
    }
}

/// Dataset manifest. Relative paths resolve against `base_dir`, the
/// directory containing the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let mut m: Manifest = serde_json::from_str(text)?;
        m.base_dir = base_dir.into();
        let mut problems = Vec::new();
        let mut ids = HashSet::new();
        for e in &m.entries {
            if !ids.insert(e.target_id.as_str()) {
                problems.push(format!("duplicate target_id {:?}", e.target_id));
            }
            let paths: Vec<&PathBuf> = e.paths().collect();
            let unique: HashSet<&PathBuf> = paths.iter().copied().collect();
            if unique.len() != paths.len() {
                problems.push(format!("{}: paths are not distinct", e.target_id));
            }
        }
        if problems.is_empty() {
            Ok(m)
        } else {
            Err(Error::Manifest {
                path: origin.to_path_buf(),
                problems,
            })
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Every referenced file must exist.
    pub fn validate_files(&self, origin: &Path) -> Result<()> {
        let problems: Vec<String> = self
            .entries
            .iter()
            .flat_map(|e| {
                e.paths()
                    .filter(|p| !self.resolve(p).is_file())
                    .map(|p| format!("{}: missing {}", e.target_id, p.display()))
                    .collect::<Vec<_>>()
            })
            .collect();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest {
                path: origin.to_path_buf(),
                problems,
            })
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Parses the manifest at `path` and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest::from_json(&text, base, path)?;
    m.validate_files(path)?;
    Ok(m)
}
