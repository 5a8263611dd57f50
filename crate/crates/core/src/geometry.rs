//! Rigid-frame algebra on SE(3).
//!
//! Rotations are stored as full 3×3 matrices. A [`Frame`] maps local
//! coordinates to global ones as `x = rot · y + trans`; residue frames are
//! built from N, Cα and C with Cα at the origin.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const SMALL_ANGLE: f64 = 1e-4;
const NEAR_PI: f64 = 1e-4;
const COLLINEAR_TOL: f64 = 1e-6;

/// Skew-symmetric matrix `[v]×` such that `[v]× w = v × w`.
pub fn hat(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] applied to the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix3<f64>", into = "Matrix3<f64>")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthogonality and determinant within [`Rotation::TOLERANCE`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let r = Rotation(m);
        if !m.iter().all(|x| x.is_finite()) || r.orthogonality_error() > Self::TOLERANCE {
            return Err(Error::InvalidStructure(
                "matrix is not orthogonal".to_string(),
            ));
        }
        if (m.determinant() - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::InvalidStructure(
                "rotation determinant is not +1".to_string(),
            ));
        }
        Ok(r)
    }

    /// Wraps a matrix without checking; callers guarantee it is a rotation
    /// up to floating-point drift.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Rotation about `axis` (need not be unit length) by `angle` radians.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        so3_exp(&(axis.normalize() * angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Rotation angle in [0, π].
    pub fn angle(&self) -> f64 {
        so3_log(self).norm()
    }

    /// Max-entry deviation of `mᵀm` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
    }

    /// Nearest proper rotation in the Frobenius sense.
    pub fn orthonormalized(&self) -> Self {
        let svd = self.0.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<&Rotation> for &Rotation {
    type Output = Rotation;

    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl TryFrom<Matrix3<f64>> for Rotation {
    type Error = Error;

    fn try_from(m: Matrix3<f64>) -> Result<Self> {
        Rotation::from_matrix(m)
    }
}

impl From<Rotation> for Matrix3<f64> {
    fn from(r: Rotation) -> Self {
        r.0
    }
}

/// Rodrigues' formula: rotation about `v/|v|` by `|v|` radians.
pub fn so3_exp(v: &Vec3) -> Rotation {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(v);
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Principal-branch logarithm; the result has norm in [0, π].
pub fn so3_log(r: &Rotation) -> Vec3 {
    let m = &r.0;
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = vee(m);
    let sin = w.norm();
    let theta = sin.atan2(cos);

    if theta < SMALL_ANGLE {
        // θ / sin θ ≈ 1 + θ²/6
        return w * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta < NEAR_PI {
        // (R + Rᵀ)/2 − cos θ · I = (1 − cos θ) · a aᵀ
        let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos;
        let outer = sym / (1.0 - cos);
        let k = (0..3)
            .max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)]))
            .unwrap();
        let mut axis: Vec3 = outer.column(k).into_owned();
        axis /= axis.norm();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    w * (theta / sin)
}

/// `exp(gamma · log(r))`: moves from the identity toward `r` along the geodesic.
pub fn geodesic_flow(gamma: f64, r: &Rotation) -> Rotation {
    so3_exp(&(so3_log(r) * gamma))
}

/// Partial derivatives `∂ exp(v) / ∂v_k` for k = 0, 1, 2.
pub fn so3_exp_jacobian(v: &Vec3) -> [Matrix3<f64>; 3] {
    let theta2 = v.norm_squared();
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2.sqrt() < 1e-5 {
        // exp(K) ≈ I + K + K²/2 + K³/6, differentiated term by term.
        let k = hat(v);
        return basis.map(|e| {
            let ek = hat(&e);
            ek + (ek * k + k * ek) * 0.5 + (ek * k * k + k * ek * k + k * k * ek) / 6.0
        });
    }
    let r = so3_exp(v).0;
    let k = hat(v);
    basis.map(|e| {
        let rhs = v.cross(&((Matrix3::identity() - r) * e));
        (k * v.dot(&e) + hat(&rhs)) * r / theta2
    })
}

/// A rigid transform: `x_global = rot · x_local + trans`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub rot: Rotation,
    pub trans: Vec3,
}

impl Frame {
    pub fn new(rot: Rotation, trans: Vec3) -> Self {
        Frame { rot, trans }
    }

    pub fn identity() -> Self {
        Frame::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(trans: Vec3) -> Self {
        Frame::new(Rotation::identity(), trans)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Frame) -> Frame {
        Frame::new(
            self.rot * other.rot,
            self.rot.apply(&other.trans) + self.trans,
        )
    }

    pub fn invert(&self) -> Frame {
        let inv = self.rot.inverse();
        Frame::new(inv, -inv.apply(&self.trans))
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rot.apply(x) + self.trans
    }

    /// Expresses a global point in this frame: `rotᵀ (x − trans)`.
    pub fn to_local(&self, x: &Vec3) -> Vec3 {
        self.rot.0.tr_mul(&(x - self.trans))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot.0);
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        h
    }
}

/// Free-function forms of the frame algebra.
pub fn compose(a: &Frame, b: &Frame) -> Frame {
    a.compose(b)
}

pub fn invert(f: &Frame) -> Frame {
    f.invert()
}

pub fn to_local(f: &Frame, x: &Vec3) -> Vec3 {
    f.to_local(x)
}

/// Per-residue rigid frames in residue order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Frame>", into = "Vec<Frame>")]
pub struct FrameSet(Vec<Frame>);

impl FrameSet {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyStructure);
        }
        if frames.iter().any(|f| !f.trans.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidStructure(
                "non-finite frame translation".to_string(),
            ));
        }
        Ok(FrameSet(frames))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.0
    }

    pub fn frames_mut(&mut self) -> &mut [Frame] {
        &mut self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Frame> {
        self.0.iter()
    }

    pub fn translations(&self) -> Vec<Vec3> {
        self.0.iter().map(|f| f.trans).collect()
    }

    /// Left-multiplies every frame by the global transform `g`.
    pub fn transformed(&self, g: &Frame) -> FrameSet {
        FrameSet(self.0.iter().map(|f| g.compose(f)).collect())
    }

    pub fn orthonormalized(&self) -> FrameSet {
        FrameSet(
            self.0
                .iter()
                .map(|f| Frame::new(f.rot.orthonormalized(), f.trans))
                .collect(),
        )
    }
}

impl std::ops::Index<usize> for FrameSet {
    type Output = Frame;

    fn index(&self, i: usize) -> &Frame {
        &self.0[i]
    }
}

impl TryFrom<Vec<Frame>> for FrameSet {
    type Error = Error;

    fn try_from(frames: Vec<Frame>) -> Result<Self> {
        FrameSet::new(frames)
    }
}

impl From<FrameSet> for Vec<Frame> {
    fn from(f: FrameSet) -> Self {
        f.0
    }
}

impl<'a> IntoIterator for &'a FrameSet {
    type Item = &'a Frame;
    type IntoIter = std::slice::Iter<'a, Frame>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AtomKind {
    N,
    CA,
    C,
    O,
}

impl AtomKind {
    pub const ALL: [AtomKind; 4] = [AtomKind::N, AtomKind::CA, AtomKind::C, AtomKind::O];

    pub fn pdb_name(self) -> &'static str {
        match self {
            AtomKind::N => "N",
            AtomKind::CA => "CA",
            AtomKind::C => "C",
            AtomKind::O => "O",
        }
    }

    pub fn from_pdb_name(name: &str) -> Option<Self> {
        match name {
            "N" => Some(AtomKind::N),
            "CA" => Some(AtomKind::CA),
            "C" => Some(AtomKind::C),
            "O" => Some(AtomKind::O),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Coordinates of the four backbone heavy atoms of one residue, ordered N, Cα, C, O.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneAtoms(pub [Vec3; 4]);

impl BackboneAtoms {
    pub fn get(&self, kind: AtomKind) -> &Vec3 {
        &self.0[kind.index()]
    }

    pub fn n(&self) -> &Vec3 {
        &self.0[0]
    }

    pub fn ca(&self) -> &Vec3 {
        &self.0[1]
    }

    pub fn c(&self) -> &Vec3 {
        &self.0[2]
    }

    pub fn o(&self) -> &Vec3 {
        &self.0[3]
    }

    pub fn transformed(&self, g: &Frame) -> BackboneAtoms {
        BackboneAtoms(self.0.map(|x| g.apply(&x)))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.iter().all(|c| c.is_finite()))
    }
}

impl std::ops::Index<AtomKind> for BackboneAtoms {
    type Output = Vec3;

    fn index(&self, kind: AtomKind) -> &Vec3 {
        &self.0[kind.index()]
    }
}

/// Idealized backbone atom positions in the local residue frame (Cα at origin,
/// C on +x, N in the xy-plane with y > 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdealTemplate {
    pub n: Vec3,
    pub ca: Vec3,
    pub c: Vec3,
    pub o: Vec3,
}

impl IdealTemplate {
    pub const N: [f64; 3] = [-0.572, 1.337, 0.0];
    pub const C: [f64; 3] = [1.517, 0.0, 0.0];
    pub const C_O_BOND: f64 = 1.231;
    pub const CA_C_O_ANGLE_DEG: f64 = 120.5;

    pub fn atoms(&self) -> [Vec3; 4] {
        [self.n, self.ca, self.c, self.o]
    }

    pub fn get(&self, kind: AtomKind) -> Vec3 {
        self.atoms()[kind.index()]
    }

    /// Template atoms placed by frame `f`.
    pub fn place(&self, f: &Frame) -> BackboneAtoms {
        BackboneAtoms(self.atoms().map(|x| f.apply(&x)))
    }
}

impl Default for IdealTemplate {
    fn default() -> Self {
        let c = Vec3::from(Self::C);
        // O lies in the frame plane on the +y side, Cα–C–O angle fixed.
        let angle = Self::CA_C_O_ANGLE_DEG.to_radians();
        let dir = Vec3::new(-angle.cos(), angle.sin(), 0.0);
        IdealTemplate {
            n: Vec3::from(Self::N),
            ca: Vec3::zeros(),
            c,
            o: c + dir * Self::C_O_BOND,
        }
    }
}

/// Frame of one residue by Gram–Schmidt on (C − Cα) and (N − Cα).
pub fn frame_from_atoms(n: &Vec3, ca: &Vec3, c: &Vec3) -> Option<Frame> {
    let v1 = c - ca;
    let v2 = n - ca;
    let (l1, l2) = (v1.norm(), v2.norm());
    if !(l1 > COLLINEAR_TOL && l2 > COLLINEAR_TOL) {
        return None;
    }
    let e1 = v1 / l1;
    if e1.cross(&(v2 / l2)).norm() < COLLINEAR_TOL {
        return None;
    }
    let u2 = v2 - e1 * e1.dot(&v2);
    let e2 = u2.normalize();
    let e3 = e1.cross(&e2);
    let rot = Rotation(Matrix3::from_columns(&[e1, e2, e3]));
    Some(Frame::new(rot, *ca))
}

pub fn frames_from_backbone(atoms: &[BackboneAtoms]) -> Result<FrameSet> {
    let frames = atoms
        .iter()
        .enumerate()
        .map(|(index, a)| {
            frame_from_atoms(a.n(), a.ca(), a.c()).ok_or(Error::DegenerateResidue { index })
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSet::new(frames)
}

pub fn atoms_from_frames(frames: &FrameSet, tpl: &IdealTemplate) -> Vec<BackboneAtoms> {
    frames.iter().map(|f| tpl.place(f)).collect()
}
