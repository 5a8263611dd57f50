//! Seeded random streams. Every consumer draws from its own ChaCha stream
//! derived from one user seed, so sub-commands compose reproducibly.

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geometry::{Rotation, Vec3};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Synthetic,
    Corrupt,
    Init,
    Train,
    Eval,
    Ancestral,
    Refine,
    Custom(u32),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Synthetic => 1,
            Stream::Corrupt => 2,
            Stream::Init => 3,
            Stream::Train => 4,
            Stream::Eval => 5,
            Stream::Ancestral => 6,
            Stream::Refine => 7,
            Stream::Custom(k) => 1000 + k as u64,
        }
    }
}

pub fn stream(seed: u64, label: Stream) -> StreamRng {
    substream(seed, label, 0)
}

/// Independent stream for item `index` (e.g. a manifest entry) under `label`.
pub fn substream(seed: u64, label: Stream, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((label.id() << 40) ^ index);
    rng
}

pub fn standard_normal3<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// Uniformly distributed direction on the unit sphere.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = standard_normal3(rng);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Haar-uniform rotation from a normalized Gaussian quaternion.
pub fn uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let q = Quaternion::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    let m = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    Rotation::from_matrix_unchecked(m)
}
