//! Point clouds, rigid motions, evaluation perturbations, and error metrics.

mod io;

pub use io::{read_cloud_bin, read_cloud_xyz, write_cloud_bin, write_cloud_xyz};

use crate::mathcore::{Mat3, Vec3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

/// Standard deviation of the per-coordinate Gaussian measurement noise.
pub const NOISE_SIGMA: f64 = 0.01;
/// Symmetric clipping bound applied to each noise component.
pub const NOISE_CLIP: f64 = 0.05;
/// Rotation error below which (strictly) a registration counts as a success.
pub const RECALL_ROT_DEG: f64 = 5.0;
/// Translation error below which (strictly) a registration counts as a success.
pub const RECALL_TRANS: f64 = 0.2;

/// Errors raised by geometry operations.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud needs at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("non-finite coordinate at point {0}")]
    NonFinitePoint(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty batch has no recall")]
    EmptyBatch,
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse failure: {0}")]
    Parse(String),
}

/// An ordered set of at least 3 finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    /// Validates and wraps the points; fails for fewer than 3 points or any
    /// non-finite coordinate.
    pub fn new(points: Vec<Vec3>) -> Result<PointCloud, GeometryError> {
        if points.len() < 3 {
            return Err(GeometryError::TooFewPoints { min: 3, got: points.len() });
        }
        for (i, p) in points.iter().enumerate() {
            if !p.is_finite() {
                return Err(GeometryError::NonFinitePoint(i));
            }
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.points.iter().fold(Vec3::ZERO, |a, &p| a + p);
        sum / self.points.len() as f64
    }

    /// Reorders points as `new[i] = old[perm[i]]`; `perm` must be a
    /// permutation of `0..len`.
    pub fn permuted(&self, perm: &[usize]) -> Result<PointCloud, GeometryError> {
        if perm.len() != self.points.len() {
            return Err(GeometryError::InvalidParameter(format!(
                "permutation length {} does not match cloud size {}",
                perm.len(),
                self.points.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        let mut pts = Vec::with_capacity(perm.len());
        for &i in perm {
            if i >= perm.len() || seen[i] {
                return Err(GeometryError::InvalidParameter("not a permutation".into()));
            }
            seen[i] = true;
            pts.push(self.points[i]);
        }
        Ok(PointCloud { points: pts })
    }
}

/// A proper rigid motion `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform =
        RigidTransform { rotation: Mat3::IDENTITY, translation: Vec3::ZERO };

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec3(p) + self.translation
    }

    /// `self` composed after `first`: the result maps `x` to
    /// `self(first(x))`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.matmul(&first.rotation),
            translation: self.rotation.mul_vec3(first.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -rt.mul_vec3(self.translation) }
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        self.rotation.is_rotation(tol) && self.translation.is_finite()
    }
}

/// Applies a rigid motion to every point of a cloud.
pub fn apply(p: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud { points: p.points.iter().map(|&x| t.apply_point(x)).collect() }
}

/// How the target cloud of an evaluation pair relates to the source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Target is a permuted rigid copy of the source.
    Clean,
    /// Clean plus independent clipped Gaussian jitter on both clouds.
    Noisy,
    /// Source and target are sampled independently from the same surface.
    IndependentlySampled,
    /// Both clouds are independently cropped before the motion is applied.
    PartialOverlap,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Clean => "clean",
            Scenario::Noisy => "noisy",
            Scenario::IndependentlySampled => "independent",
            Scenario::PartialOverlap => "partial",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Scenario, GeometryError> {
        match s {
            "clean" => Ok(Scenario::Clean),
            "noisy" => Ok(Scenario::Noisy),
            "independent" => Ok(Scenario::IndependentlySampled),
            "partial" => Ok(Scenario::PartialOverlap),
            other => Err(GeometryError::InvalidParameter(format!("unknown scenario '{other}'"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of the random perturbation protocol used to build registration
/// pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationSpec {
    /// Upper bound, in degrees, of each of the three sampled Euler angles.
    pub max_angle_deg: f64,
    /// Each translation component is drawn from `[-max_translation, max_translation]`.
    pub max_translation: f64,
    pub scenario: Scenario,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.max_angle_deg.is_finite() || !(0.0..=180.0).contains(&self.max_angle_deg) {
            return Err(GeometryError::InvalidParameter(format!(
                "max_angle_deg {} outside [0, 180]",
                self.max_angle_deg
            )));
        }
        if !self.max_translation.is_finite() || self.max_translation < 0.0 {
            return Err(GeometryError::InvalidParameter(format!(
                "max_translation {} must be non-negative",
                self.max_translation
            )));
        }
        Ok(())
    }
}

/// Rotation and translation error of an estimated transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegistrationErrors {
    pub rot_err_deg: f64,
    pub trans_err: f64,
}

/// Draws a ground-truth motion: Euler angles about x, y, z each uniform in
/// `[0, max_angle_deg]`, composed as `Rz * Ry * Rx`, and a translation with
/// components uniform in `[-max_translation, max_translation]`.
pub fn sample_transform(spec: &PerturbationSpec, rng: &mut impl Rng) -> RigidTransform {
    let a = spec.max_angle_deg.to_radians();
    let (alpha, beta, gamma) = if a > 0.0 {
        (rng.random_range(0.0..=a), rng.random_range(0.0..=a), rng.random_range(0.0..=a))
    } else {
        (0.0, 0.0, 0.0)
    };
    let rotation = Mat3::rot_z(gamma).matmul(&Mat3::rot_y(beta)).matmul(&Mat3::rot_x(alpha));
    let d = spec.max_translation;
    let translation = if d > 0.0 {
        Vec3::new(
            rng.random_range(-d..=d),
            rng.random_range(-d..=d),
            rng.random_range(-d..=d),
        )
    } else {
        Vec3::ZERO
    };
    RigidTransform { rotation, translation }
}

/// Adds clipped Gaussian noise (sigma [`NOISE_SIGMA`], clip [`NOISE_CLIP`])
/// independently to every coordinate.
pub fn jitter(p: &PointCloud, rng: &mut impl Rng) -> PointCloud {
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut draw = || normal.sample(rng).clamp(-NOISE_CLIP, NOISE_CLIP);
    let points = p
        .points
        .iter()
        .map(|&q| {
            let dx = draw();
            let dy = draw();
            let dz = draw();
            q + Vec3::new(dx, dy, dz)
        })
        .collect();
    PointCloud { points }
}

fn keep_count(n: usize, keep_ratio: f64) -> Result<usize, GeometryError> {
    if !keep_ratio.is_finite() || keep_ratio <= 0.0 || keep_ratio > 1.0 {
        return Err(GeometryError::InvalidParameter(format!(
            "keep_ratio {keep_ratio} outside (0, 1]"
        )));
    }
    // Never crop below the minimum cloud size.
    Ok(((keep_ratio * n as f64).floor() as usize).clamp(3, n))
}

/// Keeps `floor(keep_ratio * len)` points chosen by farthest point sampling
/// from a random start, in traversal order. The crop is deterministic given
/// the RNG state and never returns fewer than 3 points.
pub fn crop_partial(
    p: &PointCloud,
    keep_ratio: f64,
    rng: &mut impl Rng,
) -> Result<PointCloud, GeometryError> {
    let n = p.points.len();
    let keep = keep_count(n, keep_ratio)?;
    let start = rng.random_range(0..n);

    let mut dist2 = vec![f64::INFINITY; n];
    let mut picked = Vec::with_capacity(keep);
    let mut current = start;
    picked.push(p.points[current]);
    for _ in 1..keep {
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = (p.points[i] - p.points[current]).norm_sq();
            if d < dist2[i] {
                dist2[i] = d;
            }
            if dist2[i] > best_d {
                best_d = dist2[i];
                best = i;
            }
        }
        current = best;
        dist2[current] = f64::NEG_INFINITY;
        picked.push(p.points[current]);
    }
    Ok(PointCloud { points: picked })
}

/// Alternative crop: keeps the `floor(keep_ratio * len)` points with the
/// largest projection onto a random direction, preserving input order.
pub fn crop_halfspace(
    p: &PointCloud,
    keep_ratio: f64,
    rng: &mut impl Rng,
) -> Result<PointCloud, GeometryError> {
    let n = p.points.len();
    let keep = keep_count(n, keep_ratio)?;
    let dir = loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if let Some(u) = v.normalized(1e-9) {
            break u;
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        p.points[j]
            .dot(dir)
            .partial_cmp(&p.points[i].dot(dir))
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(PointCloud { points: kept.into_iter().map(|i| p.points[i]).collect() })
}

/// Angle of the relative rotation `R_gt^T R_est` in degrees and translation
/// error `|t_gt - t_est|`.
///
/// The angle comes from [`rotation_angle_deg`], whose atan2 form resolves
/// errors down to rounding level; the plain arccos of the trace bottoms out
/// near 2e-6 degrees and would mask sub-microdegree solver accuracy.
pub fn registration_errors(gt: &RigidTransform, est: &RigidTransform) -> RegistrationErrors {
    RegistrationErrors {
        rot_err_deg: crate::mathcore::rotation_angle_deg(&gt.rotation, &est.rotation),
        trans_err: (gt.translation - est.translation).norm(),
    }
}

/// Fraction of instances with rotation error strictly below
/// [`RECALL_ROT_DEG`] degrees and translation error strictly below
/// [`RECALL_TRANS`]. Errors on an empty batch.
pub fn recall(errors: &[RegistrationErrors]) -> Result<f64, GeometryError> {
    if errors.is_empty() {
        return Err(GeometryError::EmptyBatch);
    }
    let hits = errors
        .iter()
        .filter(|e| e.rot_err_deg < RECALL_ROT_DEG && e.trans_err < RECALL_TRANS)
        .count();
    Ok(hits as f64 / errors.len() as f64)
}

/// Uniform random permutation of `0..n` (Fisher-Yates).
pub fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}
