//! Procedural solid models with exact occupancy queries.
//!
//! A [`ShapeModel`] is a short list of posed primitives folded left to right
//! with union and difference operators. Signed distance functions of the
//! primitives are exact; boolean composition uses `min` for union and
//! `max(a, -b)` for difference, which keeps the inside test (`sdf <= 0`)
//! exact even though the composed value is no longer a true distance away
//! from the surface. Shapes are normalized to fit in the unit ball, so the
//! registration protocol's rotation and translation magnitudes are
//! comparable across models.

mod io;

pub use io::{read_shape, read_shape_set, write_shape, write_shape_set};

use crate::geometry::PointCloud;
use crate::mathcore::{Mat3, Vec3};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Accepted deviation of a surface sample's composed signed distance.
pub const SURFACE_TOL: f64 = 1e-9;
/// Near-surface occupancy queries are offset by at most this distance.
pub const QUERY_BAND: f64 = 0.05;
/// Uniform occupancy queries are drawn from this centered cube half-width.
pub const QUERY_BOX_HALF: f64 = 1.1;

const MIN_NODES: usize = 2;
const MAX_NODES: usize = 5;

#[derive(Debug, Error)]
pub enum ShapesError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("surface sampling stalled: {0}")]
    SamplingStalled(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse failure: {0}")]
    Parse(String),
}

/// Solid primitive in its local frame, centered at the origin.
///
/// Capsules and cylinders extend along the local z axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrimitiveKind {
    Sphere { radius: f64 },
    Cuboid { half_extents: Vec3 },
    Capsule { half_height: f64, radius: f64 },
    Cylinder { half_height: f64, radius: f64 },
}

impl PrimitiveKind {
    fn keyword(&self) -> &'static str {
        match self {
            PrimitiveKind::Sphere { .. } => "sphere",
            PrimitiveKind::Cuboid { .. } => "box",
            PrimitiveKind::Capsule { .. } => "capsule",
            PrimitiveKind::Cylinder { .. } => "cylinder",
        }
    }

    fn validate(&self) -> Result<(), ShapesError> {
        let ok = match *self {
            PrimitiveKind::Sphere { radius } => radius.is_finite() && radius > 0.0,
            PrimitiveKind::Cuboid { half_extents: h } => {
                h.is_finite() && h.x > 0.0 && h.y > 0.0 && h.z > 0.0
            }
            PrimitiveKind::Capsule { half_height, radius }
            | PrimitiveKind::Cylinder { half_height, radius } => {
                half_height.is_finite() && half_height > 0.0 && radius.is_finite() && radius > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ShapesError::InvalidShape(format!("non-positive or non-finite size in {self:?}")))
        }
    }

    /// Exact signed distance in the local frame.
    fn sdf_local(&self, q: Vec3) -> f64 {
        match *self {
            PrimitiveKind::Sphere { radius } => q.norm() - radius,
            PrimitiveKind::Cuboid { half_extents: h } => {
                let d = q.abs() - h;
                let outside = Vec3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0)).norm();
                let inside = d.x.max(d.y).max(d.z).min(0.0);
                outside + inside
            }
            PrimitiveKind::Capsule { half_height, radius } => {
                let cz = q.z.clamp(-half_height, half_height);
                Vec3::new(q.x, q.y, q.z - cz).norm() - radius
            }
            PrimitiveKind::Cylinder { half_height, radius } => {
                let dr = (q.x * q.x + q.y * q.y).sqrt() - radius;
                let dz = q.z.abs() - half_height;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                let inside = dr.max(dz).min(0.0);
                outside + inside
            }
        }
    }

    fn surface_area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            PrimitiveKind::Sphere { radius } => 4.0 * PI * radius * radius,
            PrimitiveKind::Cuboid { half_extents: h } => {
                8.0 * (h.x * h.y + h.y * h.z + h.z * h.x)
            }
            PrimitiveKind::Capsule { half_height, radius } => {
                4.0 * PI * radius * half_height + 4.0 * PI * radius * radius
            }
            PrimitiveKind::Cylinder { half_height, radius } => {
                4.0 * PI * radius * half_height + 2.0 * PI * radius * radius
            }
        }
    }

    /// Area-uniform point on the local surface.
    fn sample_surface_local(&self, rng: &mut impl Rng) -> Vec3 {
        use std::f64::consts::TAU;
        match *self {
            PrimitiveKind::Sphere { radius } => unit_direction(rng) * radius,
            PrimitiveKind::Cuboid { half_extents: h } => {
                let areas = [h.y * h.z, h.y * h.z, h.x * h.z, h.x * h.z, h.x * h.y, h.x * h.y];
                let face = weighted_index(&areas, rng);
                let u = rng.random_range(-1.0..=1.0);
                let v = rng.random_range(-1.0..=1.0);
                match face {
                    0 => Vec3::new(h.x, u * h.y, v * h.z),
                    1 => Vec3::new(-h.x, u * h.y, v * h.z),
                    2 => Vec3::new(u * h.x, h.y, v * h.z),
                    3 => Vec3::new(u * h.x, -h.y, v * h.z),
                    4 => Vec3::new(u * h.x, v * h.y, h.z),
                    _ => Vec3::new(u * h.x, v * h.y, -h.z),
                }
            }
            PrimitiveKind::Capsule { half_height, radius } => {
                let side = 4.0 * std::f64::consts::PI * radius * half_height;
                let caps = 4.0 * std::f64::consts::PI * radius * radius;
                if rng.random_range(0.0..side + caps) < side {
                    let phi = rng.random_range(0.0..TAU);
                    let z = rng.random_range(-half_height..=half_height);
                    Vec3::new(radius * phi.cos(), radius * phi.sin(), z)
                } else {
                    // Sphere point split into two hemispherical end caps.
                    let p = unit_direction(rng) * radius;
                    let shift = if p.z >= 0.0 { half_height } else { -half_height };
                    Vec3::new(p.x, p.y, p.z + shift)
                }
            }
            PrimitiveKind::Cylinder { half_height, radius } => {
                use std::f64::consts::PI;
                let side = 4.0 * PI * radius * half_height;
                let cap = PI * radius * radius;
                let pick = rng.random_range(0.0..side + 2.0 * cap);
                if pick < side {
                    let phi = rng.random_range(0.0..TAU);
                    let z = rng.random_range(-half_height..=half_height);
                    Vec3::new(radius * phi.cos(), radius * phi.sin(), z)
                } else {
                    let z = if pick < side + cap { half_height } else { -half_height };
                    let rho = radius * rng.random_range(0.0f64..=1.0).sqrt();
                    let phi = rng.random_range(0.0..TAU);
                    Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
                }
            }
        }
    }

    fn scaled(&self, s: f64) -> PrimitiveKind {
        match *self {
            PrimitiveKind::Sphere { radius } => PrimitiveKind::Sphere { radius: radius * s },
            PrimitiveKind::Cuboid { half_extents } => {
                PrimitiveKind::Cuboid { half_extents: half_extents * s }
            }
            PrimitiveKind::Capsule { half_height, radius } => {
                PrimitiveKind::Capsule { half_height: half_height * s, radius: radius * s }
            }
            PrimitiveKind::Cylinder { half_height, radius } => {
                PrimitiveKind::Cylinder { half_height: half_height * s, radius: radius * s }
            }
        }
    }
}

/// A primitive with a rigid pose: local point `q` maps to
/// `rotation * q + center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub rotation: Mat3,
    pub center: Vec3,
}

impl Primitive {
    fn to_local(&self, p: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec3(p - self.center)
    }

    /// Exact signed distance of the posed primitive.
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.kind.sdf_local(self.to_local(p))
    }

    pub fn validate(&self) -> Result<(), ShapesError> {
        self.kind.validate()?;
        if !self.center.is_finite() {
            return Err(ShapesError::InvalidShape("non-finite center".into()));
        }
        if !self.rotation.is_rotation(1e-6) {
            return Err(ShapesError::InvalidShape("pose rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// Exact upper bound of `|x|` over the primitive's surface.
    fn max_norm(&self) -> f64 {
        match self.kind {
            PrimitiveKind::Sphere { radius } => self.center.norm() + radius,
            PrimitiveKind::Cuboid { half_extents: h } => {
                let mut best = 0.0f64;
                for sx in [-1.0, 1.0] {
                    for sy in [-1.0, 1.0] {
                        for sz in [-1.0, 1.0] {
                            let corner = self.center
                                + self.rotation.mul_vec3(Vec3::new(sx * h.x, sy * h.y, sz * h.z));
                            best = best.max(corner.norm());
                        }
                    }
                }
                best
            }
            PrimitiveKind::Capsule { half_height, radius } => {
                let axis = self.rotation.mul_vec3(Vec3::new(0.0, 0.0, half_height));
                (self.center + axis).norm().max((self.center - axis).norm()) + radius
            }
            PrimitiveKind::Cylinder { half_height, radius } => {
                let ex = self.rotation.col(0);
                let ey = self.rotation.col(1);
                let ez = self.rotation.col(2);
                let mut best = 0.0f64;
                for sign in [-1.0, 1.0] {
                    let b = self.center + ez * (sign * half_height);
                    let rho = (b.dot(ex).powi(2) + b.dot(ey).powi(2)).sqrt();
                    best = best.max((b.norm_sq() + radius * radius + 2.0 * radius * rho).sqrt());
                }
                best
            }
        }
    }

    fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        self.rotation.mul_vec3(self.kind.sample_surface_local(rng)) + self.center
    }

    fn scaled(&self, s: f64) -> Primitive {
        Primitive { kind: self.kind.scaled(s), rotation: self.rotation, center: self.center * s }
    }
}

/// Set operator combining a node with everything to its left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoolOp {
    Union,
    Difference,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeNode {
    pub op: BoolOp,
    pub primitive: Primitive,
}

/// A solid model: nodes folded left to right, first node unioned onto the
/// empty set. Between 2 and 5 nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    nodes: Vec<ShapeNode>,
}

/// A query position with its ground-truth occupancy label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OccupancySample {
    pub position: Vec3,
    pub label: u8,
}

impl ShapeModel {
    pub fn new(nodes: Vec<ShapeNode>) -> Result<ShapeModel, ShapesError> {
        if nodes.len() < MIN_NODES || nodes.len() > MAX_NODES {
            return Err(ShapesError::InvalidShape(format!(
                "node count {} outside [{MIN_NODES}, {MAX_NODES}]",
                nodes.len()
            )));
        }
        if nodes[0].op != BoolOp::Union {
            return Err(ShapesError::InvalidShape("first node must be a union".into()));
        }
        for n in &nodes {
            n.primitive.validate()?;
        }
        Ok(ShapeModel { nodes })
    }

    pub fn nodes(&self) -> &[ShapeNode] {
        &self.nodes
    }

    /// Composed signed value: negative or zero inside, positive outside.
    pub fn sdf(&self, p: Vec3) -> f64 {
        let mut d = self.nodes[0].primitive.sdf(p);
        for n in &self.nodes[1..] {
            let dn = n.primitive.sdf(p);
            d = match n.op {
                BoolOp::Union => d.min(dn),
                BoolOp::Difference => d.max(-dn),
            };
        }
        d
    }

    /// Scales the whole model about the origin.
    fn scaled(&self, s: f64) -> ShapeModel {
        ShapeModel {
            nodes: self
                .nodes
                .iter()
                .map(|n| ShapeNode { op: n.op, primitive: n.primitive.scaled(s) })
                .collect(),
        }
    }

    /// Exact upper bound of `|x|` over the model surface (the carved surface
    /// of a difference node lies inside the union of the positive nodes, so
    /// only union nodes extend the bound).
    fn max_norm_bound(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|n| n.op == BoolOp::Union)
            .map(|n| n.primitive.max_norm())
            .fold(0.0, f64::max)
    }
}

/// `1` iff the composed signed distance at `p` is non-positive.
pub fn occupancy(m: &ShapeModel, p: Vec3) -> u8 {
    u8::from(m.sdf(p) <= 0.0)
}

fn unit_direction(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if let Some(u) = v.normalized(1e-9) {
            return u;
        }
    }
}

fn weighted_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            return i;
        }
        pick -= w;
    }
    weights.len() - 1
}

/// Draws `n >= 3` points on the model surface, approximately area-uniform.
///
/// Candidates are drawn area-uniformly on individual primitive surfaces and
/// kept when they lie on the composed surface (|sdf| <= [`SURFACE_TOL`]), so
/// buried or carved-away patches are rejected. Fails when the acceptance
/// rate collapses, which indicates a degenerate composition.
pub fn sample_surface(
    m: &ShapeModel,
    n: usize,
    rng: &mut impl Rng,
) -> Result<PointCloud, ShapesError> {
    if n < 3 {
        return Err(ShapesError::InvalidParameter(format!("need at least 3 samples, got {n}")));
    }
    let areas: Vec<f64> = m.nodes.iter().map(|nd| nd.primitive.kind.surface_area()).collect();
    let mut points = Vec::with_capacity(n);
    let budget = 1000 * n;
    let mut attempts = 0usize;
    while points.len() < n {
        if attempts >= budget {
            return Err(ShapesError::SamplingStalled(format!(
                "{} of {n} accepted after {attempts} draws",
                points.len()
            )));
        }
        attempts += 1;
        let node = weighted_index(&areas, rng);
        let p = m.nodes[node].primitive.sample_surface(rng);
        if m.sdf(p).abs() <= SURFACE_TOL {
            points.push(p);
        }
    }
    PointCloud::new(points).map_err(|e| ShapesError::InvalidShape(e.to_string()))
}

/// Draws `n >= 1` labeled occupancy queries: the first `n - n/2` uniform in
/// the cube of half-width [`QUERY_BOX_HALF`], the remaining `n/2` offset
/// from surface points by at most [`QUERY_BAND`].
pub fn sample_queries(
    m: &ShapeModel,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<OccupancySample>, ShapesError> {
    if n == 0 {
        return Err(ShapesError::InvalidParameter("need at least 1 query".into()));
    }
    let near = n / 2;
    let uniform = n - near;
    let mut out = Vec::with_capacity(n);
    for _ in 0..uniform {
        let p = Vec3::new(
            rng.random_range(-QUERY_BOX_HALF..=QUERY_BOX_HALF),
            rng.random_range(-QUERY_BOX_HALF..=QUERY_BOX_HALF),
            rng.random_range(-QUERY_BOX_HALF..=QUERY_BOX_HALF),
        );
        out.push(OccupancySample { position: p, label: occupancy(m, p) });
    }
    if near > 0 {
        let anchors = sample_surface(m, near.max(3), rng)?;
        for i in 0..near {
            let p = anchors.points()[i] + unit_direction(rng) * rng.random_range(0.0..=QUERY_BAND);
            out.push(OccupancySample { position: p, label: occupancy(m, p) });
        }
    }
    Ok(out)
}

/// Draws one random normalized shape. Retries internally until the candidate
/// passes validation (surface samplable, fits the unit ball, has volume).
pub fn generate_shape(rng: &mut impl Rng) -> Result<ShapeModel, ShapesError> {
    for _ in 0..64 {
        let candidate = random_shape_candidate(rng);
        let bound = candidate.max_norm_bound();
        if !(bound.is_finite() && bound > 1e-6) {
            continue;
        }
        let shape = candidate.scaled(1.0 / bound);
        if validate_generated(&shape, rng) {
            return Ok(shape);
        }
    }
    Err(ShapesError::SamplingStalled("no valid shape after 64 attempts".into()))
}

/// Draws `count` normalized shapes.
pub fn generate_dataset(count: usize, rng: &mut impl Rng) -> Result<Vec<ShapeModel>, ShapesError> {
    (0..count).map(|_| generate_shape(rng)).collect()
}

fn random_shape_candidate(rng: &mut impl Rng) -> ShapeModel {
    let n_nodes = rng.random_range(MIN_NODES..=MAX_NODES);
    let mut nodes = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let op = if i == 0 || rng.random_range(0.0..1.0) < 0.75 {
            BoolOp::Union
        } else {
            BoolOp::Difference
        };
        let kind = match rng.random_range(0..4) {
            0 => PrimitiveKind::Sphere { radius: rng.random_range(0.25..0.6) },
            1 => PrimitiveKind::Cuboid {
                half_extents: Vec3::new(
                    rng.random_range(0.2..0.6),
                    rng.random_range(0.2..0.6),
                    rng.random_range(0.2..0.6),
                ),
            },
            2 => PrimitiveKind::Capsule {
                half_height: rng.random_range(0.2..0.6),
                radius: rng.random_range(0.15..0.45),
            },
            _ => PrimitiveKind::Cylinder {
                half_height: rng.random_range(0.2..0.6),
                radius: rng.random_range(0.15..0.45),
            },
        };
        let axis = unit_direction(rng);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let center = Vec3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        nodes.push(ShapeNode {
            op,
            primitive: Primitive { kind, rotation: Mat3::from_axis_angle(axis, angle), center },
        });
    }
    ShapeModel { nodes }
}

fn validate_generated(shape: &ShapeModel, rng: &mut impl Rng) -> bool {
    // Must have interior volume left after carving.
    let mut inside = 0;
    for _ in 0..256 {
        let p = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        inside += occupancy(shape, p) as usize;
    }
    if inside < 4 {
        return false;
    }
    // Surface must be samplable and stay in the unit ball.
    match sample_surface(shape, 128, rng) {
        Ok(cloud) => cloud.points().iter().all(|p| p.norm() <= 1.0 + 1e-9),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn posed(kind: PrimitiveKind, rng: &mut ChaCha8Rng) -> Primitive {
        let axis = unit_direction(rng);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        Primitive {
            kind,
            rotation: Mat3::from_axis_angle(axis, angle),
            center: Vec3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            ),
        }
    }

    #[test]
    fn primitive_sdf_hand_cases() {
        let s = PrimitiveKind::Sphere { radius: 2.0 };
        assert!((s.sdf_local(Vec3::new(3.0, 0.0, 0.0)) - 1.0).abs() < 1e-15);
        assert!((s.sdf_local(Vec3::ZERO) + 2.0).abs() < 1e-15);

        let b = PrimitiveKind::Cuboid { half_extents: Vec3::new(1.0, 2.0, 3.0) };
        assert!((b.sdf_local(Vec3::new(2.0, 0.0, 0.0)) - 1.0).abs() < 1e-15);
        assert!((b.sdf_local(Vec3::new(2.0, 3.0, 0.0)) - 2f64.sqrt()).abs() < 1e-15);
        assert!((b.sdf_local(Vec3::new(0.0, 0.0, 0.0)) + 1.0).abs() < 1e-15);

        let c = PrimitiveKind::Capsule { half_height: 1.0, radius: 0.5 };
        assert!((c.sdf_local(Vec3::new(0.0, 0.0, 2.0)) - 0.5).abs() < 1e-15);
        assert!((c.sdf_local(Vec3::new(0.5, 0.0, 0.3)) - 0.0).abs() < 1e-15);

        let cy = PrimitiveKind::Cylinder { half_height: 1.0, radius: 0.5 };
        assert!((cy.sdf_local(Vec3::new(0.0, 0.0, 1.5)) - 0.5).abs() < 1e-15);
        assert!((cy.sdf_local(Vec3::new(1.5, 0.0, 2.0)) - 2f64.sqrt()).abs() < 1e-15);
        assert!(cy.sdf_local(Vec3::new(0.2, 0.0, 0.5)) < 0.0);
    }

    #[test]
    fn posed_sdf_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5a);
        for _ in 0..20 {
            let kinds = [
                PrimitiveKind::Sphere { radius: 0.4 },
                PrimitiveKind::Cuboid { half_extents: Vec3::new(0.3, 0.2, 0.5) },
                PrimitiveKind::Capsule { half_height: 0.4, radius: 0.2 },
                PrimitiveKind::Cylinder { half_height: 0.3, radius: 0.25 },
            ];
            for kind in kinds {
                let prim = posed(kind, &mut rng);
                let q = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let world = prim.rotation.mul_vec3(q) + prim.center;
                assert!((prim.sdf(world) - kind.sdf_local(q)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn union_and_difference_membership() {
        let a = Primitive {
            kind: PrimitiveKind::Sphere { radius: 0.5 },
            rotation: Mat3::IDENTITY,
            center: Vec3::ZERO,
        };
        let b = Primitive {
            kind: PrimitiveKind::Sphere { radius: 0.3 },
            rotation: Mat3::IDENTITY,
            center: Vec3::new(0.4, 0.0, 0.0),
        };
        let union = ShapeModel::new(vec![
            ShapeNode { op: BoolOp::Union, primitive: a },
            ShapeNode { op: BoolOp::Union, primitive: b },
        ])
        .unwrap();
        let diff = ShapeModel::new(vec![
            ShapeNode { op: BoolOp::Union, primitive: a },
            ShapeNode { op: BoolOp::Difference, primitive: b },
        ])
        .unwrap();

        // In a only, in b only, in both, in neither.
        let pa = Vec3::new(-0.4, 0.0, 0.0);
        let pb = Vec3::new(0.65, 0.0, 0.0);
        let pab = Vec3::new(0.3, 0.0, 0.0);
        let pn = Vec3::new(0.0, 0.9, 0.0);
        assert_eq!(occupancy(&union, pa), 1);
        assert_eq!(occupancy(&union, pb), 1);
        assert_eq!(occupancy(&union, pab), 1);
        assert_eq!(occupancy(&union, pn), 0);
        assert_eq!(occupancy(&diff, pa), 1);
        assert_eq!(occupancy(&diff, pb), 0);
        assert_eq!(occupancy(&diff, pab), 0);
        assert_eq!(occupancy(&diff, pn), 0);
    }

    #[test]
    fn shape_validation_rules() {
        let a = Primitive {
            kind: PrimitiveKind::Sphere { radius: 0.5 },
            rotation: Mat3::IDENTITY,
            center: Vec3::ZERO,
        };
        let node = |op| ShapeNode { op, primitive: a };
        assert!(matches!(
            ShapeModel::new(vec![node(BoolOp::Union)]),
            Err(ShapesError::InvalidShape(_))
        ));
        assert!(matches!(
            ShapeModel::new(vec![node(BoolOp::Union); 6]),
            Err(ShapesError::InvalidShape(_))
        ));
        assert!(matches!(
            ShapeModel::new(vec![node(BoolOp::Difference), node(BoolOp::Union)]),
            Err(ShapesError::InvalidShape(_))
        ));
        let bad = Primitive { kind: PrimitiveKind::Sphere { radius: -1.0 }, ..a };
        assert!(matches!(
            ShapeModel::new(vec![node(BoolOp::Union), ShapeNode { op: BoolOp::Union, primitive: bad }]),
            Err(ShapesError::InvalidShape(_))
        ));
    }

    #[test]
    fn surface_samples_lie_on_composed_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5f);
        for _ in 0..5 {
            let shape = generate_shape(&mut rng).unwrap();
            let cloud = sample_surface(&shape, 400, &mut rng).unwrap();
            for p in cloud.points() {
                assert!(shape.sdf(*p).abs() <= SURFACE_TOL);
                assert!(p.norm() <= 1.0 + 1e-9, "surface point outside unit ball");
            }
        }
    }

    #[test]
    fn generated_shapes_are_deterministic_per_seed_and_distinct_across_seeds() {
        let mut a = ChaCha8Rng::seed_from_u64(1000);
        let mut b = ChaCha8Rng::seed_from_u64(1000);
        let mut c = ChaCha8Rng::seed_from_u64(2000);
        let da = generate_dataset(6, &mut a).unwrap();
        let db = generate_dataset(6, &mut b).unwrap();
        let dc = generate_dataset(6, &mut c).unwrap();
        assert_eq!(da, db);
        assert_ne!(da, dc);
    }

    #[test]
    fn queries_split_uniform_and_near_surface_with_consistent_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
        let shape = generate_shape(&mut rng).unwrap();
        let n = 301;
        let qs = sample_queries(&shape, n, &mut rng).unwrap();
        assert_eq!(qs.len(), n);
        let uniform = n - n / 2;
        for (i, q) in qs.iter().enumerate() {
            assert_eq!(q.label, occupancy(&shape, q.position), "label mismatch at {i}");
            if i < uniform {
                let a = q.position.abs();
                assert!(a.x <= QUERY_BOX_HALF && a.y <= QUERY_BOX_HALF && a.z <= QUERY_BOX_HALF);
            } else {
                // Near-surface points sit within the band of the unit ball.
                assert!(q.position.norm() <= 1.0 + QUERY_BAND + 1e-9);
            }
        }
        // Some queries must fall on each side for cross-entropy training to
        // say anything.
        let pos: usize = qs.iter().map(|q| q.label as usize).sum();
        assert!(pos >= n / 10 && pos <= 9 * n / 10, "degenerate label balance: {pos}/{n}");
    }

    #[test]
    fn query_count_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x77);
        let shape = generate_shape(&mut rng).unwrap();
        assert!(matches!(
            sample_queries(&shape, 0, &mut rng),
            Err(ShapesError::InvalidParameter(_))
        ));
        assert!(matches!(
            sample_surface(&shape, 2, &mut rng),
            Err(ShapesError::InvalidParameter(_))
        ));
    }
}
