//! Rotation-equivariant feature extractor.
//!
//! Features are lists of 3D vectors per channel ("vector neurons"): a
//! `(C, 3N)` matrix where row `c`, columns `3n..3n+3` hold channel `c` of
//! point `n`. Linear layers mix channels only (left multiplication), so a
//! rotation applied to every block commutes with them exactly; the gate
//! nonlinearity decides per block using inner products, which are rotation
//! invariant. Together the whole encoder is equivariant by construction:
//! rotating and translating the input cloud rotates the pooled global
//! feature and moves its centroid the same way, while the local descriptor
//! head pairs features against learned directions to produce invariant
//! per-point signatures.
//!
//! The same tape-based forward pass serves inference and training, so the
//! gradients checked against finite differences are the gradients the
//! trainers actually use.

pub mod ablation;
mod checkpoint;

pub use checkpoint::{Checkpoint, Section};

use std::sync::Arc;

use crate::geometry::PointCloud;
use crate::mathcore::{DenseMatrix, GradTape, Mat3, Slot, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Two clouds' points closer than this to their first point are degenerate.
const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EquinetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate cloud: all points coincide")]
    DegenerateCloud,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// A bank of 3D vector channels per point, stored `(C, 3N)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VnFeature {
    data: DenseMatrix,
}

impl VnFeature {
    pub fn new(data: DenseMatrix) -> Result<VnFeature, EquinetError> {
        if data.cols() % 3 != 0 || data.cols() == 0 {
            return Err(EquinetError::ShapeMismatch(format!(
                "feature width {} is not a positive multiple of 3",
                data.cols()
            )));
        }
        Ok(VnFeature { data })
    }

    /// Single-channel feature holding the raw point coordinates.
    pub fn from_cloud(p: &PointCloud) -> VnFeature {
        let mut data = DenseMatrix::zeros(1, 3 * p.len());
        for (n, q) in p.points().iter().enumerate() {
            data.set(0, 3 * n, q.x);
            data.set(0, 3 * n + 1, q.y);
            data.set(0, 3 * n + 2, q.z);
        }
        VnFeature { data }
    }

    pub fn channels(&self) -> usize {
        self.data.rows()
    }

    pub fn points(&self) -> usize {
        self.data.cols() / 3
    }

    pub fn data(&self) -> &DenseMatrix {
        &self.data
    }

    pub fn block(&self, channel: usize, point: usize) -> Vec3 {
        Vec3::new(
            self.data.at(channel, 3 * point),
            self.data.at(channel, 3 * point + 1),
            self.data.at(channel, 3 * point + 2),
        )
    }

    /// Applies a rotation to every 3D block.
    pub fn rotated(&self, r: &Mat3) -> VnFeature {
        let mut out = self.data.clone();
        for c in 0..self.channels() {
            for n in 0..self.points() {
                let v = r.mul_vec3(self.block(c, n));
                out.set(c, 3 * n, v.x);
                out.set(c, 3 * n + 1, v.y);
                out.set(c, 3 * n + 2, v.z);
            }
        }
        VnFeature { data: out }
    }
}

/// Weights of one vector-neuron layer: a channel-mixing map and a square
/// direction map feeding the gate. Neither has a bias, which would break
/// equivariance.
#[derive(Clone, Debug, PartialEq)]
pub struct VnLayerParams {
    pub linear: DenseMatrix,
    pub direction: DenseMatrix,
}

/// Pooled global feature: `C0` centered vector channels plus the cloud
/// centroid. Under a rigid motion of the cloud the channels rotate and the
/// centroid moves with the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature {
    pub channels: DenseMatrix,
    pub centroid: Vec3,
}

impl GlobalFeature {
    pub fn channel_count(&self) -> usize {
        self.channels.rows()
    }

    pub fn channel(&self, i: usize) -> Vec3 {
        Vec3::new(self.channels.at(i, 0), self.channels.at(i, 1), self.channels.at(i, 2))
    }

    /// The feature as labeled 3D points: each channel offset by the
    /// centroid. These are the points the global alignment consumes.
    pub fn as_points(&self) -> Vec<Vec3> {
        (0..self.channel_count()).map(|i| self.channel(i) + self.centroid).collect()
    }
}

/// Rotation-invariant per-point descriptors, one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeature {
    pub descriptors: DenseMatrix,
}

impl LocalFeature {
    pub fn points(&self) -> usize {
        self.descriptors.rows()
    }

    pub fn width(&self) -> usize {
        self.descriptors.cols()
    }
}

/// Channel widths and neighborhood size of the extractor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    /// Output channels of each backbone layer; the last is the global width.
    pub backbone_widths: Vec<usize>,
    /// Channels of the fusion layer combining point and global features.
    pub fusion_width: usize,
    /// Direction channels of the invariant pairing head.
    pub invariant_channels: usize,
    /// Neighbors aggregated by each backbone layer.
    pub knn: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            backbone_widths: vec![16, 16, 32, 32],
            fusion_width: 32,
            invariant_channels: 16,
            knn: 16,
        }
    }
}

/// All weights of the shared feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorWeights {
    pub backbone: Vec<VnLayerParams>,
    pub fusion: VnLayerParams,
    pub head: DenseMatrix,
    pub knn: usize,
}

impl ExtractorWeights {
    /// Random weights, each matrix uniform in `+-sqrt(3/fan_in)`. The bound
    /// keeps the second moment of the activations near the input's through
    /// the stack, so pooled channels and invariant pairings start at a
    /// usable scale instead of decaying layer by layer.
    pub fn init(config: &ExtractorConfig, seed: u64) -> ExtractorWeights {
        assert!(!config.backbone_widths.is_empty() && config.knn >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let bound = (3.0 / cols as f64).sqrt();
            DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
        };
        let mut backbone = Vec::new();
        let mut c_in = 1usize;
        for &c_out in &config.backbone_widths {
            backbone.push(VnLayerParams {
                linear: mat(c_out, 2 * c_in, &mut rng),
                direction: mat(c_out, c_out, &mut rng),
            });
            c_in = c_out;
        }
        let fusion_in = 2 * c_in; // point channels plus tiled global channels
        let fusion = VnLayerParams {
            linear: mat(config.fusion_width, fusion_in, &mut rng),
            direction: mat(config.fusion_width, config.fusion_width, &mut rng),
        };
        let head = mat(config.invariant_channels, config.fusion_width, &mut rng);
        let mut w = ExtractorWeights { backbone, fusion, head, knn: config.knn };
        w.calibrate_scales();
        w
    }

    /// Rescales the last backbone layer and the invariant head once, at
    /// init time, so that an untrained forward pass on a fixed probe cloud
    /// yields global channels with median norm 1 and descriptors with unit
    /// RMS. Mean pooling and the gated nonlinearities otherwise shrink the
    /// activations by orders of magnitude, which starves the decoders of
    /// signal. The probe cloud is fixed, so the correction is a pure
    /// deterministic function of the drawn weights.
    fn calibrate_scales(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1eb0a7);
        let points: Vec<Vec3> = (0..64)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let probe = match PointCloud::new(points) {
            Ok(c) => c,
            Err(_) => return,
        };
        if let Ok(global) = encode_global(self, &probe) {
            let mut norms: Vec<f64> =
                (0..global.channel_count()).map(|i| global.channel(i).norm()).collect();
            norms.sort_by(|a, b| a.partial_cmp(b).expect("finite norms"));
            let median = norms[norms.len() / 2];
            if median > 1e-300 {
                let last = self.backbone.last_mut().expect("nonempty backbone");
                let gain = 1.0 / median;
                for v in last.linear.data_mut() {
                    *v *= gain;
                }
            }
        }
        if let Ok((_, local)) = encode_full(self, &probe) {
            let data = local.descriptors.data();
            let rms = (data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64).sqrt();
            if rms > 1e-300 {
                let gain = 1.0 / rms;
                for v in self.head.data_mut() {
                    *v *= gain;
                }
            }
        }
    }

    /// Default desk-scale extractor: widths 16/16/32/32, fusion 32, 16
    /// invariant channels, 16 neighbors, giving 512-wide descriptors.
    pub fn desk_default(seed: u64) -> ExtractorWeights {
        ExtractorWeights::init(&ExtractorConfig::default(), seed)
    }

    /// Channels of the pooled global feature.
    pub fn global_channels(&self) -> usize {
        self.backbone.last().expect("nonempty backbone").linear.rows()
    }

    /// Width of a local descriptor row.
    pub fn descriptor_channels(&self) -> usize {
        self.fusion.linear.rows() * self.head.rows()
    }

    pub fn validate(&self) -> Result<(), EquinetError> {
        let mut c_in = 1usize;
        for (i, l) in self.backbone.iter().enumerate() {
            if l.linear.cols() != 2 * c_in {
                return Err(EquinetError::ShapeMismatch(format!(
                    "backbone layer {i}: expected {} input channels, found {}",
                    2 * c_in,
                    l.linear.cols()
                )));
            }
            if l.direction.rows() != l.linear.rows() || l.direction.cols() != l.linear.rows() {
                return Err(EquinetError::ShapeMismatch(format!(
                    "backbone layer {i}: direction map must be square over the outputs"
                )));
            }
            c_in = l.linear.rows();
        }
        if self.fusion.linear.cols() != 2 * c_in {
            return Err(EquinetError::ShapeMismatch("fusion input width mismatch".into()));
        }
        let cf = self.fusion.linear.rows();
        if self.fusion.direction.rows() != cf || self.fusion.direction.cols() != cf {
            return Err(EquinetError::ShapeMismatch("fusion direction map must be square".into()));
        }
        if self.head.cols() != cf {
            return Err(EquinetError::ShapeMismatch("head input width mismatch".into()));
        }
        if self.knn == 0 {
            return Err(EquinetError::ShapeMismatch("knn must be at least 1".into()));
        }
        Ok(())
    }
}

/// Channel-mixing linear map: `w * f`, the equivariant primitive.
pub fn vn_linear(w: &DenseMatrix, f: &VnFeature) -> Result<VnFeature, EquinetError> {
    if w.cols() != f.channels() {
        return Err(EquinetError::ShapeMismatch(format!(
            "weight expects {} channels, feature has {}",
            w.cols(),
            f.channels()
        )));
    }
    Ok(VnFeature { data: w.matmul(f.data()) })
}

/// Direction-gated nonlinearity: directions `k = direction * f` gate each
/// block of `f` (pass when aligned, project out the direction component
/// otherwise). `direction` must be square over the feature channels.
pub fn vn_nonlinear(direction: &DenseMatrix, f: &VnFeature) -> Result<VnFeature, EquinetError> {
    if direction.rows() != f.channels() || direction.cols() != f.channels() {
        return Err(EquinetError::ShapeMismatch(format!(
            "direction map {}x{} does not match {} channels",
            direction.rows(),
            direction.cols(),
            f.channels()
        )));
    }
    let k = direction.matmul(f.data());
    Ok(VnFeature { data: crate::mathcore::vn_gate_forward(f.data(), &k) })
}

/// Deterministic k-nearest-neighbor lists (squared Euclidean, self excluded,
/// ties broken by lower index). `k` is clamped to `n - 1`.
pub(crate) fn knn_indices(points: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let k = k.min(n - 1).max(1);
    let mut out = Vec::with_capacity(n);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scratch.clear();
        for (j, q) in points.iter().enumerate() {
            if j != i {
                scratch.push(((points[i] - *q).norm_sq(), j));
            }
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        scratch.select_nth_unstable_by(k - 1, cmp);
        scratch.truncate(k);
        scratch.sort_unstable_by(cmp);
        out.push(scratch.iter().map(|&(_, j)| j).collect());
    }
    out
}

fn check_not_degenerate(p: &PointCloud) -> Result<(), EquinetError> {
    let first = p.points()[0];
    if p.points().iter().all(|q| (*q - first).norm() <= DEGENERATE_SPREAD) {
        return Err(EquinetError::DegenerateCloud);
    }
    Ok(())
}

/// Parameter slots of the extractor on a tape, in the order
/// `(linear, direction)` per backbone layer, then fusion, then head. Exposed
/// so trainers and gradient checks can build losses on the same forward
/// graph the encoders use.
pub struct ExtractorSlots {
    pub backbone: Vec<(Slot, Slot)>,
    pub fusion: (Slot, Slot),
    pub head: Slot,
}

/// Records every weight matrix as a differentiable tape input.
pub fn insert_weights(tape: &mut GradTape, w: &ExtractorWeights) -> ExtractorSlots {
    ExtractorSlots {
        backbone: w
            .backbone
            .iter()
            .map(|l| (tape.input(l.linear.clone()), tape.input(l.direction.clone())))
            .collect(),
        fusion: (tape.input(w.fusion.linear.clone()), tape.input(w.fusion.direction.clone())),
        head: tape.input(w.head.clone()),
    }
}

pub struct BackboneOut {
    /// Per-point features of the last layer, `(C_last, 3N)`.
    pub point_feat: Slot,
    /// Pooled centered global channels, `(C_last, 3)`.
    pub pooled: Slot,
    pub centroid: Vec3,
    pub points: usize,
}

/// Records the shared backbone: center the cloud, lift to one vector
/// channel, run the edge-aggregating vector-neuron stack, mean-pool.
pub fn backbone_forward(
    tape: &mut GradTape,
    slots: &ExtractorSlots,
    knn: usize,
    cloud: &PointCloud,
) -> Result<BackboneOut, EquinetError> {
    check_not_degenerate(cloud)?;
    let centroid = cloud.centroid();
    let n = cloud.len();
    let mut lift = DenseMatrix::zeros(1, 3 * n);
    for (i, p) in cloud.points().iter().enumerate() {
        let c = *p - centroid;
        lift.set(0, 3 * i, c.x);
        lift.set(0, 3 * i + 1, c.y);
        lift.set(0, 3 * i + 2, c.z);
    }
    let neighbors = Arc::new(knn_indices(cloud.points(), knn));

    let mut f = tape.constant(lift);
    for (lin, dir) in &slots.backbone {
        let nm = tape.neighbor_mean(f, neighbors.clone());
        let edge = tape.sub(nm, f);
        let stacked = tape.concat_rows(f, edge);
        let v = tape.matmul(*lin, stacked);
        let k = tape.matmul(*dir, v);
        f = tape.vn_gate(v, k);
    }
    let pooled = tape.point_mean(f);
    Ok(BackboneOut { point_feat: f, pooled, centroid, points: n })
}

/// Records the fusion stage: tile the global channels across points, stack
/// them under the per-point features, and run one gated vector-neuron layer.
pub fn fused_forward(
    tape: &mut GradTape,
    slots: &ExtractorSlots,
    point_feat: Slot,
    global_channels: Slot,
    points: usize,
) -> Slot {
    let tiled = tape.tile_points(global_channels, points);
    let stacked = tape.concat_rows(point_feat, tiled);
    let v = tape.matmul(slots.fusion.0, stacked);
    let k = tape.matmul(slots.fusion.1, v);
    tape.vn_gate(v, k)
}

/// Records the local head: fuse point and global features, then pair the
/// result against learned directions. Returns the `(C1, N)` descriptor slot.
pub fn local_forward(
    tape: &mut GradTape,
    slots: &ExtractorSlots,
    point_feat: Slot,
    global_channels: Slot,
    points: usize,
) -> Slot {
    let fused = fused_forward(tape, slots, point_feat, global_channels, points);
    let directions = tape.matmul(slots.head, fused);
    tape.invariant_pair(fused, directions)
}

/// Encodes the pooled global feature of a cloud.
pub fn encode_global(w: &ExtractorWeights, p: &PointCloud) -> Result<GlobalFeature, EquinetError> {
    let mut tape = GradTape::new();
    let slots = insert_weights(&mut tape, w);
    let bb = backbone_forward(&mut tape, &slots, w.knn, p)?;
    Ok(GlobalFeature { channels: tape.value(bb.pooled).clone(), centroid: bb.centroid })
}

/// Encodes rotation-invariant local descriptors for every point, fusing the
/// given global feature (normally the cloud's own, see [`encode_full`]).
pub fn encode_local(
    w: &ExtractorWeights,
    p: &PointCloud,
    g: &GlobalFeature,
) -> Result<LocalFeature, EquinetError> {
    if g.channel_count() != w.global_channels() || g.channels.cols() != 3 {
        return Err(EquinetError::ShapeMismatch(format!(
            "global feature {}x{} does not match extractor width {}",
            g.channels.rows(),
            g.channels.cols(),
            w.global_channels()
        )));
    }
    let mut tape = GradTape::new();
    let slots = insert_weights(&mut tape, w);
    let bb = backbone_forward(&mut tape, &slots, w.knn, p)?;
    let gch = tape.constant(g.channels.clone());
    let desc = local_forward(&mut tape, &slots, bb.point_feat, gch, bb.points);
    Ok(LocalFeature { descriptors: tape.value(desc).transpose() })
}

/// Encodes both feature levels with one backbone pass. Equivalent to
/// `encode_global` followed by `encode_local` with the cloud's own global
/// feature, but roughly half the cost.
pub fn encode_full(
    w: &ExtractorWeights,
    p: &PointCloud,
) -> Result<(GlobalFeature, LocalFeature), EquinetError> {
    let mut tape = GradTape::new();
    let slots = insert_weights(&mut tape, w);
    let bb = backbone_forward(&mut tape, &slots, w.knn, p)?;
    let desc = local_forward(&mut tape, &slots, bb.point_feat, bb.pooled, bb.points);
    Ok((
        GlobalFeature { channels: tape.value(bb.pooled).clone(), centroid: bb.centroid },
        LocalFeature { descriptors: tape.value(desc).transpose() },
    ))
}
