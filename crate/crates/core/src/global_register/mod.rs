//! Coarse registration stage: correspondence-free alignment of pooled
//! features, an occupancy decoder over invariant query encodings, and the
//! first training stage that fits both.
//!
//! Because the pooled global features of two rigidly related clouds are
//! rigidly related copies of each other, aligning the feature channels (as
//! labeled 3D points) with a closed-form weighted fit recovers the cloud
//! motion without ever matching points. Training improves how informative
//! those channels are: an occupancy head must predict inside/outside labels
//! from invariant projections onto the channels, while an alignment residual
//! pulls the two clouds' features toward rigid agreement. The alignment term
//! treats the fitted motion as fixed: at the optimum the fit's own
//! sensitivity vanishes, so gradients through the closed-form solve are not
//! needed and the residual still shrinks.

use std::io::Write;

use crate::equinet::{
    backbone_forward, encode_global, insert_weights, EquinetError, ExtractorWeights, GlobalFeature,
    Section,
};
use crate::geometry::{
    apply, sample_transform, GeometryError, PerturbationSpec, PointCloud, RigidTransform, Scenario,
};
use crate::mathcore::{weighted_kabsch, DenseMatrix, GradTape, MathError, Slot, Vec3};
use crate::shapes::{sample_queries, sample_surface, OccupancySample, ShapeModel, ShapesError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GlobalRegError {
    #[error("feature extraction: {0}")]
    Feature(#[from] EquinetError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("shape sampling: {0}")]
    Shapes(#[from] ShapesError),
    #[error("numerics: {0}")]
    Math(#[from] MathError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty query set")]
    EmptyQuerySet,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

// === closed-form coarse alignment ===

/// Outcome of the coarse alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignResult {
    pub transform: RigidTransform,
    /// True when the feature channels were too close to collinear for a
    /// unique rotation and the identity was returned instead.
    pub degenerate_fallback: bool,
}

/// Aligns two global features by fitting the rigid motion that carries the
/// source channel points onto the target channel points, all with equal
/// weight. No point correspondences between the clouds are involved; channel
/// `i` of the source is matched to channel `i` of the target by construction.
pub fn align_global(
    src: &GlobalFeature,
    tgt: &GlobalFeature,
) -> Result<AlignResult, GlobalRegError> {
    if src.channel_count() != tgt.channel_count() {
        return Err(GlobalRegError::InvalidParameter(format!(
            "channel counts differ: {} vs {}",
            src.channel_count(),
            tgt.channel_count()
        )));
    }
    let a = src.as_points();
    let b = tgt.as_points();
    let w = vec![1.0; a.len()];
    match weighted_kabsch(&a, &b, &w) {
        Ok(transform) => Ok(AlignResult { transform, degenerate_fallback: false }),
        Err(MathError::DegenerateConfiguration(_)) => Ok(AlignResult {
            transform: RigidTransform::IDENTITY,
            degenerate_fallback: true,
        }),
        Err(e) => Err(GlobalRegError::Math(e)),
    }
}

/// Encodes both clouds and aligns their global features: the whole coarse
/// stage in one call.
pub fn register_coarse(
    w: &ExtractorWeights,
    src: &PointCloud,
    tgt: &PointCloud,
) -> Result<AlignResult, GlobalRegError> {
    let gs = crate::equinet::encode_global(w, src)?;
    let gt = crate::equinet::encode_global(w, tgt)?;
    align_global(&gs, &gt)
}

/// Squared pose discrepancy used to monitor training: the Frobenius distance
/// of the relative rotation from the identity plus the squared translation
/// gap. Zero exactly when the two transforms agree; a 180 degree rotation
/// error alone contributes 8.
pub fn pose_loss(gt: &RigidTransform, est: &RigidTransform) -> f64 {
    let rel = gt.rotation.transpose().matmul(&est.rotation);
    let mut acc = 0.0;
    for i in 0..3 {
        let row = rel.row(i).as_array();
        for (j, v) in row.iter().enumerate() {
            let d = v - if i == j { 1.0 } else { 0.0 };
            acc += d * d;
        }
    }
    acc + (gt.translation - est.translation).norm_sq()
}

// === occupancy decoder ===

/// Two-layer occupancy head over invariant query encodings. A query point is
/// encoded as its projections onto every global channel plus its distance
/// from the cloud centroid; both are unchanged when cloud and query move
/// rigidly together, so the decoder's answer is too.
///
/// `mu` and `inv_sigma` standardize the query encoding before the first
/// layer. They are frozen preprocessing constants, not trainable weights:
/// stage-1 training measures them once on a probe batch (`set_input_stats`)
/// and they ride along in the checkpoint afterwards. Untouched they are the
/// identity (zero shift, unit scale).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
    pub mu: DenseMatrix,
    pub inv_sigma: DenseMatrix,
}

impl DecoderWeights {
    /// Random decoder for `global_channels` feature channels; biases start
    /// at zero. Uniform Glorot fan-in/fan-out scaling, with the usual 5/3
    /// gain on the tanh hidden layer so activations keep unit variance.
    pub fn init(global_channels: usize, hidden: usize, seed: u64) -> DecoderWeights {
        assert!(global_channels >= 1 && hidden >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = global_channels + 1;
        let mut mat = |rows: usize, cols: usize, gain: f64| {
            let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
            DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
        };
        let w1 = mat(hidden, input, 5.0 / 3.0);
        let w2 = mat(1, hidden, 1.0);
        DecoderWeights {
            w1,
            b1: DenseMatrix::zeros(hidden, 1),
            w2,
            b2: DenseMatrix::zeros(1, 1),
            mu: DenseMatrix::zeros(input, 1),
            inv_sigma: DenseMatrix::from_fn(input, 1, |_, _| 1.0),
        }
    }

    /// All-zero decoder; predicts probability one half everywhere.
    pub fn zeros(global_channels: usize, hidden: usize) -> DecoderWeights {
        let input = global_channels + 1;
        DecoderWeights {
            w1: DenseMatrix::zeros(hidden, input),
            b1: DenseMatrix::zeros(hidden, 1),
            w2: DenseMatrix::zeros(1, hidden),
            b2: DenseMatrix::zeros(1, 1),
            mu: DenseMatrix::zeros(input, 1),
            inv_sigma: DenseMatrix::from_fn(input, 1, |_, _| 1.0),
        }
    }

    /// Measures per-dimension mean and spread of the raw query encodings in
    /// `features` (one column per query) and freezes them as the decoder's
    /// input standardization. Dimensions with spread below 1e-6 keep unit
    /// scale so constant features cannot blow up.
    pub fn set_input_stats(&mut self, features: &DenseMatrix) {
        assert_eq!(features.rows(), self.w1.cols(), "feature rows must match decoder input");
        assert!(features.cols() > 1, "need at least two probe queries");
        let m = features.cols() as f64;
        for i in 0..features.rows() {
            let row = features.row_slice(i);
            let mean = row.iter().sum::<f64>() / m;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let sd = var.sqrt();
            self.mu.set(i, 0, mean);
            self.inv_sigma.set(i, 0, if sd > 1e-6 { 1.0 / sd } else { 1.0 });
        }
    }

    pub fn validate(&self) -> Result<(), GlobalRegError> {
        let h = self.w1.rows();
        if self.b1.rows() != h || self.b1.cols() != 1 {
            return Err(GlobalRegError::InvalidParameter("b1 must be hidden x 1".into()));
        }
        if self.w2.rows() != 1 || self.w2.cols() != h {
            return Err(GlobalRegError::InvalidParameter("w2 must be 1 x hidden".into()));
        }
        if self.b2.rows() != 1 || self.b2.cols() != 1 {
            return Err(GlobalRegError::InvalidParameter("b2 must be 1 x 1".into()));
        }
        if self.w1.cols() < 2 {
            return Err(GlobalRegError::InvalidParameter(
                "w1 needs at least one channel plus the distance column".into(),
            ));
        }
        let input = self.w1.cols();
        if self.mu.rows() != input || self.mu.cols() != 1 {
            return Err(GlobalRegError::InvalidParameter("mu must be input x 1".into()));
        }
        if self.inv_sigma.rows() != input || self.inv_sigma.cols() != 1 {
            return Err(GlobalRegError::InvalidParameter("inv_sigma must be input x 1".into()));
        }
        Ok(())
    }

    /// Feature channels this decoder expects.
    pub fn global_channels(&self) -> usize {
        self.w1.cols() - 1
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new("decoder");
        s.push("w1", self.w1.clone());
        s.push("b1", self.b1.clone());
        s.push("w2", self.w2.clone());
        s.push("b2", self.b2.clone());
        s.push("mu", self.mu.clone());
        s.push("inv_sigma", self.inv_sigma.clone());
        s
    }

    pub fn from_section(s: &Section) -> Result<DecoderWeights, GlobalRegError> {
        let get = |name: &str| -> Result<DenseMatrix, GlobalRegError> {
            s.tensor(name).cloned().ok_or_else(|| {
                GlobalRegError::InvalidParameter(format!(
                    "section '{}' is missing tensor '{name}'",
                    s.name
                ))
            })
        };
        let d = DecoderWeights {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
            mu: get("mu")?,
            inv_sigma: get("inv_sigma")?,
        };
        d.validate()?;
        Ok(d)
    }
}

/// Decoder parameter slots on a tape. The standardization entries are
/// constants, not inputs; they take no gradient and receive no updates.
pub struct DecoderSlots {
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
    pub neg_mu: Slot,
    pub scale: Slot,
}

/// Records the decoder weights as differentiable tape inputs.
pub fn insert_decoder(tape: &mut GradTape, d: &DecoderWeights) -> DecoderSlots {
    let input = d.w1.cols();
    let neg_mu = DenseMatrix::from_fn(input, 1, |i, _| -d.mu.at(i, 0));
    let scale = DenseMatrix::from_fn(input, input, |i, j| {
        if i == j {
            d.inv_sigma.at(i, 0)
        } else {
            0.0
        }
    });
    DecoderSlots {
        w1: tape.input(d.w1.clone()),
        b1: tape.input(d.b1.clone()),
        w2: tape.input(d.w2.clone()),
        b2: tape.input(d.b2.clone()),
        neg_mu: tape.constant(neg_mu),
        scale: tape.constant(scale),
    }
}

/// Raw query encodings for one cloud: channel projections plus centroid
/// distance, one column per query. This is exactly the unstandardized input
/// the tape path feeds the decoder; stage-1 training measures its statistics
/// here before freezing them into the decoder.
pub fn decoder_input_matrix(g: &GlobalFeature, queries: &[Vec3]) -> DenseMatrix {
    let rows = g.channel_count() + 1;
    let mut out = DenseMatrix::zeros(rows, queries.len());
    for (j, p) in queries.iter().enumerate() {
        let d = *p - g.centroid;
        for i in 0..g.channel_count() {
            out.set(i, j, g.channel(i).dot(d));
        }
        out.set(rows - 1, j, d.norm());
    }
    out
}

/// Records the decoder forward pass: queries are encoded as channel
/// projections plus centroid distance, then passed through the two-layer
/// head. Returns the `(1, Q)` logit slot.
pub fn decoder_logits(
    tape: &mut GradTape,
    slots: &DecoderSlots,
    pooled: Slot,
    centroid: Vec3,
    queries: &[Vec3],
) -> Result<Slot, GlobalRegError> {
    if queries.is_empty() {
        return Err(GlobalRegError::EmptyQuerySet);
    }
    let q = queries.len();
    let mut offsets = DenseMatrix::zeros(1, 3 * q);
    let mut distances = DenseMatrix::zeros(1, q);
    for (j, p) in queries.iter().enumerate() {
        let d = *p - centroid;
        offsets.set(0, 3 * j, d.x);
        offsets.set(0, 3 * j + 1, d.y);
        offsets.set(0, 3 * j + 2, d.z);
        distances.set(0, j, d.norm());
    }
    let tiled = tape.tile_points(pooled, q);
    let dirs = tape.constant(offsets);
    let projections = tape.invariant_pair(tiled, dirs);
    let dist_row = tape.constant(distances);
    let x = tape.concat_rows(projections, dist_row);
    let x = tape.add_col_broadcast(x, slots.neg_mu);
    let x = tape.matmul(slots.scale, x);
    let a1 = tape.matmul(slots.w1, x);
    let a1 = tape.add_col_broadcast(a1, slots.b1);
    let h = tape.tanh(a1);
    let a2 = tape.matmul(slots.w2, h);
    Ok(tape.add_col_broadcast(a2, slots.b2))
}

/// Occupancy probabilities of `queries` given a cloud's global feature.
pub fn occupancy_probabilities(
    d: &DecoderWeights,
    g: &GlobalFeature,
    queries: &[Vec3],
) -> Result<Vec<f64>, GlobalRegError> {
    d.validate()?;
    if d.global_channels() != g.channel_count() {
        return Err(GlobalRegError::InvalidParameter(format!(
            "decoder expects {} channels, feature has {}",
            d.global_channels(),
            g.channel_count()
        )));
    }
    let mut tape = GradTape::new();
    let slots = insert_decoder(&mut tape, d);
    let pooled = tape.constant(g.channels.clone());
    let logits = decoder_logits(&mut tape, &slots, pooled, g.centroid, queries)?;
    let probs = tape.sigmoid(logits);
    Ok(tape.value(probs).data().to_vec())
}

/// Summed sigmoid cross-entropy of the decoder against labeled queries.
pub fn occupancy_loss(
    tape: &mut GradTape,
    slots: &DecoderSlots,
    pooled: Slot,
    centroid: Vec3,
    samples: &[OccupancySample],
) -> Result<Slot, GlobalRegError> {
    if samples.is_empty() {
        return Err(GlobalRegError::EmptyQuerySet);
    }
    let positions: Vec<Vec3> = samples.iter().map(|s| s.position).collect();
    let labels =
        DenseMatrix::from_vec(1, samples.len(), samples.iter().map(|s| s.label as f64).collect());
    let logits = decoder_logits(tape, slots, pooled, centroid, &positions)?;
    Ok(tape.ce_with_logits_sum(logits, labels))
}

// === alignment residual ===

/// Records the feature-space alignment residual between two pooled features:
/// fit the rigid motion between their channel points in closed form, freeze
/// it, and emit the mean squared leftover as a scalar slot. Returns the
/// fitted motion alongside. A degenerate fit contributes a zero residual and
/// is flagged.
pub fn alignment_residual(
    tape: &mut GradTape,
    pooled_src: Slot,
    centroid_src: Vec3,
    pooled_tgt: Slot,
    centroid_tgt: Vec3,
) -> Result<(Slot, AlignResult), GlobalRegError> {
    let src = GlobalFeature { channels: tape.value(pooled_src).clone(), centroid: centroid_src };
    let tgt = GlobalFeature { channels: tape.value(pooled_tgt).clone(), centroid: centroid_tgt };
    let align = align_global(&src, &tgt)?;
    if align.degenerate_fallback {
        let zero = tape.constant(DenseMatrix::scalar(0.0));
        return Ok((zero, align));
    }
    let r = &align.transform.rotation;
    let t = align.transform.translation;
    // Row i of the residual is R * ch_src_i + (R * c_src + t - c_tgt) - ch_tgt_i.
    let rt = DenseMatrix::from_fn(3, 3, |i, j| r.row(j).as_array()[i]);
    let offset = r.mul_vec3(centroid_src) + t - centroid_tgt;
    let rt_slot = tape.constant(rt);
    let offset_slot =
        tape.constant(DenseMatrix::from_vec(1, 3, vec![offset.x, offset.y, offset.z]));
    let rotated = tape.matmul(pooled_src, rt_slot);
    let shifted = tape.add_row_broadcast(rotated, offset_slot);
    let residual = tape.sub(shifted, pooled_tgt);
    let sq = tape.frob_sq(residual);
    let channels = src.channel_count().max(1);
    Ok((tape.scale(sq, 1.0 / channels as f64), align))
}

// === stage-1 training ===

/// Hyperparameters of the coarse training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Options {
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight of the occupancy term; the alignment residual gets the rest.
    pub lambda: f64,
    /// Shape pairs averaged into each gradient step. Larger batches cost
    /// proportionally more per step but give much steadier descent under
    /// the fixed-norm clipped update.
    pub batch_size: usize,
    pub points_per_cloud: usize,
    pub queries_per_cloud: usize,
    pub max_angle_deg: f64,
    pub max_translation: f64,
    /// Updates are rescaled when the global gradient norm exceeds this.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Stage1Options {
            steps: 200,
            learning_rate: 0.01,
            lambda: 0.5,
            batch_size: 4,
            points_per_cloud: 96,
            queries_per_cloud: 64,
            max_angle_deg: 180.0,
            max_translation: 0.5,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl Stage1Options {
    pub fn validate(&self) -> Result<(), GlobalRegError> {
        if self.steps == 0 {
            return Err(GlobalRegError::InvalidParameter("steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(GlobalRegError::InvalidParameter("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(GlobalRegError::InvalidParameter("lambda must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(GlobalRegError::InvalidParameter("batch size must be positive".into()));
        }
        if self.points_per_cloud < 6 {
            return Err(GlobalRegError::InvalidParameter("need at least 6 points".into()));
        }
        if self.queries_per_cloud == 0 {
            return Err(GlobalRegError::InvalidParameter("need at least 1 query".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(GlobalRegError::InvalidParameter("grad clip must be positive".into()));
        }
        PerturbationSpec {
            max_angle_deg: self.max_angle_deg,
            max_translation: self.max_translation,
            scenario: Scenario::Clean,
            seed: self.seed,
        }
        .validate()?;
        Ok(())
    }
}

/// Per-step record of the coarse training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Step {
    pub step: usize,
    /// Summed occupancy cross-entropy, averaged over the two clouds and the
    /// batch.
    pub loss_occ: f64,
    /// Mean squared feature alignment residual, averaged over the batch.
    pub loss_align: f64,
    /// Pose discrepancy of the fitted motion against the ground truth
    /// (monitoring only, no gradient).
    pub pose: f64,
    pub total: f64,
}

/// Trains the extractor and occupancy decoder jointly on sampled shape
/// pairs with plain clipped gradient descent. Each step draws a batch of
/// shapes, two independent surface samples of each, and a random motion for
/// the second cloud; the loss mixes occupancy cross-entropy on both clouds
/// with the feature alignment residual, averaged over the batch. Writes one
/// CSV line per step to `log` and returns the full trace. Deterministic for
/// a fixed seed.
pub fn train_stage1(
    extractor: &mut ExtractorWeights,
    decoder: &mut DecoderWeights,
    shapes: &[ShapeModel],
    opts: &Stage1Options,
    log: &mut dyn Write,
) -> Result<Vec<Stage1Step>, GlobalRegError> {
    opts.validate()?;
    extractor.validate()?;
    decoder.validate()?;
    if shapes.is_empty() {
        return Err(GlobalRegError::InvalidParameter("no training shapes".into()));
    }
    if decoder.global_channels() != extractor.global_channels() {
        return Err(GlobalRegError::InvalidParameter(format!(
            "decoder expects {} channels, extractor produces {}",
            decoder.global_channels(),
            extractor.global_channels()
        )));
    }
    let spec = PerturbationSpec {
        max_angle_deg: opts.max_angle_deg,
        max_translation: opts.max_translation,
        scenario: Scenario::IndependentlySampled,
        seed: opts.seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // Occupancy supervision is precomputed once per shape, dataset style:
    // every revisit of a shape fits the same labelled queries while the
    // point clouds themselves are redrawn fresh.
    let mut query_sets = Vec::with_capacity(shapes.len());
    for shape in shapes {
        query_sets.push(sample_queries(shape, opts.queries_per_cloud, &mut rng)?);
    }

    // Freeze the decoder's input standardization on a probe batch drawn
    // from the training distribution before the first update. Without it
    // the query encoding dimensions span wildly different scales and plain
    // gradient descent crawls.
    {
        let probe_count = shapes.len().min(8);
        let mut blocks = Vec::with_capacity(probe_count);
        let mut total = 0usize;
        for idx in 0..probe_count {
            let cloud = sample_surface(&shapes[idx], opts.points_per_cloud, &mut rng)?;
            let g = encode_global(extractor, &cloud)?;
            let positions: Vec<Vec3> = query_sets[idx].iter().map(|s| s.position).collect();
            let m = decoder_input_matrix(&g, &positions);
            total += m.cols();
            blocks.push(m);
        }
        let rows = decoder.w1.cols();
        let mut probe = DenseMatrix::zeros(rows, total);
        let mut col = 0usize;
        for m in &blocks {
            for j in 0..m.cols() {
                for i in 0..rows {
                    probe.set(i, col, m.at(i, j));
                }
                col += 1;
            }
        }
        decoder.set_input_stats(&probe);
    }

    let mut trace = Vec::with_capacity(opts.steps);
    writeln!(log, "step,loss_occ,loss_align,pose,total")?;

    for step in 0..opts.steps {
        let mut tape = GradTape::new();
        let ext_slots = insert_weights(&mut tape, extractor);
        let dec_slots = insert_decoder(&mut tape, decoder);
        let mut occ_terms = Vec::with_capacity(opts.batch_size);
        let mut align_terms = Vec::with_capacity(opts.batch_size);
        let mut pose_sum = 0.0;

        for _ in 0..opts.batch_size {
            let idx = rng.random_range(0..shapes.len());
            let shape = &shapes[idx];
            let src = sample_surface(shape, opts.points_per_cloud, &mut rng)?;
            let tgt_canonical = sample_surface(shape, opts.points_per_cloud, &mut rng)?;
            let motion = sample_transform(&spec, &mut rng);
            let tgt = apply(&tgt_canonical, &motion);
            let queries = &query_sets[idx];
            let moved_queries: Vec<OccupancySample> = queries
                .iter()
                .map(|s| OccupancySample {
                    position: motion.apply_point(s.position),
                    label: s.label,
                })
                .collect();

            let bb_src = backbone_forward(&mut tape, &ext_slots, extractor.knn, &src)?;
            let bb_tgt = backbone_forward(&mut tape, &ext_slots, extractor.knn, &tgt)?;

            let ce_src =
                occupancy_loss(&mut tape, &dec_slots, bb_src.pooled, bb_src.centroid, &queries)?;
            let ce_tgt = occupancy_loss(
                &mut tape,
                &dec_slots,
                bb_tgt.pooled,
                bb_tgt.centroid,
                &moved_queries,
            )?;
            let ce_sum = tape.add(ce_src, ce_tgt);
            occ_terms.push(tape.scale(ce_sum, 0.5));

            let (pair_align, align) = alignment_residual(
                &mut tape,
                bb_src.pooled,
                bb_src.centroid,
                bb_tgt.pooled,
                bb_tgt.centroid,
            )?;
            align_terms.push(pair_align);
            pose_sum += pose_loss(&motion, &align.transform);
        }

        let batch_mean = |tape: &mut GradTape, terms: &[Slot]| {
            let mut acc = terms[0];
            for t in &terms[1..] {
                acc = tape.add(acc, *t);
            }
            tape.scale(acc, 1.0 / terms.len() as f64)
        };
        let loss_occ = batch_mean(&mut tape, &occ_terms);
        let loss_align = batch_mean(&mut tape, &align_terms);

        let occ_part = tape.scale(loss_occ, opts.lambda);
        let align_part = tape.scale(loss_align, 1.0 - opts.lambda);
        let total = tape.add(occ_part, align_part);

        let record = Stage1Step {
            step,
            loss_occ: tape.scalar_value(loss_occ),
            loss_align: tape.scalar_value(loss_align),
            pose: pose_sum / opts.batch_size as f64,
            total: tape.scalar_value(total),
        };
        if !record.total.is_finite() {
            return Err(GlobalRegError::NonFiniteLoss { step });
        }

        let grads = tape.backward(total);
        let mut param_slots: Vec<Slot> = Vec::new();
        for (a, b) in &ext_slots.backbone {
            param_slots.push(*a);
            param_slots.push(*b);
        }
        param_slots.extend([ext_slots.fusion.0, ext_slots.fusion.1, ext_slots.head]);
        param_slots.extend([dec_slots.w1, dec_slots.b1, dec_slots.w2, dec_slots.b2]);
        let norm: f64 =
            param_slots.iter().map(|s| grads.get(*s).frob_norm_sq()).sum::<f64>().sqrt();
        let step_scale = if norm > opts.grad_clip {
            opts.learning_rate * opts.grad_clip / norm
        } else {
            opts.learning_rate
        };
        let update = |m: &mut DenseMatrix, s: Slot| {
            for (w, g) in m.data_mut().iter_mut().zip(grads.get(s).data()) {
                *w -= step_scale * g;
            }
        };
        for (i, l) in extractor.backbone.iter_mut().enumerate() {
            update(&mut l.linear, ext_slots.backbone[i].0);
            update(&mut l.direction, ext_slots.backbone[i].1);
        }
        update(&mut extractor.fusion.linear, ext_slots.fusion.0);
        update(&mut extractor.fusion.direction, ext_slots.fusion.1);
        update(&mut extractor.head, ext_slots.head);
        update(&mut decoder.w1, dec_slots.w1);
        update(&mut decoder.b1, dec_slots.b1);
        update(&mut decoder.w2, dec_slots.w2);
        update(&mut decoder.b2, dec_slots.b2);

        writeln!(
            log,
            "{},{},{},{},{}",
            record.step, record.loss_occ, record.loss_align, record.pose, record.total
        )?;
        trace.push(record);
    }
    Ok(trace)
}

// === tests ===

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equinet::encode_global;
    use crate::geometry::random_permutation;
    use crate::mathcore::{rotation_angle_deg, Mat3};
    use crate::shapes::generate_dataset;

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn coarse_alignment_recovers_exact_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e1);
        let w = ExtractorWeights::desk_default(11);
        let spec = PerturbationSpec {
            max_angle_deg: 180.0,
            max_translation: 0.5,
            scenario: Scenario::Clean,
            seed: 0,
        };
        for _ in 0..5 {
            let src = random_cloud(64, &mut rng);
            let motion = sample_transform(&spec, &mut rng);
            let perm = random_permutation(src.len(), &mut rng);
            let tgt = apply(&src.permuted(&perm).unwrap(), &motion);
            let result = register_coarse(&w, &src, &tgt).unwrap();
            assert!(!result.degenerate_fallback);
            let rot_err = rotation_angle_deg(&motion.rotation, &result.transform.rotation);
            let trans_err = (motion.translation - result.transform.translation).norm();
            assert!(rot_err < 1e-7, "rotation error {rot_err} deg");
            assert!(trans_err < 1e-9, "translation error {trans_err}");
        }
    }

    #[test]
    fn degenerate_features_fall_back_to_identity() {
        let channels = DenseMatrix::from_fn(8, 3, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let g1 = GlobalFeature { channels: channels.clone(), centroid: Vec3::ZERO };
        let g2 = GlobalFeature { channels, centroid: Vec3::new(0.1, 0.0, 0.0) };
        let r = align_global(&g1, &g2).unwrap();
        assert!(r.degenerate_fallback);
        assert_eq!(r.transform.rotation, Mat3::IDENTITY);
    }

    #[test]
    fn zero_decoder_predicts_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e2);
        let w = ExtractorWeights::desk_default(3);
        let d = DecoderWeights::zeros(w.global_channels(), 16);
        let cloud = random_cloud(32, &mut rng);
        let g = encode_global(&w, &cloud).unwrap();
        let queries = vec![Vec3::ZERO, Vec3::new(0.5, -0.5, 0.25)];
        let probs = occupancy_probabilities(&d, &g, &queries).unwrap();
        assert!(probs.iter().all(|p| (*p - 0.5).abs() < 1e-15), "{probs:?}");
    }

    #[test]
    fn decoder_output_is_invariant_to_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e3);
        let w = ExtractorWeights::desk_default(4);
        let d = DecoderWeights::init(w.global_channels(), 32, 7);
        let spec = PerturbationSpec {
            max_angle_deg: 180.0,
            max_translation: 0.5,
            scenario: Scenario::Clean,
            seed: 0,
        };
        let cloud = random_cloud(48, &mut rng);
        let motion = sample_transform(&spec, &mut rng);
        let queries: Vec<Vec3> = (0..16)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let moved_queries: Vec<Vec3> = queries.iter().map(|q| motion.apply_point(*q)).collect();

        let g0 = encode_global(&w, &cloud).unwrap();
        let g1 = encode_global(&w, &apply(&cloud, &motion)).unwrap();
        let p0 = occupancy_probabilities(&d, &g0, &queries).unwrap();
        let p1 = occupancy_probabilities(&d, &g1, &moved_queries).unwrap();
        for (a, b) in p0.iter().zip(p1.iter()) {
            assert!((a - b).abs() < 1e-9, "probability drifted: {a} vs {b}");
        }
    }

    #[test]
    fn pose_loss_matches_analytic_anchors() {
        let id = RigidTransform::IDENTITY;
        assert_eq!(pose_loss(&id, &id), 0.0);
        let half_turn = RigidTransform {
            rotation: Mat3::rot_z(std::f64::consts::PI),
            translation: Vec3::ZERO,
        };
        assert!((pose_loss(&id, &half_turn) - 8.0).abs() < 1e-12);
        let shifted =
            RigidTransform { rotation: Mat3::IDENTITY, translation: Vec3::new(0.3, 0.0, 0.0) };
        assert!((pose_loss(&id, &shifted) - 0.09).abs() < 1e-15);
    }

    #[test]
    fn alignment_residual_is_zero_for_conjugate_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e4);
        let w = ExtractorWeights::desk_default(6);
        let spec = PerturbationSpec {
            max_angle_deg: 180.0,
            max_translation: 0.5,
            scenario: Scenario::Clean,
            seed: 0,
        };
        let src = random_cloud(40, &mut rng);
        let motion = sample_transform(&spec, &mut rng);
        let tgt = apply(&src, &motion);

        let mut tape = GradTape::new();
        let slots = insert_weights(&mut tape, &w);
        let bs = backbone_forward(&mut tape, &slots, w.knn, &src).unwrap();
        let bt = backbone_forward(&mut tape, &slots, w.knn, &tgt).unwrap();
        let (res, align) =
            alignment_residual(&mut tape, bs.pooled, bs.centroid, bt.pooled, bt.centroid)
                .unwrap();
        assert!(!align.degenerate_fallback);
        assert!(tape.scalar_value(res) < 1e-20, "residual {}", tape.scalar_value(res));
        assert!(pose_loss(&motion, &align.transform) < 1e-18);
    }

    #[test]
    fn stage1_is_deterministic_and_logs_every_step() {
        let shapes = {
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e5);
            generate_dataset(3, &mut rng).unwrap()
        };
        let opts = Stage1Options {
            steps: 5,
            points_per_cloud: 24,
            queries_per_cloud: 12,
            ..Stage1Options::default()
        };
        let run = |seed: u64| {
            let mut w = ExtractorWeights::init(
                &crate::equinet::ExtractorConfig {
                    backbone_widths: vec![6, 8],
                    fusion_width: 6,
                    invariant_channels: 4,
                    knn: 6,
                },
                seed,
            );
            let mut d = DecoderWeights::init(w.global_channels(), 12, seed);
            let mut log = Vec::new();
            let trace =
                train_stage1(&mut w, &mut d, &shapes, &opts, &mut log).expect("training runs");
            (w, d, trace, log)
        };
        let (w1, d1, t1, l1) = run(1);
        let (w2, d2, t2, l2) = run(1);
        assert_eq!(w1, w2);
        assert_eq!(d1, d2);
        assert_eq!(t1, t2);
        assert_eq!(l1, l2);
        assert_eq!(t1.len(), 5);
        let text = String::from_utf8(l1).unwrap();
        assert_eq!(text.lines().count(), 6, "header plus one line per step");
        assert!(text.lines().next().unwrap().starts_with("step,"));
        assert!(t1.iter().all(|s| s.total.is_finite()));
    }

    #[test]
    fn lambda_one_reduces_total_to_occupancy_only() {
        let shapes = {
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e6);
            generate_dataset(2, &mut rng).unwrap()
        };
        let opts = Stage1Options {
            steps: 3,
            lambda: 1.0,
            points_per_cloud: 24,
            queries_per_cloud: 12,
            ..Stage1Options::default()
        };
        let mut w = ExtractorWeights::init(
            &crate::equinet::ExtractorConfig {
                backbone_widths: vec![6, 8],
                fusion_width: 6,
                invariant_channels: 4,
                knn: 6,
            },
            2,
        );
        let mut d = DecoderWeights::init(w.global_channels(), 12, 2);
        let mut log = Vec::new();
        let trace = train_stage1(&mut w, &mut d, &shapes, &opts, &mut log).unwrap();
        for s in &trace {
            assert!((s.total - s.loss_occ).abs() < 1e-12);
        }
    }

    #[test]
    fn option_validation_rejects_bad_values() {
        let base = Stage1Options::default();
        for bad in [
            Stage1Options { steps: 0, ..base.clone() },
            Stage1Options { learning_rate: 0.0, ..base.clone() },
            Stage1Options { lambda: 1.5, ..base.clone() },
            Stage1Options { points_per_cloud: 3, ..base.clone() },
            Stage1Options { queries_per_cloud: 0, ..base.clone() },
            Stage1Options { grad_clip: 0.0, ..base.clone() },
            Stage1Options { max_angle_deg: 181.0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(base.validate().is_ok());
    }
}
