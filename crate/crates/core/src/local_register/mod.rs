//! Fine registration stage: keep only the most significant points, match
//! them by descriptor and distance similarity, and tighten the coarse
//! estimate with a few rounds of weighted closed-form fitting.
//!
//! Every component has two routes. The untrained route uses deterministic
//! heuristics (descriptor distinctiveness for significance, blended
//! descriptor and Euclidean distance for similarity, softmax confidence for
//! weights) so the full pipeline runs before any training. The learned route
//! swaps in small heads trained in the second stage while the feature
//! extractor stays frozen; the trainer records a content hash of the
//! extractor before and after so the freeze is checkable, not assumed.

use std::io::Write;

use crate::equinet::{encode_full, EquinetError, ExtractorWeights, LocalFeature, Section};
use crate::geometry::{
    apply, random_permutation, sample_transform, GeometryError, PerturbationSpec, PointCloud,
    RigidTransform, Scenario,
};
use crate::global_register::{align_global, pose_loss, GlobalRegError};
use crate::mathcore::{weighted_kabsch, DenseMatrix, GradTape, MathError, Slot, Vec3};
use crate::shapes::{sample_surface, ShapeModel, ShapesError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Fraction of points that survive hard elimination: the top `1/6`.
pub const KEEP_DIVISOR: usize = 6;
/// Weight of the Euclidean channel in the untrained similarity blend.
pub const FALLBACK_EUCLID_WEIGHT: f64 = 0.5;
/// Soft-label temperature for confidence supervision: a match `r` away from
/// the true position gets target weight `exp(-r / tau)`.
pub const CONF_LABEL_TAU: f64 = 0.1;
/// A point counts as matchable when its feature-nearest neighbor lies within
/// this distance of its true corresponding position.
pub const MATCHABILITY_RADIUS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum LocalRegError {
    #[error("too few points: refinement needs at least {min}, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("feature extraction: {0}")]
    Feature(#[from] EquinetError),
    #[error("coarse alignment: {0}")]
    Coarse(#[from] GlobalRegError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("shape sampling: {0}")]
    Shapes(#[from] ShapesError),
    #[error("numerics: {0}")]
    Math(#[from] MathError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

// === learned heads ===

/// Per-point significance head: descriptor in, scalar score out.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerWeights {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
}

impl ScorerWeights {
    pub fn init(descriptor_width: usize, hidden: usize, seed: u64) -> ScorerWeights {
        assert!(descriptor_width >= 1 && hidden >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
        };
        let w1 = mat(hidden, descriptor_width);
        let w2 = mat(1, hidden);
        ScorerWeights { w1, b1: DenseMatrix::zeros(hidden, 1), w2, b2: DenseMatrix::zeros(1, 1) }
    }

    pub fn descriptor_width(&self) -> usize {
        self.w1.cols()
    }

    pub fn validate(&self) -> Result<(), LocalRegError> {
        let h = self.w1.rows();
        if self.b1.rows() != h || self.b1.cols() != 1 {
            return Err(LocalRegError::InvalidParameter("scorer b1 must be hidden x 1".into()));
        }
        if self.w2.rows() != 1 || self.w2.cols() != h {
            return Err(LocalRegError::InvalidParameter("scorer w2 must be 1 x hidden".into()));
        }
        if self.b2.rows() != 1 || self.b2.cols() != 1 {
            return Err(LocalRegError::InvalidParameter("scorer b2 must be 1 x 1".into()));
        }
        Ok(())
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new("scorer");
        s.push("w1", self.w1.clone());
        s.push("b1", self.b1.clone());
        s.push("w2", self.w2.clone());
        s.push("b2", self.b2.clone());
        s
    }

    pub fn from_section(s: &Section) -> Result<ScorerWeights, LocalRegError> {
        let sc = ScorerWeights {
            w1: section_tensor(s, "w1")?,
            b1: section_tensor(s, "b1")?,
            w2: section_tensor(s, "w2")?,
            b2: section_tensor(s, "b2")?,
        };
        sc.validate()?;
        Ok(sc)
    }
}

/// Pair similarity and match confidence heads. The similarity head maps the
/// three pair channels (descriptor cosine, negated descriptor distance,
/// negated point distance) to a logit; the confidence head maps a row's best
/// probability and its margin to a correspondence weight.
#[derive(Clone, Debug, PartialEq)]
pub struct MatcherWeights {
    pub sim_w1: DenseMatrix,
    pub sim_b1: DenseMatrix,
    pub sim_w2: DenseMatrix,
    pub sim_b2: DenseMatrix,
    pub conf_w1: DenseMatrix,
    pub conf_b1: DenseMatrix,
    pub conf_w2: DenseMatrix,
    pub conf_b2: DenseMatrix,
}

impl MatcherWeights {
    pub fn init(hidden: usize, seed: u64) -> MatcherWeights {
        assert!(hidden >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
        };
        let sim_w1 = mat(hidden, 3);
        let sim_w2 = mat(1, hidden);
        let conf_w1 = mat(hidden, 2);
        let conf_w2 = mat(1, hidden);
        MatcherWeights {
            sim_w1,
            sim_b1: DenseMatrix::zeros(hidden, 1),
            sim_w2,
            sim_b2: DenseMatrix::zeros(1, 1),
            conf_w1,
            conf_b1: DenseMatrix::zeros(hidden, 1),
            conf_w2,
            conf_b2: DenseMatrix::zeros(1, 1),
        }
    }

    pub fn validate(&self) -> Result<(), LocalRegError> {
        if self.sim_w1.cols() != 3 {
            return Err(LocalRegError::InvalidParameter(
                "similarity head expects 3 pair channels".into(),
            ));
        }
        if self.conf_w1.cols() != 2 {
            return Err(LocalRegError::InvalidParameter(
                "confidence head expects 2 row channels".into(),
            ));
        }
        for (name, w, b1, w2, b2) in [
            ("similarity", &self.sim_w1, &self.sim_b1, &self.sim_w2, &self.sim_b2),
            ("confidence", &self.conf_w1, &self.conf_b1, &self.conf_w2, &self.conf_b2),
        ] {
            let h = w.rows();
            if b1.rows() != h || b1.cols() != 1 || w2.rows() != 1 || w2.cols() != h {
                return Err(LocalRegError::InvalidParameter(format!(
                    "{name} head has inconsistent hidden width"
                )));
            }
            if b2.rows() != 1 || b2.cols() != 1 {
                return Err(LocalRegError::InvalidParameter(format!(
                    "{name} head output bias must be 1 x 1"
                )));
            }
        }
        Ok(())
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new("matcher");
        s.push("sim_w1", self.sim_w1.clone());
        s.push("sim_b1", self.sim_b1.clone());
        s.push("sim_w2", self.sim_w2.clone());
        s.push("sim_b2", self.sim_b2.clone());
        s.push("conf_w1", self.conf_w1.clone());
        s.push("conf_b1", self.conf_b1.clone());
        s.push("conf_w2", self.conf_w2.clone());
        s.push("conf_b2", self.conf_b2.clone());
        s
    }

    pub fn from_section(s: &Section) -> Result<MatcherWeights, LocalRegError> {
        let m = MatcherWeights {
            sim_w1: section_tensor(s, "sim_w1")?,
            sim_b1: section_tensor(s, "sim_b1")?,
            sim_w2: section_tensor(s, "sim_w2")?,
            sim_b2: section_tensor(s, "sim_b2")?,
            conf_w1: section_tensor(s, "conf_w1")?,
            conf_b1: section_tensor(s, "conf_b1")?,
            conf_w2: section_tensor(s, "conf_w2")?,
            conf_b2: section_tensor(s, "conf_b2")?,
        };
        m.validate()?;
        Ok(m)
    }
}

fn section_tensor(s: &Section, name: &str) -> Result<DenseMatrix, LocalRegError> {
    s.tensor(name).cloned().ok_or_else(|| {
        LocalRegError::InvalidParameter(format!("section '{}' is missing tensor '{name}'", s.name))
    })
}

/// Two-layer tanh MLP applied to every column of `x`: `(1, M)` output.
fn mlp_columns(
    w1: &DenseMatrix,
    b1: &DenseMatrix,
    w2: &DenseMatrix,
    b2: &DenseMatrix,
    x: &DenseMatrix,
) -> DenseMatrix {
    let mut h = w1.matmul(x);
    for i in 0..h.rows() {
        for j in 0..h.cols() {
            h.set(i, j, (h.at(i, j) + b1.at(i, 0)).tanh());
        }
    }
    let out = w2.matmul(&h);
    out.map(|v| v + b2.at(0, 0))
}

// === elimination ===

/// Significance score per point. With a trained scorer this is its logit;
/// without one it is the descriptor's distinctiveness, the distance from
/// the mean descriptor, which is invariant to rigid motion and consistent
/// across copies of the same cloud.
pub fn elimination_scores(
    local: &LocalFeature,
    scorer: Option<&ScorerWeights>,
) -> Result<Vec<f64>, LocalRegError> {
    let n = local.points();
    let width = local.width();
    if n == 0 {
        return Err(LocalRegError::TooFewPoints { min: 1, got: 0 });
    }
    match scorer {
        Some(sc) => {
            sc.validate()?;
            if sc.descriptor_width() != width {
                return Err(LocalRegError::ShapeMismatch(format!(
                    "scorer expects width {}, descriptors have {width}",
                    sc.descriptor_width()
                )));
            }
            let logits =
                mlp_columns(&sc.w1, &sc.b1, &sc.w2, &sc.b2, &local.descriptors.transpose());
            Ok(logits.data().to_vec())
        }
        None => {
            let mut mean = vec![0.0; width];
            for i in 0..n {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += local.descriptors.at(i, c);
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            Ok((0..n)
                .map(|i| {
                    let mut acc = 0.0;
                    for (c, m) in mean.iter().enumerate() {
                        let d = local.descriptors.at(i, c) - m;
                        acc += d * d;
                    }
                    acc.sqrt()
                })
                .collect())
        }
    }
}

/// Indices of the `floor(N / 6)` highest-scoring points, ascending. Ties
/// prefer the lower index so the subset is deterministic. Errors when fewer
/// than three points would survive, because the closed-form fit needs three.
pub fn hard_eliminate(scores: &[f64]) -> Result<Vec<usize>, LocalRegError> {
    let n = scores.len();
    let keep = n / KEEP_DIVISOR;
    if keep < 3 {
        return Err(LocalRegError::TooFewPoints { min: 3 * KEEP_DIVISOR, got: n });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LocalRegError::InvalidParameter("non-finite significance score".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

// === similarity ===

/// L2-normalized descriptor rows; zero rows stay zero.
fn normalized_rows(desc: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), desc.cols());
    for (r, &i) in rows.iter().enumerate() {
        let norm = desc.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for c in 0..desc.cols() {
                out.set(r, c, desc.at(i, c) / norm);
            }
        }
    }
    out
}

/// The three channels of one candidate pair, from normalized descriptor rows
/// `f` and `g` and the already-transformed source point `x` against target
/// point `q`: descriptor cosine, negated descriptor distance, negated point
/// distance.
fn pair_channels(f: &[f64], g: &[f64], x: Vec3, q: Vec3) -> [f64; 3] {
    let mut dot = 0.0;
    let mut dist_sq = 0.0;
    for (a, b) in f.iter().zip(g.iter()) {
        dot += a * b;
        let d = a - b;
        dist_sq += d * d;
    }
    [dot, -dist_sq.sqrt(), -(x - q).norm()]
}

/// Similarity logits between kept source points (rows, already moved by the
/// current estimate) and kept target points (columns). The learned head
/// scores the three pair channels; the untrained blend penalizes descriptor
/// distance plus [`FALLBACK_EUCLID_WEIGHT`] times point distance.
pub fn similarity_matrix(
    src_desc: &DenseMatrix,
    tgt_desc: &DenseMatrix,
    src_points: &[Vec3],
    tgt_points: &[Vec3],
    matcher: Option<&MatcherWeights>,
) -> Result<DenseMatrix, LocalRegError> {
    if src_desc.rows() != src_points.len() || tgt_desc.rows() != tgt_points.len() {
        return Err(LocalRegError::ShapeMismatch(format!(
            "{} descriptors for {} source points, {} for {} target points",
            src_desc.rows(),
            src_points.len(),
            tgt_desc.rows(),
            tgt_points.len()
        )));
    }
    if src_desc.cols() != tgt_desc.cols() {
        return Err(LocalRegError::ShapeMismatch("descriptor widths differ".into()));
    }
    let (rows, cols) = (src_points.len(), tgt_points.len());
    if let Some(m) = matcher {
        m.validate()?;
        let mut x = DenseMatrix::zeros(3, rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let ch = pair_channels(
                    src_desc.row_slice(i),
                    tgt_desc.row_slice(j),
                    src_points[i],
                    tgt_points[j],
                );
                for (c, v) in ch.iter().enumerate() {
                    x.set(c, i * cols + j, *v);
                }
            }
        }
        let logits = mlp_columns(&m.sim_w1, &m.sim_b1, &m.sim_w2, &m.sim_b2, &x);
        Ok(DenseMatrix::from_fn(rows, cols, |i, j| logits.at(0, i * cols + j)))
    } else {
        Ok(DenseMatrix::from_fn(rows, cols, |i, j| {
            let ch = pair_channels(
                src_desc.row_slice(i),
                tgt_desc.row_slice(j),
                src_points[i],
                tgt_points[j],
            );
            ch[1] + FALLBACK_EUCLID_WEIGHT * ch[2]
        }))
    }
}

/// Numerically stable softmax over each row; every row sums to one.
pub fn row_softmax(m: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row_slice(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..m.cols() {
            out.set(i, j, out.at(i, j) / sum);
        }
    }
    out
}

/// Best column and weight of one probability row: the argmax column (ties
/// prefer the lower index), and either the learned confidence of the row or,
/// untrained, the winning probability itself.
fn row_correspondence(probs: &[f64], matcher: Option<&MatcherWeights>) -> (usize, f64) {
    let mut best = 0usize;
    for (j, v) in probs.iter().enumerate() {
        if *v > probs[best] {
            best = j;
        }
    }
    let p_max = probs[best];
    let mut second = f64::NEG_INFINITY;
    for (j, v) in probs.iter().enumerate() {
        if j != best {
            second = second.max(*v);
        }
    }
    let margin = if second.is_finite() { p_max - second } else { p_max };
    match matcher {
        Some(m) => {
            let x = DenseMatrix::from_vec(2, 1, vec![p_max, margin]);
            let logit = mlp_columns(&m.conf_w1, &m.conf_b1, &m.conf_w2, &m.conf_b2, &x).at(0, 0);
            (best, stable_sigmoid(logit))
        }
        None => (best, p_max),
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// === refinement ===

/// Outcome of the iterative refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineReport {
    pub transform: RigidTransform,
    /// Iterations that actually updated the estimate.
    pub iterations_run: usize,
    /// True when an iteration's weighted fit was degenerate and refinement
    /// stopped early, keeping the last good estimate.
    pub degenerate_fallback: bool,
    pub kept_src: Vec<usize>,
    pub kept_tgt: Vec<usize>,
}

/// Tightens `init` by repeatedly matching the surviving source points
/// (moved by the current estimate) against the surviving target points and
/// refitting. Each iteration softmax-normalizes the similarity rows, takes
/// the best column per row as the correspondence with its confidence as the
/// fit weight, solves the weighted closed-form alignment, and composes the
/// increment onto the estimate.
pub fn refine(
    src: &PointCloud,
    tgt: &PointCloud,
    src_local: &LocalFeature,
    tgt_local: &LocalFeature,
    init: &RigidTransform,
    scorer: Option<&ScorerWeights>,
    matcher: Option<&MatcherWeights>,
    iterations: usize,
) -> Result<RefineReport, LocalRegError> {
    if iterations == 0 {
        return Err(LocalRegError::InvalidParameter("need at least one iteration".into()));
    }
    if src.len() != src_local.points() || tgt.len() != tgt_local.points() {
        return Err(LocalRegError::ShapeMismatch(format!(
            "{} source points with {} descriptors, {} target points with {} descriptors",
            src.len(),
            src_local.points(),
            tgt.len(),
            tgt_local.points()
        )));
    }
    let kept_src = hard_eliminate(&elimination_scores(src_local, scorer)?)?;
    let kept_tgt = hard_eliminate(&elimination_scores(tgt_local, scorer)?)?;

    let src_desc = normalized_rows(&src_local.descriptors, &kept_src);
    let tgt_desc = normalized_rows(&tgt_local.descriptors, &kept_tgt);
    let src_pts: Vec<Vec3> = kept_src.iter().map(|&i| src.points()[i]).collect();
    let tgt_pts: Vec<Vec3> = kept_tgt.iter().map(|&i| tgt.points()[i]).collect();

    let mut current = *init;
    let mut degenerate = false;
    let mut iterations_run = 0;
    for _ in 0..iterations {
        let moved: Vec<Vec3> = src_pts.iter().map(|p| current.apply_point(*p)).collect();
        let sim = similarity_matrix(&src_desc, &tgt_desc, &moved, &tgt_pts, matcher)?;
        let probs = row_softmax(&sim);
        let mut matched = Vec::with_capacity(moved.len());
        let mut weights = Vec::with_capacity(moved.len());
        for i in 0..moved.len() {
            let (j, w) = row_correspondence(probs.row_slice(i), matcher);
            matched.push(tgt_pts[j]);
            weights.push(w);
        }
        match weighted_kabsch(&moved, &matched, &weights) {
            Ok(delta) => {
                current = delta.compose(&current);
                iterations_run += 1;
            }
            Err(MathError::DegenerateConfiguration(_)) | Err(MathError::InvalidInput(_)) => {
                degenerate = true;
                break;
            }
            Err(e) => return Err(LocalRegError::Math(e)),
        }
    }
    Ok(RefineReport {
        transform: current,
        iterations_run,
        degenerate_fallback: degenerate,
        kept_src,
        kept_tgt,
    })
}

/// Result of running both stages end to end.
#[derive(Clone, Debug, PartialEq)]
pub struct FullResult {
    pub coarse: RigidTransform,
    pub refined: RigidTransform,
    pub coarse_degenerate: bool,
    pub refine_degenerate: bool,
}

/// Coarse-to-fine registration in one call: encode both clouds once, align
/// the global features, then refine with the local descriptors.
pub fn register_full(
    w: &ExtractorWeights,
    scorer: Option<&ScorerWeights>,
    matcher: Option<&MatcherWeights>,
    src: &PointCloud,
    tgt: &PointCloud,
    iterations: usize,
) -> Result<FullResult, LocalRegError> {
    let (gs, ls) = encode_full(w, src)?;
    let (gt, lt) = encode_full(w, tgt)?;
    let coarse = align_global(&gs, &gt)?;
    let report =
        refine(src, tgt, &ls, &lt, &coarse.transform, scorer, matcher, iterations)?;
    Ok(FullResult {
        coarse: coarse.transform,
        refined: report.transform,
        coarse_degenerate: coarse.degenerate_fallback,
        refine_degenerate: report.degenerate_fallback,
    })
}

// === stage-2 training ===

/// Hyperparameters of the fine training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Options {
    pub steps: usize,
    pub learning_rate: f64,
    pub points_per_cloud: usize,
    pub max_angle_deg: f64,
    pub max_translation: f64,
    /// Weight of the significance and confidence terms next to the matching
    /// term.
    pub aux_weight: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Stage2Options {
            steps: 200,
            learning_rate: 0.05,
            points_per_cloud: 64,
            max_angle_deg: 180.0,
            max_translation: 0.5,
            aux_weight: 0.5,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl Stage2Options {
    pub fn validate(&self) -> Result<(), LocalRegError> {
        if self.steps == 0 {
            return Err(LocalRegError::InvalidParameter("steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(LocalRegError::InvalidParameter("learning rate must be positive".into()));
        }
        if self.points_per_cloud < 3 * KEEP_DIVISOR {
            return Err(LocalRegError::InvalidParameter(format!(
                "need at least {} points per cloud",
                3 * KEEP_DIVISOR
            )));
        }
        if !(self.aux_weight >= 0.0) || !self.aux_weight.is_finite() {
            return Err(LocalRegError::InvalidParameter(
                "auxiliary weight must be non-negative".into(),
            ));
        }
        if !(self.grad_clip > 0.0) {
            return Err(LocalRegError::InvalidParameter("grad clip must be positive".into()));
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

/// Per-step record of the fine training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Step {
    pub step: usize,
    /// Mean softmax cross-entropy of the similarity rows against the true
    /// correspondence columns.
    pub loss_match: f64,
    /// Mean sigmoid cross-entropy of significance logits against
    /// matchability labels.
    pub loss_score: f64,
    /// Mean sigmoid cross-entropy of confidence logits against soft labels
    /// from match quality.
    pub loss_conf: f64,
    pub total: f64,
    /// Pose discrepancy of the refined estimate started from the true
    /// motion's coarse fit (monitoring only).
    pub pose: f64,
}

/// Report of the fine training stage, including proof that the extractor
/// stayed frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Report {
    pub trace: Vec<Stage2Step>,
    pub extractor_hash_before: u64,
    pub extractor_hash_after: u64,
}

/// Trains the significance, similarity, and confidence heads on sampled
/// pairs with known correspondences while the extractor stays frozen. Each
/// step samples a cloud, builds its permuted and rigidly moved copy, encodes
/// both with the frozen extractor, and supervises: the similarity head with
/// the true correspondence columns (distances teacher-forced by the true
/// motion), the scorer with matchability labels, and the confidence head
/// with soft labels from match quality. Writes one CSV line per step and is
/// deterministic for a fixed seed.
pub fn train_stage2(
    extractor: &ExtractorWeights,
    scorer: &mut ScorerWeights,
    matcher: &mut MatcherWeights,
    shapes: &[ShapeModel],
    opts: &Stage2Options,
    log: &mut dyn Write,
) -> Result<Stage2Report, LocalRegError> {
    opts.validate()?;
    extractor.validate()?;
    scorer.validate()?;
    matcher.validate()?;
    if shapes.is_empty() {
        return Err(LocalRegError::InvalidParameter("no training shapes".into()));
    }
    if scorer.descriptor_width() != extractor.descriptor_channels() {
        return Err(LocalRegError::ShapeMismatch(format!(
            "scorer expects width {}, extractor produces {}",
            scorer.descriptor_width(),
            extractor.descriptor_channels()
        )));
    }
    let hash_before = extractor.content_hash();
    let spec = PerturbationSpec {
        max_angle_deg: opts.max_angle_deg,
        max_translation: opts.max_translation,
        scenario: Scenario::Clean,
        seed: opts.seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trace = Vec::with_capacity(opts.steps);
    writeln!(log, "step,loss_match,loss_score,loss_conf,total,pose")?;

    for step in 0..opts.steps {
        let shape = &shapes[rng.random_range(0..shapes.len())];
        let src = sample_surface(shape, opts.points_per_cloud, &mut rng)?;
        let perm = random_permutation(src.len(), &mut rng);
        let motion = sample_transform(&spec, &mut rng);
        let tgt = apply(&src.permuted(&perm)?, &motion);
        // Target row `perm[k] = old index`, so source point `i` sits at
        // target row `position[i]`.
        let mut position = vec![0usize; src.len()];
        for (new_i, &old_i) in perm.iter().enumerate() {
            position[old_i] = new_i;
        }

        let (src_global, src_local) = encode_full(extractor, &src)?;
        let (tgt_global, tgt_local) = encode_full(extractor, &tgt)?;
        let n = src.len();

        // Teacher-forced pair channels: distances under the true motion.
        let all: Vec<usize> = (0..n).collect();
        let src_desc = normalized_rows(&src_local.descriptors, &all);
        let tgt_desc = normalized_rows(&tgt_local.descriptors, &all);
        let moved: Vec<Vec3> = src.points().iter().map(|p| motion.apply_point(*p)).collect();

        // Matchability labels: the feature-nearest target row must land
        // within MATCHABILITY_RADIUS of the true corresponding position.
        let mut match_labels = DenseMatrix::zeros(1, n);
        for i in 0..n {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for j in 0..n {
                let mut acc = 0.0;
                for c in 0..src_desc.cols() {
                    let d = src_desc.at(i, c) - tgt_desc.at(j, c);
                    acc += d * d;
                }
                if acc < best_dist {
                    best_dist = acc;
                    best = j;
                }
            }
            let miss = (tgt.points()[best] - moved[i]).norm();
            if miss <= MATCHABILITY_RADIUS {
                match_labels.set(0, i, 1.0);
            }
        }

        let mut tape = GradTape::new();
        let sc = [
            tape.input(scorer.w1.clone()),
            tape.input(scorer.b1.clone()),
            tape.input(scorer.w2.clone()),
            tape.input(scorer.b2.clone()),
        ];
        let sm = [
            tape.input(matcher.sim_w1.clone()),
            tape.input(matcher.sim_b1.clone()),
            tape.input(matcher.sim_w2.clone()),
            tape.input(matcher.sim_b2.clone()),
        ];
        let cf = [
            tape.input(matcher.conf_w1.clone()),
            tape.input(matcher.conf_b1.clone()),
            tape.input(matcher.conf_w2.clone()),
            tape.input(matcher.conf_b2.clone()),
        ];
        let mlp_rows = |tape: &mut GradTape, w: &[Slot; 4], x: DenseMatrix| {
            let xs = tape.constant(x);
            let a1 = tape.matmul(w[0], xs);
            let a1 = tape.add_col_broadcast(a1, w[1]);
            let h = tape.tanh(a1);
            let a2 = tape.matmul(w[2], h);
            tape.add_col_broadcast(a2, w[3])
        };

        // Similarity rows against the true correspondence columns.
        let mut score_rows: Option<Slot> = None;
        for i in 0..n {
            let mut x = DenseMatrix::zeros(3, n);
            for j in 0..n {
                let ch = pair_channels(
                    src_desc.row_slice(i),
                    tgt_desc.row_slice(j),
                    moved[i],
                    tgt.points()[j],
                );
                for (c, v) in ch.iter().enumerate() {
                    x.set(c, j, *v);
                }
            }
            let row = mlp_rows(&mut tape, &sm, x);
            score_rows = Some(match score_rows {
                None => row,
                Some(prev) => tape.concat_rows(prev, row),
            });
        }
        let scores = score_rows.expect("at least one row");
        let loss_match = tape.softmax_xent_rows_mean(scores, position.clone());

        // Significance logits against matchability labels, averaged.
        let scorer_logits = mlp_rows(&mut tape, &sc, src_local.descriptors.transpose());
        let score_ce = tape.ce_with_logits_sum(scorer_logits, match_labels);
        let loss_score = tape.scale(score_ce, 1.0 / n as f64);

        // Confidence inputs and soft labels from the current similarity.
        let probs = row_softmax(tape.value(scores));
        let mut conf_x = DenseMatrix::zeros(2, n);
        let mut conf_labels = DenseMatrix::zeros(1, n);
        for i in 0..n {
            let row = probs.row_slice(i);
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            let mut second = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if j != best {
                    second = second.max(*v);
                }
            }
            conf_x.set(0, i, row[best]);
            conf_x.set(1, i, row[best] - second.max(0.0));
            let miss = (tgt.points()[best] - moved[i]).norm();
            conf_labels.set(0, i, (-miss / CONF_LABEL_TAU).exp());
        }
        let conf_logits = mlp_rows(&mut tape, &cf, conf_x);
        let conf_ce = tape.ce_with_logits_sum(conf_logits, conf_labels);
        let loss_conf = tape.scale(conf_ce, 1.0 / n as f64);

        let aux = tape.add(loss_score, loss_conf);
        let aux_scaled = tape.scale(aux, opts.aux_weight);
        let total = tape.add(loss_match, aux_scaled);

        let record_pose = {
            let coarse = align_global(&src_global, &tgt_global)?;
            let refined = refine(
                &src,
                &tgt,
                &src_local,
                &tgt_local,
                &coarse.transform,
                Some(scorer),
                Some(matcher),
                3,
            )?;
            pose_loss(&motion, &refined.transform)
        };

        let record = Stage2Step {
            step,
            loss_match: tape.scalar_value(loss_match),
            loss_score: tape.scalar_value(loss_score),
            loss_conf: tape.scalar_value(loss_conf),
            total: tape.scalar_value(total),
            pose: record_pose,
        };
        if !record.total.is_finite() {
            return Err(LocalRegError::NonFiniteLoss { step });
        }

        let grads = tape.backward(total);
        let params: Vec<Slot> = sc.iter().chain(sm.iter()).chain(cf.iter()).copied().collect();
        let norm: f64 = params.iter().map(|s| grads.get(*s).frob_norm_sq()).sum::<f64>().sqrt();
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
        update(&mut scorer.w1, sc[0]);
        update(&mut scorer.b1, sc[1]);
        update(&mut scorer.w2, sc[2]);
        update(&mut scorer.b2, sc[3]);
        update(&mut matcher.sim_w1, sm[0]);
        update(&mut matcher.sim_b1, sm[1]);
        update(&mut matcher.sim_w2, sm[2]);
        update(&mut matcher.sim_b2, sm[3]);
        update(&mut matcher.conf_w1, cf[0]);
        update(&mut matcher.conf_b1, cf[1]);
        update(&mut matcher.conf_w2, cf[2]);
        update(&mut matcher.conf_b2, cf[3]);

        writeln!(
            log,
            "{},{},{},{},{},{}",
            record.step,
            record.loss_match,
            record.loss_score,
            record.loss_conf,
            record.total,
            record.pose
        )?;
        trace.push(record);
    }
    Ok(Stage2Report {
        trace,
        extractor_hash_before: hash_before,
        extractor_hash_after: extractor.content_hash(),
    })
}

// === tests ===

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equinet::ExtractorConfig;
    use crate::mathcore::rotation_angle_deg;
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

    fn small_extractor(seed: u64) -> ExtractorWeights {
        ExtractorWeights::init(
            &ExtractorConfig {
                backbone_widths: vec![8, 8],
                fusion_width: 8,
                invariant_channels: 4,
                knn: 8,
            },
            seed,
        )
    }

    #[test]
    fn elimination_keeps_a_sixth_preferring_high_scores() {
        let scores: Vec<f64> = (0..24).map(|i| (i % 7) as f64).collect();
        let kept = hard_eliminate(&scores).unwrap();
        assert_eq!(kept.len(), 4);
        // Scores 6.0 sit at indices 6, 13, 20; next best is 5.0 at index 5.
        assert_eq!(kept, vec![5, 6, 13, 20]);
        assert!(matches!(
            hard_eliminate(&vec![1.0; 17]),
            Err(LocalRegError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn elimination_ties_prefer_lower_index() {
        let kept = hard_eliminate(&vec![1.0; 18]).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn fallback_scores_are_permutation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x10c);
        let w = small_extractor(1);
        let cloud = random_cloud(36, &mut rng);
        let (_, local) = encode_full(&w, &cloud).unwrap();
        let scores = elimination_scores(&local, None).unwrap();

        let perm = random_permutation(cloud.len(), &mut rng);
        let shuffled = cloud.permuted(&perm).unwrap();
        let (_, local_p) = encode_full(&w, &shuffled).unwrap();
        let scores_p = elimination_scores(&local_p, None).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            assert!((scores_p[new_i] - scores[old_i]).abs() < 1e-9);
        }
    }

    #[test]
    fn row_softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x10d);
        let m = DenseMatrix::from_fn(7, 11, |_, _| rng.random_range(-30.0..30.0));
        let p = row_softmax(&m);
        for i in 0..p.rows() {
            let sum: f64 = p.row_slice(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
            assert!(p.row_slice(i).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn refinement_preserves_exact_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x10e);
        let w = small_extractor(2);
        let spec = PerturbationSpec {
            max_angle_deg: 180.0,
            max_translation: 0.5,
            scenario: Scenario::Clean,
            seed: 0,
        };
        for _ in 0..3 {
            let src = random_cloud(48, &mut rng);
            let perm = random_permutation(src.len(), &mut rng);
            let motion = sample_transform(&spec, &mut rng);
            let tgt = apply(&src.permuted(&perm).unwrap(), &motion);
            let full = register_full(&w, None, None, &src, &tgt, 3).unwrap();
            assert!(!full.coarse_degenerate && !full.refine_degenerate);
            let rot_err = rotation_angle_deg(&motion.rotation, &full.refined.rotation);
            let trans_err = (motion.translation - full.refined.translation).norm();
            assert!(rot_err < 1e-7, "rotation error {rot_err} deg after refinement");
            assert!(trans_err < 1e-9, "translation error {trans_err} after refinement");
            assert!(full.refined.rotation.is_rotation(1e-9));
        }
    }

    #[test]
    fn refinement_rejects_undersized_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x10f);
        let w = small_extractor(3);
        let src = random_cloud(12, &mut rng);
        let tgt = random_cloud(12, &mut rng);
        let (_, ls) = encode_full(&w, &src).unwrap();
        let (_, lt) = encode_full(&w, &tgt).unwrap();
        let r = refine(&src, &tgt, &ls, &lt, &RigidTransform::IDENTITY, None, None, 3);
        assert!(matches!(r, Err(LocalRegError::TooFewPoints { .. })));
    }

    #[test]
    fn learned_heads_round_trip_through_sections() {
        let sc = ScorerWeights::init(64, 8, 5);
        let back = ScorerWeights::from_section(&sc.to_section()).unwrap();
        assert_eq!(sc, back);
        let m = MatcherWeights::init(8, 6);
        let back = MatcherWeights::from_section(&m.to_section()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn stage2_is_deterministic_and_freezes_the_extractor() {
        let shapes = {
            let mut rng = ChaCha8Rng::seed_from_u64(0x110);
            generate_dataset(2, &mut rng).unwrap()
        };
        let w = small_extractor(4);
        let opts = Stage2Options { steps: 4, points_per_cloud: 24, ..Stage2Options::default() };
        let run = || {
            let mut sc = ScorerWeights::init(w.descriptor_channels(), 8, 9);
            let mut m = MatcherWeights::init(8, 9);
            let mut log = Vec::new();
            let report = train_stage2(&w, &mut sc, &mut m, &shapes, &opts, &mut log).unwrap();
            (sc, m, report, log)
        };
        let (sc1, m1, r1, l1) = run();
        let (sc2, m2, r2, l2) = run();
        assert_eq!(sc1, sc2);
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
        assert_eq!(l1, l2);
        assert_eq!(r1.extractor_hash_before, r1.extractor_hash_after);
        assert_eq!(r1.trace.len(), 4);
        assert!(r1.trace.iter().all(|s| s.total.is_finite()));
        let text = String::from_utf8(l1).unwrap();
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn option_validation_rejects_bad_values() {
        let base = Stage2Options::default();
        for bad in [
            Stage2Options { steps: 0, ..base.clone() },
            Stage2Options { learning_rate: -1.0, ..base.clone() },
            Stage2Options { points_per_cloud: 17, ..base.clone() },
            Stage2Options { aux_weight: f64::NAN, ..base.clone() },
            Stage2Options { grad_clip: 0.0, ..base.clone() },
            Stage2Options { max_angle_deg: -5.0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(base.validate().is_ok());
    }
}
