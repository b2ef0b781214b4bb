//! Deliberately weakened encoder variants used as experimental controls.
//!
//! Each variant removes exactly one structural constraint of the real
//! extractor so tests can demonstrate that the constraint, not luck, is what
//! makes the features transform correctly. These are reference points, not
//! fallbacks: nothing in the pipeline should route through them.

use super::{
    backbone_forward, fused_forward, insert_weights, EquinetError, ExtractorConfig,
    GlobalFeature, LocalFeature,
};
use crate::geometry::PointCloud;
use crate::mathcore::{DenseMatrix, GradTape};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Control 1: the same depth, pooling, and neighborhood wiring as the real
/// backbone, but the weights act on flattened coordinates: each layer is a
/// dense map over the stacked `3 * C` coordinate rows followed by a
/// pointwise tanh. Because the map mixes x, y and z freely, a rotation of
/// the input does not commute with it, and the pooled feature is not a
/// rotated copy of the original.
#[derive(Clone, Debug, PartialEq)]
pub struct UnconstrainedEncoder {
    /// Layer `i` maps stacked point and edge coordinates, shape
    /// `(3 * C_i, 6 * C_{i-1})`.
    pub layers: Vec<DenseMatrix>,
    pub knn: usize,
}

impl UnconstrainedEncoder {
    /// Random control encoder with the same widths as the real extractor.
    pub fn init(config: &ExtractorConfig, seed: u64) -> UnconstrainedEncoder {
        assert!(!config.backbone_widths.is_empty() && config.knn >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut c_in = 1usize;
        for &c_out in &config.backbone_widths {
            let (rows, cols) = (3 * c_out, 6 * c_in);
            // Variance-preserving scale so four tanh layers keep signal.
            let bound = (3.0 / cols as f64).sqrt();
            layers.push(DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound)));
            c_in = c_out;
        }
        UnconstrainedEncoder { layers, knn: config.knn }
    }

    /// Pooled feature in the same `(C, 3)` + centroid shape as the real
    /// global encoder, so the two can be compared side by side.
    pub fn encode_global(&self, p: &PointCloud) -> Result<GlobalFeature, EquinetError> {
        super::check_not_degenerate(p)?;
        let centroid = p.centroid();
        let n = p.len();
        let neighbors = super::knn_indices(p.points(), self.knn);

        // Features live as (3C, N) columns here: coordinates are just rows.
        let mut f = DenseMatrix::zeros(3, n);
        for (i, q) in p.points().iter().enumerate() {
            let c = *q - centroid;
            f.set(0, i, c.x);
            f.set(1, i, c.y);
            f.set(2, i, c.z);
        }
        for w in &self.layers {
            let rows = f.rows();
            let mut stacked = DenseMatrix::zeros(2 * rows, n);
            for i in 0..rows {
                for (j, nbrs) in neighbors.iter().enumerate() {
                    let mean =
                        nbrs.iter().map(|&m| f.at(i, m)).sum::<f64>() / nbrs.len() as f64;
                    stacked.set(i, j, f.at(i, j));
                    stacked.set(rows + i, j, mean - f.at(i, j));
                }
            }
            f = w.matmul(&stacked).map(f64::tanh);
        }
        let c_out = f.rows() / 3;
        let mut channels = DenseMatrix::zeros(c_out, 3);
        for ch in 0..c_out {
            for d in 0..3 {
                let mean = (0..n).map(|j| f.at(3 * ch + d, j)).sum::<f64>() / n as f64;
                channels.set(ch, d, mean);
            }
        }
        Ok(GlobalFeature { channels, centroid })
    }
}

/// Control 2: the real equivariant backbone and fusion stage, but no
/// invariant pairing head. Descriptor rows are the raw fused coordinates,
/// so they rotate with the cloud instead of staying fixed.
pub fn flat_local_descriptors(
    w: &super::ExtractorWeights,
    p: &PointCloud,
) -> Result<LocalFeature, EquinetError> {
    let mut tape = GradTape::new();
    let slots = insert_weights(&mut tape, w);
    let bb = backbone_forward(&mut tape, &slots, w.knn, p)?;
    let fused = fused_forward(&mut tape, &slots, bb.point_feat, bb.pooled, bb.points);
    let fv = tape.value(fused);
    let (c, n) = (fv.rows(), fv.cols() / 3);
    let mut descriptors = DenseMatrix::zeros(n, 3 * c);
    for i in 0..n {
        for ch in 0..c {
            for d in 0..3 {
                descriptors.set(i, 3 * ch + d, fv.at(ch, 3 * i + d));
            }
        }
    }
    Ok(LocalFeature { descriptors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::Vec3;
    use rand::Rng;

    #[test]
    fn control_encoder_matches_real_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xab1);
        let points: Vec<Vec3> = (0..40)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let cloud = PointCloud::new(points).unwrap();
        let cfg = ExtractorConfig::default();
        let ctrl = UnconstrainedEncoder::init(&cfg, 1);
        let g = ctrl.encode_global(&cloud).unwrap();
        assert_eq!(g.channels.rows(), 32);
        assert_eq!(g.channels.cols(), 3);
        assert!(g.channels.is_finite());
        assert!(g.channels.max_abs() > 0.0);

        let w = super::super::ExtractorWeights::init(&cfg, 1);
        let flat = flat_local_descriptors(&w, &cloud).unwrap();
        assert_eq!(flat.points(), 40);
        assert_eq!(flat.width(), 3 * 32);
        assert!(flat.descriptors.is_finite());
    }
}
