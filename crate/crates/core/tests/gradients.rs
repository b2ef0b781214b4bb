//! Reverse-mode gradients checked against central finite differences, op by
//! op and then through the full training losses. Every check runs the same
//! builder on fresh tapes, so a pass means the adjoint of each operation and
//! their composition agree with the numerical derivative to better than one
//! part in ten thousand.

use std::sync::Arc;

use c2f_core::equinet::{
    backbone_forward, local_forward, ExtractorConfig, ExtractorSlots, ExtractorWeights,
};
use c2f_core::geometry::{apply, PerturbationSpec, PointCloud, Scenario};
use c2f_core::global_register::{
    alignment_residual, decoder_logits, occupancy_loss, DecoderSlots, DecoderWeights,
};
use c2f_core::mathcore::{finite_difference_max_rel_err, DenseMatrix, GradTape, Slot, Vec3};
use c2f_core::shapes::OccupancySample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn check<F>(name: &str, params: &[DenseMatrix], build: F)
where
    F: Fn(&mut GradTape, &[Slot]) -> Slot,
{
    let err = finite_difference_max_rel_err(params, FD_STEP, build);
    assert!(err < FD_TOL, "{name}: worst relative gradient error {err}");
}

// === single operations ===

#[test]
fn matmul_chain_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf1);
    let params =
        vec![rand_matrix(4, 3, &mut rng), rand_matrix(3, 5, &mut rng), rand_matrix(5, 2, &mut rng)];
    check("matmul chain", &params, |tape, s| {
        let ab = tape.matmul(s[0], s[1]);
        let abc = tape.matmul(ab, s[2]);
        tape.frob_sq(abc)
    });
}

#[test]
fn add_sub_scale_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf2);
    let params = vec![rand_matrix(3, 4, &mut rng), rand_matrix(3, 4, &mut rng)];
    check("add/sub/scale", &params, |tape, s| {
        let sum = tape.add(s[0], s[1]);
        let diff = tape.sub(sum, s[1]);
        let scaled = tape.scale(diff, -1.7);
        let back = tape.add(scaled, s[0]);
        tape.frob_sq(back)
    });
}

#[test]
fn broadcast_and_pointwise_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf3);
    let params = vec![
        rand_matrix(4, 6, &mut rng),
        rand_matrix(4, 1, &mut rng),
        rand_matrix(1, 6, &mut rng),
    ];
    check("broadcast biases with tanh and sigmoid", &params, |tape, s| {
        let col = tape.add_col_broadcast(s[0], s[1]);
        let row = tape.add_row_broadcast(col, s[2]);
        let t = tape.tanh(row);
        let g = tape.sigmoid(t);
        tape.frob_sq(g)
    });
}

#[test]
fn concat_rows_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf4);
    let params = vec![rand_matrix(2, 5, &mut rng), rand_matrix(3, 5, &mut rng)];
    check("concat_rows", &params, |tape, s| {
        let stacked = tape.concat_rows(s[0], s[1]);
        let t = tape.tanh(stacked);
        tape.frob_sq(t)
    });
}

#[test]
fn gate_gradient_away_from_the_branch_boundary() {
    // The gate is continuous but not differentiable where a block's
    // alignment with its direction crosses zero, so the check keeps every
    // block dot product well away from zero.
    let mut rng = ChaCha8Rng::seed_from_u64(0xf5);
    let (v, k) = loop {
        let v = rand_matrix(3, 12, &mut rng);
        let k = rand_matrix(3, 12, &mut rng);
        let mut min_dot = f64::INFINITY;
        for c in 0..3 {
            for n in 0..4 {
                let mut dot = 0.0;
                for d in 0..3 {
                    dot += v.at(c, 3 * n + d) * k.at(c, 3 * n + d);
                }
                min_dot = min_dot.min(dot.abs());
            }
        }
        if min_dot > 0.05 {
            break (v, k);
        }
    };
    check("vn_gate", &[v, k], |tape, s| {
        let out = tape.vn_gate(s[0], s[1]);
        tape.frob_sq(out)
    });
}

#[test]
fn gated_linear_layer_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf6);
    let params = vec![
        rand_matrix(4, 2, &mut rng),
        rand_matrix(4, 4, &mut rng),
        rand_matrix(2, 9, &mut rng),
    ];
    check("linear + direction + gate", &params, |tape, s| {
        let v = tape.matmul(s[0], s[2]);
        let k = tape.matmul(s[1], v);
        let out = tape.vn_gate(v, k);
        tape.frob_sq(out)
    });
}

#[test]
fn neighbor_mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf7);
    let neighbors = Arc::new(vec![vec![1, 2], vec![0, 3], vec![3], vec![0, 1, 2]]);
    let params = vec![rand_matrix(3, 12, &mut rng)];
    let nb = neighbors.clone();
    check("neighbor_mean", &params, move |tape, s| {
        let m = tape.neighbor_mean(s[0], nb.clone());
        let d = tape.sub(m, s[0]);
        tape.frob_sq(d)
    });
}

#[test]
fn pooling_and_tiling_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf8);
    let params = vec![rand_matrix(4, 15, &mut rng)];
    check("point_mean then tile_points", &params, |tape, s| {
        let pooled = tape.point_mean(s[0]);
        let tiled = tape.tile_points(pooled, 5);
        let d = tape.sub(tiled, s[0]);
        tape.frob_sq(d)
    });
}

#[test]
fn invariant_pair_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf9);
    let params = vec![rand_matrix(3, 12, &mut rng), rand_matrix(2, 12, &mut rng)];
    check("invariant_pair", &params, |tape, s| {
        let pair = tape.invariant_pair(s[0], s[1]);
        let t = tape.tanh(pair);
        tape.frob_sq(t)
    });
}

#[test]
fn sigmoid_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfa);
    let labels = DenseMatrix::from_fn(1, 8, |_, j| if j % 3 == 0 { 1.0 } else { 0.0 });
    let params = vec![rand_matrix(2, 8, &mut rng), rand_matrix(1, 2, &mut rng)];
    let lb = labels.clone();
    check("sigmoid cross-entropy", &params, move |tape, s| {
        let logits = tape.matmul(s[1], s[0]);
        tape.ce_with_logits_sum(logits, lb.clone())
    });
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfb);
    let targets = vec![2, 0, 4, 1];
    let params = vec![rand_matrix(4, 5, &mut rng)];
    let tg = targets.clone();
    check("row softmax cross-entropy", &params, move |tape, s| {
        let scaled = tape.scale(s[0], 2.0);
        tape.softmax_xent_rows_mean(scaled, tg.clone())
    });
}

// === composite losses ===

fn tiny_config() -> ExtractorConfig {
    ExtractorConfig { backbone_widths: vec![4, 4], fusion_width: 4, invariant_channels: 3, knn: 4 }
}

fn small_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
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

/// Flattens extractor weights in the slot order the builders expect.
fn extractor_params(w: &ExtractorWeights) -> Vec<DenseMatrix> {
    let mut params = Vec::new();
    for l in &w.backbone {
        params.push(l.linear.clone());
        params.push(l.direction.clone());
    }
    params.push(w.fusion.linear.clone());
    params.push(w.fusion.direction.clone());
    params.push(w.head.clone());
    params
}

fn slots_from(list: &[Slot], layers: usize) -> ExtractorSlots {
    ExtractorSlots {
        backbone: (0..layers).map(|i| (list[2 * i], list[2 * i + 1])).collect(),
        fusion: (list[2 * layers], list[2 * layers + 1]),
        head: list[2 * layers + 2],
    }
}

#[test]
fn descriptor_pipeline_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfc);
    let w = ExtractorWeights::init(&tiny_config(), 13);
    let cloud = small_cloud(12, &mut rng);
    let params = extractor_params(&w);
    let layers = w.backbone.len();
    check("backbone + local head", &params, move |tape, s| {
        let slots = slots_from(s, layers);
        let bb = backbone_forward(tape, &slots, 4, &cloud).expect("valid cloud");
        let desc = local_forward(tape, &slots, bb.point_feat, bb.pooled, bb.points);
        let t = tape.tanh(desc);
        tape.frob_sq(t)
    });
}

#[test]
fn stage1_composite_loss_gradient() {
    // The full coarse training loss: occupancy cross-entropy on two clouds
    // plus the alignment residual whose fitted motion is recomputed inside
    // every finite-difference evaluation. Agreement here is what justifies
    // treating the closed-form fit as constant during backpropagation: at
    // the fit's own optimum, its sensitivity contributes nothing.
    let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
    let w = ExtractorWeights::init(&tiny_config(), 17);
    let d = DecoderWeights::init(w.global_channels(), 6, 17);
    let src = small_cloud(12, &mut rng);
    let spec = PerturbationSpec {
        max_angle_deg: 120.0,
        max_translation: 0.4,
        scenario: Scenario::Clean,
        seed: 0,
    };
    let motion = c2f_core::geometry::sample_transform(&spec, &mut rng);
    let tgt = apply(&small_cloud(12, &mut rng), &motion);
    let samples: Vec<OccupancySample> = (0..6)
        .map(|i| OccupancySample {
            position: Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            label: (i % 2) as u8,
        })
        .collect();
    let moved: Vec<OccupancySample> = samples
        .iter()
        .map(|s| OccupancySample { position: motion.apply_point(s.position), label: s.label })
        .collect();

    let mut params = extractor_params(&w);
    params.extend([d.w1.clone(), d.b1.clone(), d.w2.clone(), d.b2.clone()]);
    let layers = w.backbone.len();
    let base = 2 * layers + 3;
    let input = d.w1.cols();
    check("stage-1 composite", &params, move |tape, s| {
        let ext = slots_from(s, layers);
        let dec = DecoderSlots {
            w1: s[base],
            b1: s[base + 1],
            w2: s[base + 2],
            b2: s[base + 3],
            neg_mu: tape.constant(DenseMatrix::zeros(input, 1)),
            scale: tape
                .constant(DenseMatrix::from_fn(input, input, |i, j| f64::from(u8::from(i == j)))),
        };
        let bs = backbone_forward(tape, &ext, 4, &src).expect("valid cloud");
        let bt = backbone_forward(tape, &ext, 4, &tgt).expect("valid cloud");
        let ce_s = occupancy_loss(tape, &dec, bs.pooled, bs.centroid, &samples).unwrap();
        let ce_t = occupancy_loss(tape, &dec, bt.pooled, bt.centroid, &moved).unwrap();
        let ce = tape.add(ce_s, ce_t);
        let locc = tape.scale(ce, 0.5);
        let (lalign, _) =
            alignment_residual(tape, bs.pooled, bs.centroid, bt.pooled, bt.centroid).unwrap();
        let a = tape.scale(locc, 0.5);
        let b = tape.scale(lalign, 0.5);
        tape.add(a, b)
    });
}

#[test]
fn matching_loss_gradient() {
    // The fine-stage matching term: per-row similarity MLPs stacked with
    // concat_rows, then mean softmax cross-entropy against the true
    // correspondence columns. The pair channels are constants (frozen
    // descriptors and teacher-forced distances), exactly as in training.
    let mut rng = ChaCha8Rng::seed_from_u64(0x2f1);
    let rows = 5;
    let cols = 6;
    let channels: Vec<DenseMatrix> =
        (0..rows).map(|_| rand_matrix(3, cols, &mut rng)).collect();
    let targets: Vec<usize> = (0..rows).map(|i| (i * 2) % cols).collect();
    let params = vec![
        rand_matrix(4, 3, &mut rng),
        rand_matrix(4, 1, &mut rng),
        rand_matrix(1, 4, &mut rng),
        rand_matrix(1, 1, &mut rng),
    ];
    let ch = channels.clone();
    let tg = targets.clone();
    check("matching cross-entropy", &params, move |tape, s| {
        let mut stacked: Option<Slot> = None;
        for x in &ch {
            let xs = tape.constant(x.clone());
            let a1 = tape.matmul(s[0], xs);
            let a1 = tape.add_col_broadcast(a1, s[1]);
            let h = tape.tanh(a1);
            let a2 = tape.matmul(s[2], h);
            let row = tape.add_col_broadcast(a2, s[3]);
            stacked = Some(match stacked {
                None => row,
                Some(prev) => tape.concat_rows(prev, row),
            });
        }
        tape.softmax_xent_rows_mean(stacked.unwrap(), tg.clone())
    });
}

#[test]
fn significance_and_confidence_loss_gradients() {
    // The two auxiliary fine-stage terms share the same shape: a column MLP
    // into summed sigmoid cross-entropy against fixed labels (hard
    // matchability bits for the scorer, soft match-quality targets for the
    // confidence head, which sees its inputs as detached constants).
    let mut rng = ChaCha8Rng::seed_from_u64(0x2f2);
    for (name, width, n) in [("significance", 6, 7), ("confidence", 2, 9)] {
        let inputs = rand_matrix(width, n, &mut rng);
        let labels = DenseMatrix::from_fn(1, n, |_, j| ((j * 7 % 10) as f64) / 10.0);
        let params = vec![
            rand_matrix(4, width, &mut rng),
            rand_matrix(4, 1, &mut rng),
            rand_matrix(1, 4, &mut rng),
            rand_matrix(1, 1, &mut rng),
        ];
        let (x, lb) = (inputs.clone(), labels.clone());
        check(name, &params, move |tape, s| {
            let xs = tape.constant(x.clone());
            let a1 = tape.matmul(s[0], xs);
            let a1 = tape.add_col_broadcast(a1, s[1]);
            let h = tape.tanh(a1);
            let a2 = tape.matmul(s[2], h);
            let logits = tape.add_col_broadcast(a2, s[3]);
            let ce = tape.ce_with_logits_sum(logits, lb.clone());
            tape.scale(ce, 1.0 / lb.cols() as f64)
        });
    }
}

#[test]
fn decoder_head_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfe);
    let queries: Vec<Vec3> = (0..5)
        .map(|_| {
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let pooled = rand_matrix(4, 3, &mut rng);
    let labels = DenseMatrix::from_fn(1, 5, |_, j| if j % 2 == 0 { 1.0 } else { 0.0 });
    let params = vec![
        pooled,
        rand_matrix(6, 5, &mut rng),
        rand_matrix(6, 1, &mut rng),
        rand_matrix(1, 6, &mut rng),
        rand_matrix(1, 1, &mut rng),
    ];
    let lb = labels.clone();
    let qs = queries.clone();
    check("decoder through pooled features", &params, move |tape, s| {
        // Non-identity standardization constants so the finite-difference
        // check covers gradient flow through the frozen input transform.
        let dec = DecoderSlots {
            w1: s[1],
            b1: s[2],
            w2: s[3],
            b2: s[4],
            neg_mu: tape.constant(DenseMatrix::from_fn(5, 1, |i, _| -0.1 * (i as f64 + 1.0))),
            scale: tape.constant(DenseMatrix::from_fn(5, 5, |i, j| {
                if i == j {
                    0.5 + 0.3 * i as f64
                } else {
                    0.0
                }
            })),
        };
        let logits =
            decoder_logits(tape, &dec, s[0], Vec3::new(0.1, -0.2, 0.05), &qs).unwrap();
        tape.ce_with_logits_sum(logits, lb.clone())
    });
}
