//! Weighted closed-form rigid alignment (Procrustes/Kabsch).

use super::linalg::{Mat3, Vec3};
use super::svd3::svd3;
use super::MathError;
use crate::geometry::RigidTransform;

/// Solves `min_{R, t} sum_i w_i |R * src_i + t - tgt_i|^2` over proper
/// rotations in closed form.
///
/// The weighted cross-covariance between centered point sets is decomposed
/// with [`svd3`]; when `det(u * v^T) < 0` the singular vector pair of the
/// smallest singular value is flipped so the result is a rotation, never a
/// reflection. A short Newton polish on the rotation manifold then drives
/// the first-order optimality residual to rounding level, which the
/// normal-matrix eigensolve alone cannot guarantee when singular values
/// cluster. The optimum is invariant to rescaling all weights by a
/// positive constant.
///
/// Errors:
/// - [`MathError::ShapeMismatch`] when the slices differ in length or have
///   fewer than 3 entries.
/// - [`MathError::InvalidInput`] for non-finite points, negative or
///   non-finite weights, or fewer than 3 strictly positive weights.
/// - [`MathError::DegenerateConfiguration`] when the weighted source points
///   are collinear or coincident (cross-covariance rank < 2), where the
///   rotation is not unique.
pub fn weighted_kabsch(src: &[Vec3], tgt: &[Vec3], w: &[f64]) -> Result<RigidTransform, MathError> {
    if src.len() != tgt.len() || src.len() != w.len() {
        return Err(MathError::ShapeMismatch(format!(
            "src {}, tgt {}, weights {}",
            src.len(),
            tgt.len(),
            w.len()
        )));
    }
    if src.len() < 3 {
        return Err(MathError::ShapeMismatch(format!("need at least 3 points, got {}", src.len())));
    }
    for (i, (p, q)) in src.iter().zip(tgt.iter()).enumerate() {
        if !p.is_finite() || !q.is_finite() {
            return Err(MathError::InvalidInput(format!("non-finite point at index {i}")));
        }
    }
    let mut positive = 0usize;
    let mut wsum = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        if !wi.is_finite() || wi < 0.0 {
            return Err(MathError::InvalidInput(format!("weight {wi} at index {i}")));
        }
        if wi > 0.0 {
            positive += 1;
        }
        wsum += wi;
    }
    if positive < 3 {
        return Err(MathError::InvalidInput(format!(
            "need at least 3 strictly positive weights, got {positive}"
        )));
    }

    let mut src_bar = Vec3::ZERO;
    let mut tgt_bar = Vec3::ZERO;
    for i in 0..src.len() {
        src_bar += src[i] * w[i];
        tgt_bar += tgt[i] * w[i];
    }
    src_bar = src_bar / wsum;
    tgt_bar = tgt_bar / wsum;

    // Cross-covariance with target deviations on the left, normalized by the
    // weight sum so the scale of w drops out exactly.
    let mut h = Mat3::ZERO;
    for i in 0..src.len() {
        let sc = src[i] - src_bar;
        let tc = tgt[i] - tgt_bar;
        h = h.add(&Mat3::outer(tc, sc).scale(w[i] / wsum));
    }

    let d = svd3(&h);
    if d.s[1] <= d.s[0] * 1e-12 || d.s[0] == 0.0 {
        return Err(MathError::DegenerateConfiguration(format!(
            "cross-covariance rank < 2 (singular values {:?})",
            d.s
        )));
    }

    let mut u = d.u;
    if u.matmul(&d.v.transpose()).det() < 0.0 {
        // Reflection case: flip the pair tied to the smallest singular value.
        for r in 0..3 {
            u.m[r][2] = -u.m[r][2];
        }
    }
    let mut r = u.matmul(&d.v.transpose());

    // Newton polish on the rotation manifold. The eigensolve of `h^T h`
    // squares the condition number and can lose half the mantissa when
    // singular values cluster, leaving the closed-form rotation several
    // orders of magnitude above rounding error. The constrained optimum
    // satisfies `r^T h` symmetric, so each step solves the linearized
    // symmetry condition `((tr sym) I - sym) phi = axial(m - m^T)` with
    // `m = r^T h` for a small right-applied rotation `phi`. Convergence is
    // quadratic and a couple of steps reach rounding level.
    for _ in 0..3 {
        let m = r.transpose().matmul(&h);
        let k = Vec3::new(
            m.m[2][1] - m.m[1][2],
            m.m[0][2] - m.m[2][0],
            m.m[1][0] - m.m[0][1],
        );
        if k.norm() <= d.s[0] * 1e-15 {
            break;
        }
        let sym = m.add(&m.transpose()).scale(0.5);
        let b = Mat3::IDENTITY.scale(sym.trace()).sub(&sym);
        let det = b.det();
        if det.abs() <= d.s[0].powi(3) * 1e-9 {
            break;
        }
        // Cramer solve of `b * phi = k`; `b` is symmetric positive definite
        // away from the degenerate configurations rejected above.
        let phi = Vec3::new(
            Mat3::from_cols(k, b.col(1), b.col(2)).det() / det,
            Mat3::from_cols(b.col(0), k, b.col(2)).det() / det,
            Mat3::from_cols(b.col(0), b.col(1), k).det() / det,
        );
        if !phi.is_finite() || phi.norm() > 0.1 {
            // The closed-form start is within ~1e-5 radians of the optimum;
            // a large step means the linear system was untrustworthy.
            break;
        }
        r = r.matmul(&Mat3::from_axis_angle(phi, phi.norm()));
    }

    let t = tgt_bar - r.mul_vec3(src_bar);
    Ok(RigidTransform { rotation: r, translation: t })
}
