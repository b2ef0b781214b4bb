//! Singular value decomposition of 3x3 matrices.
//!
//! The decomposition runs a cyclic Jacobi eigensolve on the normal matrix
//! `A^T A` to get the right singular vectors, recovers singular values as
//! `|A v_i|`, and rebuilds the left vectors by normalizing `A v_i` with a
//! Gram-Schmidt completion for (near-)rank-deficient inputs. No iteration
//! count depends on the data beyond the fixed sweep limit, so the routine is
//! deterministic and allocation-free.

use super::linalg::{Mat3, Vec3};

/// Result of [`svd3`]: `a = u * diag(s) * v^T` with `u`, `v` orthonormal and
/// `s` sorted in non-increasing order, all entries non-negative.
#[derive(Clone, Copy, Debug)]
pub struct Svd3 {
    pub u: Mat3,
    pub s: [f64; 3],
    pub v: Mat3,
}

impl Svd3 {
    /// Reconstructs `u * diag(s) * v^T`.
    pub fn reconstruct(&self) -> Mat3 {
        let mut d = Mat3::ZERO;
        for i in 0..3 {
            d.m[i][i] = self.s[i];
        }
        self.u.matmul(&d).matmul(&self.v.transpose())
    }
}

const MAX_SWEEPS: usize = 32;

/// Jacobi eigensolve of a symmetric 3x3 matrix.
///
/// Returns (eigenvalues, eigenvector columns), unsorted.
fn jacobi_symmetric(sym: &Mat3) -> ([f64; 3], Mat3) {
    let mut s = *sym;
    let mut v = Mat3::IDENTITY;
    let scale = s.frob_norm();
    if scale == 0.0 {
        return ([0.0; 3], v);
    }
    let stop = scale * 1e-16;

    for _ in 0..MAX_SWEEPS {
        let off = (s.m[0][1] * s.m[0][1] + s.m[0][2] * s.m[0][2] + s.m[1][2] * s.m[1][2]).sqrt();
        if off <= stop {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = s.m[p][q];
            if apq.abs() <= stop * 1e-2 {
                continue;
            }
            let tau = (s.m[q][q] - s.m[p][p]) / (2.0 * apq);
            let t = if tau >= 0.0 {
                1.0 / (tau + (1.0 + tau * tau).sqrt())
            } else {
                -1.0 / (-tau + (1.0 + tau * tau).sqrt())
            };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let sn = t * c;

            // S <- J^T S J where J rotates the (p, q) plane.
            let mut ns = s;
            for k in 0..3 {
                let skp = s.m[k][p];
                let skq = s.m[k][q];
                ns.m[k][p] = c * skp - sn * skq;
                ns.m[k][q] = sn * skp + c * skq;
            }
            let mut ns2 = ns;
            for k in 0..3 {
                let spk = ns.m[p][k];
                let sqk = ns.m[q][k];
                ns2.m[p][k] = c * spk - sn * sqk;
                ns2.m[q][k] = sn * spk + c * sqk;
            }
            // Symmetrize against rounding drift.
            for i in 0..3 {
                for j in (i + 1)..3 {
                    let m = 0.5 * (ns2.m[i][j] + ns2.m[j][i]);
                    ns2.m[i][j] = m;
                    ns2.m[j][i] = m;
                }
            }
            ns2.m[p][q] = 0.0;
            ns2.m[q][p] = 0.0;
            s = ns2;

            let mut nv = v;
            for k in 0..3 {
                let vkp = v.m[k][p];
                let vkq = v.m[k][q];
                nv.m[k][p] = c * vkp - sn * vkq;
                nv.m[k][q] = sn * vkp + c * vkq;
            }
            v = nv;
        }
    }

    // Rayleigh-quotient polish of the eigenvalues against the original matrix.
    let mut vals = [0.0; 3];
    for i in 0..3 {
        let col = v.col(i);
        vals[i] = col.dot(sym.mul_vec3(col));
    }
    (vals, v)
}

/// Any unit vector orthogonal to `u` (assumed unit length).
fn any_orthogonal(u: Vec3) -> Vec3 {
    let a = u.abs();
    let e = if a.x <= a.y && a.x <= a.z {
        Vec3::new(1.0, 0.0, 0.0)
    } else if a.y <= a.z {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(0.0, 0.0, 1.0)
    };
    (e - u * e.dot(u)).normalized(0.0).unwrap()
}

/// Full SVD of a 3x3 matrix.
///
/// Guarantees, up to floating point rounding at the scale of the largest
/// entry: `u` and `v` are orthonormal, `s` is non-negative and sorted in
/// non-increasing order, and `u * diag(s) * v^T` reconstructs the input.
/// Handles rank-deficient and zero matrices by completing the left basis
/// with cross products.
pub fn svd3(a: &Mat3) -> Svd3 {
    let normal = a.transpose().matmul(a);
    let (vals, vecs) = jacobi_symmetric(&normal);

    // Sort eigenpairs by eigenvalue, descending.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap());
    let v_cols = [vecs.col(order[0]), vecs.col(order[1]), vecs.col(order[2])];

    let img = [a.mul_vec3(v_cols[0]), a.mul_vec3(v_cols[1]), a.mul_vec3(v_cols[2])];
    let s = [img[0].norm(), img[1].norm(), img[2].norm()];
    let cutoff = s[0] * 1e-13;

    let mut u_cols = [Vec3::ZERO; 3];
    if s[0] == 0.0 {
        // Zero matrix: any orthonormal pair of bases works.
        return Svd3 { u: Mat3::IDENTITY, s: [0.0; 3], v: vecs_sorted(v_cols) };
    }
    for i in 0..3 {
        if s[i] > cutoff {
            let mut u = img[i] / s[i];
            // Re-orthogonalize against earlier columns; the eigenvectors are
            // orthogonal to machine precision but clustered singular values
            // can leak a little.
            for &prev in u_cols.iter().take(i) {
                u -= prev * u.dot(prev);
            }
            u_cols[i] = u.normalized(0.0).unwrap();
        } else if i == 1 {
            u_cols[1] = any_orthogonal(u_cols[0]);
        } else {
            u_cols[2] = u_cols[0].cross(u_cols[1]);
        }
    }

    Svd3 { u: Mat3::from_cols(u_cols[0], u_cols[1], u_cols[2]), s, v: vecs_sorted(v_cols) }
}

fn vecs_sorted(cols: [Vec3; 3]) -> Mat3 {
    Mat3::from_cols(cols[0], cols[1], cols[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_valid_svd(a: &Mat3, d: &Svd3, tol_scale: f64) {
        let recon_err = d.reconstruct().sub(a).max_abs();
        let tol = tol_scale * a.max_abs().max(1e-300);
        assert!(recon_err <= tol, "reconstruction error {recon_err} > {tol} for {a:?}");
        let ug = d.u.transpose().matmul(&d.u).sub(&Mat3::IDENTITY).frob_norm();
        let vg = d.v.transpose().matmul(&d.v).sub(&Mat3::IDENTITY).frob_norm();
        assert!(ug < 1e-9, "u not orthonormal: {ug}");
        assert!(vg < 1e-9, "v not orthonormal: {vg}");
        assert!(d.s[0] >= d.s[1] && d.s[1] >= d.s[2], "singular values not sorted: {:?}", d.s);
        assert!(d.s[2] >= 0.0);
    }

    #[test]
    fn identity_decomposes_to_unit_singulars() {
        let d = svd3(&Mat3::IDENTITY);
        assert_valid_svd(&Mat3::IDENTITY, &d, 1e-12);
        for i in 0..3 {
            assert!((d.s[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_matrix_is_handled() {
        let d = svd3(&Mat3::ZERO);
        assert_eq!(d.s, [0.0; 3]);
        assert!(d.u.is_rotation(1e-12));
    }

    #[test]
    fn pure_rotation_has_unit_singulars() {
        let r = Mat3::from_axis_angle(Vec3::new(0.3, 0.5, -1.0), 0.52);
        let d = svd3(&r);
        assert_valid_svd(&r, &d, 1e-12);
        for i in 0..3 {
            assert!((d.s[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_outer_product() {
        let a = Vec3::new(0.6, -0.8, 0.0);
        let m = Mat3::outer(a, a);
        let d = svd3(&m);
        assert_valid_svd(&m, &d, 1e-12);
        assert!((d.s[0] - 1.0).abs() < 1e-12);
        assert!(d.s[1].abs() < 1e-12 && d.s[2].abs() < 1e-12);
    }

    #[test]
    fn random_matrices_reconstruct_including_near_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5bd3);
        for trial in 0..10_000 {
            let mut m = Mat3::ZERO;
            for i in 0..3 {
                for j in 0..3 {
                    m.m[i][j] = rng.random_range(-1.0..1.0);
                }
            }
            // A third of the trials get pushed toward rank deficiency by
            // replacing a row with a near-copy of another.
            if trial % 3 == 0 {
                let eps = 10f64.powi(-(trial % 17) as i32);
                for j in 0..3 {
                    m.m[2][j] = m.m[1][j] + eps * m.m[0][j];
                }
            }
            // Vary overall scale across many orders of magnitude.
            let scale = 10f64.powi((trial % 13) as i32 - 6);
            let m = m.scale(scale);
            let d = svd3(&m);
            assert_valid_svd(&m, &d, 1e-9);
        }
    }
}
