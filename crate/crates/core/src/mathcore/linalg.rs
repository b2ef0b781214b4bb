//! Fixed-size 3D vectors/matrices and a small dense row-major matrix.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// A 3D vector of `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Unit vector in the same direction; `None` if the norm is below `eps`.
    pub fn normalized(self, eps: f64) -> Option<Vec3> {
        let n = self.norm();
        if n < eps {
            None
        } else {
            Some(self / n)
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Component-wise absolute value.
    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    pub fn as_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// A 3x3 matrix of `f64`, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const ZERO: Mat3 = Mat3 { m: [[0.0; 3]; 3] };

    pub const IDENTITY: Mat3 = Mat3 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Mat3 {
        Mat3 { m: [r0.as_array(), r1.as_array(), r2.as_array()] }
    }

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
        Mat3::from_rows(c0, c1, c2).transpose()
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::from_array(self.m[i])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn transpose(&self) -> Mat3 {
        let mut t = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                t.m[i][j] = self.m[j][i];
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn det(&self) -> f64 {
        self.row(0).dot(self.row(1).cross(self.row(2)))
    }

    /// Outer product `a * b^T`.
    pub fn outer(a: Vec3, b: Vec3) -> Mat3 {
        let mut r = Mat3::ZERO;
        let aa = a.as_array();
        let ba = b.as_array();
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = aa[i] * ba[j];
            }
        }
        r
    }

    /// Rotation by `angle_rad` about the given axis (need not be unit length).
    ///
    /// Returns the identity when the axis norm is below 1e-12.
    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Mat3 {
        let u = match axis.normalized(1e-12) {
            Some(u) => u,
            None => return Mat3::IDENTITY,
        };
        let (s, c) = angle_rad.sin_cos();
        let k = Mat3::from_rows(
            Vec3::new(0.0, -u.z, u.y),
            Vec3::new(u.z, 0.0, -u.x),
            Vec3::new(-u.y, u.x, 0.0),
        );
        // Rodrigues: I + sin(t) K + (1 - cos(t)) K^2
        Mat3::IDENTITY.add(&k.scale(s)).add(&k.matmul(&k).scale(1.0 - c))
    }

    pub fn rot_x(angle_rad: f64) -> Mat3 {
        Mat3::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), angle_rad)
    }

    pub fn rot_y(angle_rad: f64) -> Mat3 {
        Mat3::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), angle_rad)
    }

    pub fn rot_z(angle_rad: f64) -> Mat3 {
        Mat3::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), angle_rad)
    }

    pub fn matmul(&self, o: &Mat3) -> Mat3 {
        let mut r = Mat3::ZERO;
        for i in 0..3 {
            for k in 0..3 {
                let a = self.m[i][k];
                for j in 0..3 {
                    r.m[i][j] += a * o.m[k][j];
                }
            }
        }
        r
    }

    pub fn mul_vec3(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut r = *self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] += o.m[i][j];
            }
        }
        r
    }

    pub fn sub(&self, o: &Mat3) -> Mat3 {
        let mut r = *self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] -= o.m[i][j];
            }
        }
        r
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut r = *self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] *= s;
            }
        }
        r
    }

    pub fn frob_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += self.m[i][j] * self.m[i][j];
            }
        }
        s.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        let mut a: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                a = a.max(self.m[i][j].abs());
            }
        }
        a
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|r| r.iter().all(|x| x.is_finite()))
    }

    /// True when the matrix is orthonormal with determinant +1, to `tol`.
    pub fn is_rotation(&self, tol: f64) -> bool {
        let gram = self.transpose().matmul(self);
        gram.sub(&Mat3::IDENTITY).frob_norm() <= tol && (self.det() - 1.0).abs() <= tol
    }
}

/// Angle in degrees of the relative rotation `a^T b`.
///
/// Computed as `atan2(|skew part|, trace part)`, which stays accurate for
/// angles near 0 and near 180 degrees where the plain arccos of the trace
/// loses up to six digits to rounding.
pub fn rotation_angle_deg(a: &Mat3, b: &Mat3) -> f64 {
    let d = a.transpose().matmul(b);
    let skew = Vec3::new(
        0.5 * (d.m[2][1] - d.m[1][2]),
        0.5 * (d.m[0][2] - d.m[2][0]),
        0.5 * (d.m[1][0] - d.m[0][1]),
    );
    let cos_like = 0.5 * (d.trace() - 1.0);
    skew.norm().atan2(cos_like).to_degrees()
}

/// A dense row-major matrix of `f64`.
///
/// Used for feature maps (channels x coordinates), network weights, and
/// similarity matrices. Kept deliberately small: just the operations the
/// pipeline needs, no views or strides.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> DenseMatrix {
        DenseMatrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Builds from row-major data; panics if the length is not `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> DenseMatrix {
        assert_eq!(data.len(), rows * cols, "dense matrix data length mismatch");
        DenseMatrix { rows, cols, data }
    }

    pub fn scalar(value: f64) -> DenseMatrix {
        DenseMatrix::from_vec(1, 1, vec![value])
    }

    pub fn identity(n: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] += v;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, o: &DenseMatrix) -> bool {
        self.rows == o.rows && self.cols == o.cols
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self * other`; panics on inner-dimension mismatch.
    pub fn matmul(&self, o: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, o.rows, "matmul inner dimension mismatch");
        let mut r = DenseMatrix::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rrow = &mut r.data[i * o.cols..(i + 1) * o.cols];
                let orow = &o.data[k * o.cols..(k + 1) * o.cols];
                for j in 0..o.cols {
                    rrow[j] += a * orow[j];
                }
            }
        }
        r
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, o: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, o.cols, "matmul_nt inner dimension mismatch");
        let mut r = DenseMatrix::zeros(self.rows, o.rows);
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..o.rows {
                let brow = &o.data[j * o.cols..(j + 1) * o.cols];
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += arow[k] * brow[k];
                }
                r.data[i * o.rows + j] = acc;
            }
        }
        r
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, o: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, o.rows, "matmul_tn inner dimension mismatch");
        let mut r = DenseMatrix::zeros(self.cols, o.cols);
        for k in 0..self.rows {
            let arow = &self.data[k * self.cols..(k + 1) * self.cols];
            let brow = &o.data[k * o.cols..(k + 1) * o.cols];
            for i in 0..self.cols {
                let a = arow[i];
                if a == 0.0 {
                    continue;
                }
                let rrow = &mut r.data[i * o.cols..(i + 1) * o.cols];
                for j in 0..o.cols {
                    rrow[j] += a * brow[j];
                }
            }
        }
        r
    }

    pub fn add(&self, o: &DenseMatrix) -> DenseMatrix {
        assert!(self.same_shape(o), "add shape mismatch");
        let mut r = self.clone();
        for (a, b) in r.data.iter_mut().zip(o.data.iter()) {
            *a += b;
        }
        r
    }

    pub fn sub(&self, o: &DenseMatrix) -> DenseMatrix {
        assert!(self.same_shape(o), "sub shape mismatch");
        let mut r = self.clone();
        for (a, b) in r.data.iter_mut().zip(o.data.iter()) {
            *a -= b;
        }
        r
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        let mut r = self.clone();
        for a in r.data.iter_mut() {
            *a *= s;
        }
        r
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let mut r = self.clone();
        for a in r.data.iter_mut() {
            *a = f(*a);
        }
        r
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |a, x| a.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_product_is_right_handed() {
        let x = Vec3::new(1.0, 0.0, 0.0);
        let y = Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(x.cross(y), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn axis_angle_matches_hand_built_rotation() {
        let r = Mat3::rot_z(std::f64::consts::FRAC_PI_2);
        let v = r.mul_vec3(Vec3::new(1.0, 0.0, 0.0));
        assert!((v - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        assert!(r.is_rotation(1e-12));
    }

    #[test]
    fn rotation_composition_associates_with_matmul() {
        let a = Mat3::from_axis_angle(Vec3::new(1.0, 2.0, -0.5), 0.7);
        let b = Mat3::from_axis_angle(Vec3::new(-0.3, 1.0, 2.0), -1.3);
        let v = Vec3::new(0.2, -0.4, 0.9);
        let lhs = a.matmul(&b).mul_vec3(v);
        let rhs = a.mul_vec3(b.mul_vec3(v));
        assert!((lhs - rhs).norm() < 1e-14);
    }

    #[test]
    fn det_of_rotation_is_one() {
        let r = Mat3::from_axis_angle(Vec3::new(0.3, -1.0, 0.2), 2.2);
        assert!((r.det() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dense_matmul_matches_hand_example() {
        let a = DenseMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = DenseMatrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn dense_transpose_round_trips() {
        let a = DenseMatrix::from_fn(3, 5, |i, j| (i * 7 + j) as f64);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn transposed_multiplies_match_explicit_transpose() {
        let a = DenseMatrix::from_fn(4, 3, |i, j| (i as f64 - 1.5) * (j as f64 + 0.5));
        let b = DenseMatrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.7);
        let c = DenseMatrix::from_fn(4, 6, |i, j| ((i + 2 * j) % 5) as f64 - 2.0);
        assert_eq!(a.matmul_nt(&b), a.matmul(&b.transpose()));
        assert_eq!(a.matmul_tn(&c), a.transpose().matmul(&c));
    }
}
