//! Minimal 2-D linear algebra: vectors and 2x2 matrices with the closed
//! forms the planners and the learner need (determinant, inverse, Cholesky,
//! symmetric eigenvalues, SPD square root).

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::scalar::{cast, Scalar};

/// A point or displacement in the plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec2<S> {
    pub x: S,
    pub y: S,
}

impl<S: Scalar> Vec2<S> {
    pub fn new(x: S, y: S) -> Self {
        Vec2 { x, y }
    }

    pub fn zero() -> Self {
        Vec2 {
            x: S::zero(),
            y: S::zero(),
        }
    }

    pub fn dot(self, other: Self) -> S {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> S {
        self.dot(self)
    }

    pub fn norm(self) -> S {
        self.norm_sq().sqrt()
    }

    /// Outer product `self * other^T`.
    pub fn outer(self, other: Self) -> Mat2<S> {
        Mat2 {
            m00: self.x * other.x,
            m01: self.x * other.y,
            m10: self.y * other.x,
            m11: self.y * other.y,
        }
    }

    /// Rescale to `max_norm` if longer; zero vectors pass through.
    pub fn clamp_norm(self, max_norm: S) -> Self {
        let n = self.norm();
        if n > max_norm {
            self * (max_norm / n)
        } else {
            self
        }
    }
}

impl<S: Scalar> Add for Vec2<S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl<S: Scalar> AddAssign for Vec2<S> {
    fn add_assign(&mut self, rhs: Self) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl<S: Scalar> Sub for Vec2<S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl<S: Scalar> Mul<S> for Vec2<S> {
    type Output = Self;
    fn mul(self, rhs: S) -> Self {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl<S: Scalar> Div<S> for Vec2<S> {
    type Output = Self;
    fn div(self, rhs: S) -> Self {
        Vec2::new(self.x / rhs, self.y / rhs)
    }
}

impl<S: Scalar> Neg for Vec2<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Vec2::new(-self.x, -self.y)
    }
}

/// A 2x2 matrix in row-major layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat2<S> {
    pub m00: S,
    pub m01: S,
    pub m10: S,
    pub m11: S,
}

impl<S: Scalar> Mat2<S> {
    pub fn new(m00: S, m01: S, m10: S, m11: S) -> Self {
        Mat2 { m00, m01, m10, m11 }
    }

    pub fn identity() -> Self {
        Mat2::new(S::one(), S::zero(), S::zero(), S::one())
    }

    pub fn zero() -> Self {
        Mat2::new(S::zero(), S::zero(), S::zero(), S::zero())
    }

    /// Symmetric matrix from its upper triangle.
    pub fn symmetric(m00: S, m01: S, m11: S) -> Self {
        Mat2::new(m00, m01, m01, m11)
    }

    pub fn diagonal(d0: S, d1: S) -> Self {
        Mat2::new(d0, S::zero(), S::zero(), d1)
    }

    pub fn scaled_identity(s: S) -> Self {
        Mat2::diagonal(s, s)
    }

    pub fn transpose(self) -> Self {
        Mat2::new(self.m00, self.m10, self.m01, self.m11)
    }

    pub fn det(self) -> S {
        self.m00 * self.m11 - self.m01 * self.m10
    }

    pub fn trace(self) -> S {
        self.m00 + self.m11
    }

    pub fn inverse(self) -> Option<Self> {
        let d = self.det();
        if d == S::zero() || !d.is_finite() {
            return None;
        }
        Some(Mat2::new(self.m11 / d, -self.m01 / d, -self.m10 / d, self.m00 / d))
    }

    pub fn mul_vec(self, v: Vec2<S>) -> Vec2<S> {
        Vec2::new(
            self.m00 * v.x + self.m01 * v.y,
            self.m10 * v.x + self.m11 * v.y,
        )
    }

    pub fn mul_mat(self, other: Self) -> Self {
        Mat2::new(
            self.m00 * other.m00 + self.m01 * other.m10,
            self.m00 * other.m01 + self.m01 * other.m11,
            self.m10 * other.m00 + self.m11 * other.m10,
            self.m10 * other.m01 + self.m11 * other.m11,
        )
    }

    pub fn scale(self, s: S) -> Self {
        Mat2::new(self.m00 * s, self.m01 * s, self.m10 * s, self.m11 * s)
    }

    pub fn add_mat(self, other: Self) -> Self {
        Mat2::new(
            self.m00 + other.m00,
            self.m01 + other.m01,
            self.m10 + other.m10,
            self.m11 + other.m11,
        )
    }

    pub fn sub_mat(self, other: Self) -> Self {
        Mat2::new(
            self.m00 - other.m00,
            self.m01 - other.m01,
            self.m10 - other.m10,
            self.m11 - other.m11,
        )
    }

    /// Largest absolute deviation from symmetry.
    pub fn asymmetry(self) -> S {
        (self.m01 - self.m10).abs()
    }

    /// Average the off-diagonal entries.
    pub fn symmetrize(self) -> Self {
        let half = cast::<S>(0.5);
        let off = (self.m01 + self.m10) * half;
        Mat2::new(self.m00, off, off, self.m11)
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn eigenvalues_sym(self) -> (S, S) {
        let half = cast::<S>(0.5);
        let mean = self.trace() * half;
        let diff = (self.m00 - self.m11) * half;
        let rad = (diff * diff + self.m01 * self.m10).max(S::zero()).sqrt();
        (mean - rad, mean + rad)
    }

    /// Eigendecomposition of a symmetric matrix: `(eigenvalues, rotation)`
    /// with `self = R diag(l0, l1) R^T` and eigenvalues ascending.
    pub fn eigen_sym(self) -> ((S, S), Mat2<S>) {
        let (l0, l1) = self.eigenvalues_sym();
        let b = self.m01;
        // Eigenvector for l0; fall back to axes when already diagonal.
        let v0 = if b.abs() > S::epsilon() * self.trace().abs().max(S::one()) {
            Vec2::new(b, l0 - self.m00)
        } else if self.m00 <= self.m11 {
            Vec2::new(S::one(), S::zero())
        } else {
            Vec2::new(S::zero(), S::one())
        };
        let n = v0.norm();
        let v0 = v0 / n;
        let v1 = Vec2::new(-v0.y, v0.x);
        ((l0, l1), Mat2::new(v0.x, v1.x, v0.y, v1.y))
    }

    /// True when symmetric within `tol` and positive definite.
    pub fn is_spd(self, tol: S) -> bool {
        if self.asymmetry() > tol {
            return false;
        }
        let (lo, _) = self.eigenvalues_sym();
        lo > S::zero()
    }

    /// Lower-triangular Cholesky factor of an SPD matrix: `self = L L^T`.
    pub fn cholesky_lower(self) -> Option<Self> {
        if self.m00 <= S::zero() {
            return None;
        }
        let l00 = self.m00.sqrt();
        let l10 = self.m10 / l00;
        let rest = self.m11 - l10 * l10;
        if rest <= S::zero() {
            return None;
        }
        Some(Mat2::new(l00, S::zero(), l10, rest.sqrt()))
    }

    /// Principal square root of an SPD matrix.
    ///
    /// Closed form for 2x2 via Cayley-Hamilton:
    /// `sqrt(M) = (M + sqrt(det M) I) / sqrt(tr M + 2 sqrt(det M))`.
    pub fn sqrt_spd(self) -> Option<Self> {
        let d = self.det();
        if d <= S::zero() {
            return None;
        }
        let s = d.sqrt();
        let t = self.trace() + s + s;
        if t <= S::zero() {
            return None;
        }
        let inv_t = t.sqrt().recip();
        Some(
            Mat2::new(self.m00 + s, self.m01, self.m10, self.m11 + s).scale(inv_t),
        )
    }

    /// Clamp the eigenvalues of a symmetric matrix from below.
    pub fn floor_eigenvalues(self, floor: S) -> Self {
        let ((l0, l1), r) = self.eigen_sym();
        if l0 >= floor {
            return self;
        }
        let d = Mat2::diagonal(l0.max(floor), l1.max(floor));
        r.mul_mat(d).mul_mat(r.transpose()).symmetrize()
    }

    /// Frobenius norm.
    pub fn norm(self) -> S {
        (self.m00 * self.m00 + self.m01 * self.m01 + self.m10 * self.m10 + self.m11 * self.m11)
            .sqrt()
    }
}
