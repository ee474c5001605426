//! Regular quadrature grid over the workspace and gridded density fields.
//!
//! All workspace integrals in the crate are midpoint sums over this grid,
//! accumulated in a fixed row-major order so results are run-to-run
//! deterministic.

use crate::env::{SkewField, Workspace};
use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::scalar::{cast, Scalar};

/// Shape and placement of a quadrature grid; two fields may be combined
/// only when their shapes match exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridShape<S> {
    pub nx: usize,
    pub ny: usize,
    pub dx: S,
    pub dy: S,
    pub x0: S,
    pub y0: S,
}

impl<S: Scalar> GridShape<S> {
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> S {
        self.dx * self.dy
    }

    /// Cell-center coordinates of the `j`-th point (row-major, x fastest).
    #[inline]
    pub fn point(&self, j: usize) -> Vec2<S> {
        let ix = j % self.nx;
        let iy = j / self.nx;
        let half = cast::<S>(0.5);
        Vec2::new(
            self.x0 + (S::from_usize(ix).unwrap() + half) * self.dx,
            self.y0 + (S::from_usize(iy).unwrap() + half) * self.dy,
        )
    }
}

/// Auxiliary grid points with cached skewing-function values.
#[derive(Clone, Debug)]
pub struct QuadratureGrid<S> {
    shape: GridShape<S>,
    /// Cached Q value (0 or 1) per lattice point, row-major.
    q: Vec<S>,
}

impl<S: Scalar> QuadratureGrid<S> {
    /// Lay a cell-centered lattice over the workspace and cache Q at every
    /// point. The requested spacing is rounded so the lattice tiles the
    /// workspace exactly.
    pub fn build(workspace: &Workspace<S>, dx: S, dy: S, field: &SkewField<S>) -> Result<Self> {
        if dx <= S::zero() || dy <= S::zero() {
            return Err(Error::InvalidConfig(format!(
                "grid spacing must be positive, got dx={dx} dy={dy}"
            )));
        }
        if dx > workspace.width() || dy > workspace.height() {
            return Err(Error::InvalidConfig(
                "grid spacing exceeds workspace extent".into(),
            ));
        }
        let nx = (workspace.width() / dx)
            .round()
            .to_usize()
            .unwrap_or(0)
            .max(1);
        let ny = (workspace.height() / dy)
            .round()
            .to_usize()
            .unwrap_or(0)
            .max(1);
        let shape = GridShape {
            nx,
            ny,
            dx: workspace.width() / S::from_usize(nx).unwrap(),
            dy: workspace.height() / S::from_usize(ny).unwrap(),
            x0: workspace.x_min,
            y0: workspace.y_min,
        };
        let mut q = Vec::with_capacity(shape.len());
        for j in 0..shape.len() {
            let p = shape.point(j);
            q.push(if field.is_free_unchecked(p) {
                S::one()
            } else {
                S::zero()
            });
        }
        Ok(QuadratureGrid { shape, q })
    }

    pub fn shape(&self) -> GridShape<S> {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn cell_area(&self) -> S {
        self.shape.cell_area()
    }

    #[inline]
    pub fn point(&self, j: usize) -> Vec2<S> {
        self.shape.point(j)
    }

    /// Cached skewing-function value at the `j`-th point.
    #[inline]
    pub fn q(&self, j: usize) -> S {
        self.q[j]
    }

    pub fn q_values(&self) -> &[S] {
        &self.q
    }

    /// Midpoint quadrature of `f` over the workspace, fixed order.
    pub fn integrate<F: Fn(Vec2<S>) -> S>(&self, f: F) -> S {
        let mut acc = S::zero();
        for j in 0..self.len() {
            acc += f(self.point(j));
        }
        acc * self.cell_area()
    }

    /// Midpoint quadrature of `f(x) * Q(x)`, fixed order.
    pub fn integrate_masked<F: Fn(Vec2<S>) -> S>(&self, f: F) -> S {
        let mut acc = S::zero();
        for j in 0..self.len() {
            if self.q[j] > S::zero() {
                acc += f(self.point(j));
            }
        }
        acc * self.cell_area()
    }

    /// Free-space area according to the cached Q values.
    pub fn free_area(&self) -> S {
        let total: S = self.q.iter().copied().sum();
        total * self.cell_area()
    }
}

/// A density (or occupancy-weighted) field sampled at grid points.
#[derive(Clone, Debug)]
pub struct DensityField<S> {
    shape: GridShape<S>,
    values: Vec<S>,
}

impl<S: Scalar> DensityField<S> {
    pub fn new(shape: GridShape<S>, values: Vec<S>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::GridMismatch);
        }
        Ok(DensityField { shape, values })
    }

    pub fn shape(&self) -> GridShape<S> {
        self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    /// Quadrature of the field over the workspace (total mass).
    pub fn mass(&self) -> S {
        let total: S = self.values.iter().copied().sum();
        total * self.shape.cell_area()
    }

    /// Index of the largest value (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = j;
            }
        }
        best
    }
}
