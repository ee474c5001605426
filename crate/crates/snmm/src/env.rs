//! Workspace geometry: the rectangular workspace, obstacle primitives, and
//! the binary skewing function with signed-distance queries.

use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::scalar::{cast, Scalar};

/// Axis-aligned rectangular workspace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Workspace<S> {
    pub x_min: S,
    pub x_max: S,
    pub y_min: S,
    pub y_max: S,
}

impl<S: Scalar> Workspace<S> {
    pub fn new(x_min: S, x_max: S, y_min: S, y_max: S) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::InvalidConfig(format!(
                "workspace bounds must be ordered, got x [{x_min}, {x_max}] y [{y_min}, {y_max}]"
            )));
        }
        Ok(Workspace {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    /// The default 20 m x 20 m workspace used by the bundled scenarios.
    pub fn standard() -> Self {
        Workspace {
            x_min: S::zero(),
            x_max: cast(20.0),
            y_min: S::zero(),
            y_max: cast(20.0),
        }
    }

    pub fn contains(&self, p: Vec2<S>) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn width(&self) -> S {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> S {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> S {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> S {
        (self.width() * self.width() + self.height() * self.height()).sqrt()
    }

    /// Project a point onto the workspace rectangle.
    pub fn clamp(&self, p: Vec2<S>) -> Vec2<S> {
        Vec2::new(
            p.x.max(self.x_min).min(self.x_max),
            p.y.max(self.y_min).min(self.y_max),
        )
    }
}

/// Obstacle primitives: circles, convex polygons, and (rotated) ellipses.
#[derive(Clone, Debug, PartialEq)]
pub enum Obstacle<S> {
    Circle {
        center: Vec2<S>,
        radius: S,
    },
    /// Counter-clockwise convex polygon with at least three vertices.
    ConvexPolygon {
        vertices: Vec<Vec2<S>>,
    },
    Ellipse {
        center: Vec2<S>,
        semi_axes: (S, S),
        rotation: S,
    },
}

impl<S: Scalar> Obstacle<S> {
    /// Axis-aligned rectangle as a convex polygon.
    pub fn rectangle(x_min: S, x_max: S, y_min: S, y_max: S) -> Self {
        Obstacle::ConvexPolygon {
            vertices: vec![
                Vec2::new(x_min, y_min),
                Vec2::new(x_max, y_min),
                Vec2::new(x_max, y_max),
                Vec2::new(x_min, y_max),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Obstacle::Circle { radius, .. } => {
                if *radius <= S::zero() {
                    return Err(Error::InvalidParameter(format!(
                        "circle radius must be positive, got {radius}"
                    )));
                }
            }
            Obstacle::ConvexPolygon { vertices } => {
                if vertices.len() < 3 {
                    return Err(Error::InvalidParameter(
                        "polygon needs at least 3 vertices".into(),
                    ));
                }
                let n = vertices.len();
                let tol = -cast::<S>(1e-12);
                let mut has_turn = false;
                for i in 0..n {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    let c = vertices[(i + 2) % n];
                    let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
                    if cross < tol {
                        return Err(Error::InvalidParameter(
                            "polygon must be convex and counter-clockwise".into(),
                        ));
                    }
                    if cross > cast(1e-12) {
                        has_turn = true;
                    }
                }
                if !has_turn {
                    return Err(Error::InvalidParameter("polygon is degenerate".into()));
                }
            }
            Obstacle::Ellipse { semi_axes, .. } => {
                if semi_axes.0 <= S::zero() || semi_axes.1 <= S::zero() {
                    return Err(Error::InvalidParameter(
                        "ellipse semi-axes must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// True when the point is inside or on the boundary.
    pub fn contains(&self, p: Vec2<S>) -> bool {
        match self {
            Obstacle::Circle { center, radius } => (p - *center).norm_sq() <= *radius * *radius,
            Obstacle::ConvexPolygon { vertices } => {
                let n = vertices.len();
                for i in 0..n {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
                    if cross < S::zero() {
                        return false;
                    }
                }
                true
            }
            Obstacle::Ellipse {
                center,
                semi_axes,
                rotation,
            } => {
                let q = to_ellipse_frame(p, *center, *rotation);
                let u = q.x / semi_axes.0;
                let v = q.y / semi_axes.1;
                u * u + v * v <= S::one()
            }
        }
    }

    /// Signed distance to the boundary: positive outside, negative inside.
    pub fn signed_distance(&self, p: Vec2<S>) -> S {
        self.signed_distance_and_gradient(p).0
    }

    /// Signed distance plus its spatial gradient (unit vector pointing in
    /// the direction of increasing clearance).
    pub fn signed_distance_and_gradient(&self, p: Vec2<S>) -> (S, Vec2<S>) {
        match self {
            Obstacle::Circle { center, radius } => {
                let d = p - *center;
                let n = d.norm();
                if n < cast(1e-12) {
                    // Degenerate query at the exact center.
                    (-*radius, Vec2::new(S::one(), S::zero()))
                } else {
                    (n - *radius, d / n)
                }
            }
            Obstacle::ConvexPolygon { vertices } => {
                let inside = self.contains(p);
                let (dist, closest) = polygon_boundary_distance(vertices, p);
                signed_from_closest(p, closest, dist, inside, vertices)
            }
            Obstacle::Ellipse {
                center,
                semi_axes,
                rotation,
            } => {
                let q = to_ellipse_frame(p, *center, *rotation);
                let inside = {
                    let u = q.x / semi_axes.0;
                    let v = q.y / semi_axes.1;
                    u * u + v * v <= S::one()
                };
                let cp_frame = ellipse_closest_point(semi_axes.0, semi_axes.1, q);
                let closest = from_ellipse_frame(cp_frame, *center, *rotation);
                let dist = (p - closest).norm();
                if dist < cast(1e-12) {
                    // On the boundary: use the implicit-surface normal.
                    let grad_frame = Vec2::new(
                        q.x / (semi_axes.0 * semi_axes.0),
                        q.y / (semi_axes.1 * semi_axes.1),
                    );
                    let g = rotate(grad_frame, *rotation);
                    let n = g.norm().max(cast(1e-12));
                    return (S::zero(), g / n);
                }
                let dir = (p - closest) / dist;
                if inside {
                    (-dist, -dir)
                } else {
                    (dist, dir)
                }
            }
        }
    }

    /// Area of the primitive (used by scene generators and area checks).
    pub fn area(&self) -> S {
        match self {
            Obstacle::Circle { radius, .. } => cast::<S>(std::f64::consts::PI) * *radius * *radius,
            Obstacle::ConvexPolygon { vertices } => {
                let n = vertices.len();
                let mut acc = S::zero();
                for i in 0..n {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    acc += a.x * b.y - b.x * a.y;
                }
                acc * cast(0.5)
            }
            Obstacle::Ellipse { semi_axes, .. } => {
                cast::<S>(std::f64::consts::PI) * semi_axes.0 * semi_axes.1
            }
        }
    }
}

fn rotate<S: Scalar>(v: Vec2<S>, angle: S) -> Vec2<S> {
    let (sin, cos) = angle.sin_cos();
    Vec2::new(cos * v.x - sin * v.y, sin * v.x + cos * v.y)
}

fn to_ellipse_frame<S: Scalar>(p: Vec2<S>, center: Vec2<S>, rotation: S) -> Vec2<S> {
    rotate(p - center, -rotation)
}

fn from_ellipse_frame<S: Scalar>(q: Vec2<S>, center: Vec2<S>, rotation: S) -> Vec2<S> {
    rotate(q, rotation) + center
}

fn signed_from_closest<S: Scalar>(
    p: Vec2<S>,
    closest: Vec2<S>,
    dist: S,
    inside: bool,
    vertices: &[Vec2<S>],
) -> (S, Vec2<S>) {
    if dist < cast(1e-12) {
        // On the boundary: outward normal of the nearest edge.
        let n = vertices.len();
        let mut best = (S::infinity(), Vec2::new(S::one(), S::zero()));
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let (d, _) = segment_distance(a, b, p);
            if d < best.0 {
                let e = b - a;
                let len = e.norm().max(cast(1e-12));
                // CCW polygon: outward normal points right of the edge.
                best = (d, Vec2::new(e.y / len, -e.x / len));
            }
        }
        return (S::zero(), best.1);
    }
    let dir = (p - closest) / dist;
    if inside {
        (-dist, -dir)
    } else {
        (dist, dir)
    }
}

/// Distance from `p` to segment `ab` plus the closest point.
fn segment_distance<S: Scalar>(a: Vec2<S>, b: Vec2<S>, p: Vec2<S>) -> (S, Vec2<S>) {
    let ab = b - a;
    let denom = ab.norm_sq();
    let t = if denom > S::zero() {
        ((p - a).dot(ab) / denom).max(S::zero()).min(S::one())
    } else {
        S::zero()
    };
    let closest = a + ab * t;
    ((p - closest).norm(), closest)
}

fn polygon_boundary_distance<S: Scalar>(vertices: &[Vec2<S>], p: Vec2<S>) -> (S, Vec2<S>) {
    let n = vertices.len();
    let mut best = (S::infinity(), p);
    for i in 0..n {
        let (d, cp) = segment_distance(vertices[i], vertices[(i + 1) % n], p);
        if d < best.0 {
            best = (d, cp);
        }
    }
    best
}

/// Closest point on the axis-aligned ellipse `(x/a)^2 + (y/b)^2 = 1` to `q`,
/// in the ellipse frame. Damped Newton on the boundary angle, at most 50
/// iterations, tolerance 1e-9.
fn ellipse_closest_point<S: Scalar>(a: S, b: S, q: Vec2<S>) -> Vec2<S> {
    let px = q.x.abs();
    let py = q.y.abs();
    let axis_eps = cast::<S>(1e-14) * a.max(b);
    // Queries on a symmetry axis have zero angular gradient there, so the
    // Newton iteration cannot leave the axis; handle them in closed form.
    // Inside the evolute the closest point sits off-axis.
    if py <= axis_eps {
        let cusp = (a * a - b * b) / a;
        if cusp > S::zero() && px < cusp {
            let cx = a * a * px / (a * a - b * b);
            let frac = cx / a;
            let cy = b * (S::one() - frac * frac).max(S::zero()).sqrt();
            return Vec2::new(cx.copysign(q.x), cy);
        }
        return Vec2::new(a.copysign(q.x), S::zero());
    }
    if px <= axis_eps {
        let cusp = (b * b - a * a) / b;
        if cusp > S::zero() && py < cusp {
            let cy = b * b * py / (b * b - a * a);
            let frac = cy / b;
            let cx = a * (S::one() - frac * frac).max(S::zero()).sqrt();
            return Vec2::new(cx, cy.copysign(q.y));
        }
        return Vec2::new(S::zero(), b.copysign(q.y));
    }
    let half_pi = cast::<S>(std::f64::consts::FRAC_PI_2);
    let tol = cast::<S>(1e-9);
    let objective = |t: S| {
        let (sin, cos) = t.sin_cos();
        let dx = a * cos - px;
        let dy = b * sin - py;
        dx * dx + dy * dy
    };
    // Coarse scan first: the squared distance can be non-convex in the
    // angle, and Newton started in a concave stretch walks away from the
    // minimum. 32 brackets put the start inside the convex basin.
    let mut theta = S::atan2(a * py, b * px);
    let mut f_curr = objective(theta);
    for k in 0..=32 {
        let cand = half_pi * cast::<S>(k as f64 / 32.0);
        let f_cand = objective(cand);
        if f_cand < f_curr {
            theta = cand;
            f_curr = f_cand;
        }
    }
    for _ in 0..50 {
        let (sin, cos) = theta.sin_cos();
        let ex = a * cos;
        let ey = b * sin;
        // d/dtheta of 0.5*|e(theta) - p|^2 and its second derivative.
        let g = (ex - px) * (-a * sin) + (ey - py) * (b * cos);
        let h = a * a * sin * sin + b * b * cos * cos
            + (ex - px) * (-a * cos)
            + (ey - py) * (-b * sin);
        if g.abs() < tol {
            break;
        }
        // Newton step where the curvature is usable, gradient step otherwise.
        let mut step = if h > cast(1e-18) { g / h } else { g };
        // Damp until the step actually reduces the distance.
        let mut improved = false;
        for _ in 0..30 {
            let cand = (theta - step).max(S::zero()).min(half_pi);
            let f_cand = objective(cand);
            if f_cand <= f_curr {
                theta = cand;
                f_curr = f_cand;
                improved = true;
                break;
            }
            step = step * cast(0.5);
        }
        if !improved {
            break;
        }
    }
    let (sin, cos) = theta.sin_cos();
    Vec2::new((a * cos).copysign(q.x), (b * sin).copysign(q.y))
}

/// Binary skewing function over a workspace: 1 in free space, 0 on or inside
/// any obstacle. Immutable after construction.
#[derive(Clone, Debug)]
pub struct SkewField<S> {
    workspace: Workspace<S>,
    obstacles: Vec<Obstacle<S>>,
}

impl<S: Scalar> SkewField<S> {
    pub fn new(workspace: Workspace<S>, obstacles: Vec<Obstacle<S>>) -> Result<Self> {
        for obstacle in &obstacles {
            obstacle.validate()?;
        }
        Ok(SkewField {
            workspace,
            obstacles,
        })
    }

    /// Obstacle-free field (the skewing function is identically 1).
    pub fn free(workspace: Workspace<S>) -> Self {
        SkewField {
            workspace,
            obstacles: Vec::new(),
        }
    }

    pub fn workspace(&self) -> &Workspace<S> {
        &self.workspace
    }

    pub fn obstacles(&self) -> &[Obstacle<S>] {
        &self.obstacles
    }

    /// True when the skewing function is identically 1.
    pub fn is_unobstructed(&self) -> bool {
        self.obstacles.is_empty()
    }

    /// Binary occupancy value at `x`: 0 inside (or on the boundary of) any
    /// obstacle, 1 otherwise. Errors if `x` is outside the workspace.
    pub fn occupancy(&self, x: Vec2<S>) -> Result<S> {
        if !self.workspace.contains(x) {
            return Err(Error::OutsideWorkspace {
                x: x.x.to_f64().unwrap_or(f64::NAN),
                y: x.y.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(if self.is_free_unchecked(x) {
            S::one()
        } else {
            S::zero()
        })
    }

    /// Occupancy without the workspace-domain check.
    #[inline]
    pub fn is_free_unchecked(&self, x: Vec2<S>) -> bool {
        !self.obstacles.iter().any(|o| o.contains(x))
    }

    /// Sentinel returned by clearance queries when there are no obstacles;
    /// strictly larger than any in-workspace distance.
    pub fn clearance_sentinel(&self) -> S {
        self.workspace.diagonal() * cast(2.0)
    }

    /// Shortest signed distance from `x` to any obstacle boundary: positive
    /// outside, negative inside. Errors if `x` is outside the workspace.
    pub fn clearance(&self, x: Vec2<S>) -> Result<S> {
        self.clearance_and_gradient(x).map(|(d, _)| d)
    }

    /// Clearance plus its gradient (direction of increasing clearance).
    pub fn clearance_and_gradient(&self, x: Vec2<S>) -> Result<(S, Vec2<S>)> {
        if !self.workspace.contains(x) {
            return Err(Error::OutsideWorkspace {
                x: x.x.to_f64().unwrap_or(f64::NAN),
                y: x.y.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(self.clearance_and_gradient_unchecked(x))
    }

    /// Clearance plus gradient without the workspace-domain check.
    pub fn clearance_and_gradient_unchecked(&self, x: Vec2<S>) -> (S, Vec2<S>) {
        let mut best = (self.clearance_sentinel(), Vec2::new(S::one(), S::zero()));
        for obstacle in &self.obstacles {
            let (d, g) = obstacle.signed_distance_and_gradient(x);
            if d < best.0 {
                best = (d, g);
            }
        }
        best
    }
}
