//! File formats: the JSON scenario/environment schema, samples and metric
//! CSVs, plain-text rasters with a JSON sidecar header, the plan-trajectory
//! text format, and the run manifest.
//!
//! All writers format floats with Rust's shortest round-trip `Display`, so
//! equal runs produce byte-identical artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Obstacle, SkewField, Workspace};
use crate::error::{Error, Result};
use crate::grid::{DensityField, GridShape, QuadratureGrid};
use crate::linalg::{Mat2, Vec2};
use crate::mixture::{MixtureParams, SnComponent};
use crate::plan::{GoalSpec, PlanFrame, PlannerKind, PlanTrajectory};

/// Workspace bounds in the configuration schema.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct WorkspaceConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl WorkspaceConfig {
    pub fn build(&self) -> Result<Workspace<f64>> {
        Workspace::new(self.x_min, self.x_max, self.y_min, self.y_max)
    }

    pub fn standard() -> Self {
        WorkspaceConfig {
            x_min: 0.0,
            x_max: 20.0,
            y_min: 0.0,
            y_max: 20.0,
        }
    }
}

/// Obstacle in the configuration schema.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObstacleConfig {
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    ConvexPolygon {
        vertices: Vec<[f64; 2]>,
    },
    Ellipse {
        center: [f64; 2],
        semi_axes: [f64; 2],
        rotation: f64,
    },
}

impl ObstacleConfig {
    pub fn build(&self) -> Obstacle<f64> {
        match self {
            ObstacleConfig::Circle { center, radius } => Obstacle::Circle {
                center: Vec2::new(center[0], center[1]),
                radius: *radius,
            },
            ObstacleConfig::ConvexPolygon { vertices } => Obstacle::ConvexPolygon {
                vertices: vertices.iter().map(|v| Vec2::new(v[0], v[1])).collect(),
            },
            ObstacleConfig::Ellipse {
                center,
                semi_axes,
                rotation,
            } => Obstacle::Ellipse {
                center: Vec2::new(center[0], center[1]),
                semi_axes: (semi_axes[0], semi_axes[1]),
                rotation: *rotation,
            },
        }
    }
}

/// Grid spacing in the configuration schema.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct GridConfig {
    pub dx: f64,
    pub dy: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { dx: 0.1, dy: 0.1 }
    }
}

/// Scenario environment: workspace, obstacles, grid spacing.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EnvConfig {
    pub workspace: WorkspaceConfig,
    #[serde(default)]
    pub obstacles: Vec<ObstacleConfig>,
    #[serde(default)]
    pub grid: GridConfig,
}

impl EnvConfig {
    /// Build the skew field and its quadrature grid.
    pub fn build(&self) -> Result<(SkewField<f64>, QuadratureGrid<f64>)> {
        let workspace = self.workspace.build()?;
        let field = SkewField::new(
            workspace,
            self.obstacles.iter().map(|o| o.build()).collect(),
        )?;
        let grid = QuadratureGrid::build(&workspace, self.grid.dx, self.grid.dy, &field)?;
        Ok((field, grid))
    }
}

/// One mixture component in the configuration schema.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ComponentConfig {
    pub mu: [f64; 2],
    pub sigma: [[f64; 2]; 2],
}

impl ComponentConfig {
    pub fn build(&self) -> Result<SnComponent<f64>> {
        SnComponent::new(
            Vec2::new(self.mu[0], self.mu[1]),
            Mat2::new(
                self.sigma[0][0],
                self.sigma[0][1],
                self.sigma[1][0],
                self.sigma[1][1],
            ),
        )
    }

    pub fn from_component(c: &SnComponent<f64>) -> Self {
        ComponentConfig {
            mu: [c.mu().x, c.mu().y],
            sigma: [
                [c.sigma().m00, c.sigma().m01],
                [c.sigma().m10, c.sigma().m11],
            ],
        }
    }
}

/// Mixture parameters in the configuration schema.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MixtureConfig {
    pub weights: Vec<f64>,
    pub components: Vec<ComponentConfig>,
}

impl MixtureConfig {
    pub fn build(&self) -> Result<MixtureParams<f64>> {
        let comps = self
            .components
            .iter()
            .map(|c| c.build())
            .collect::<Result<Vec<_>>>()?;
        MixtureParams::new(self.weights.clone(), comps)
    }

    pub fn from_params(p: &MixtureParams<f64>) -> Self {
        MixtureConfig {
            weights: p.weights().to_vec(),
            components: p
                .components()
                .iter()
                .map(ComponentConfig::from_component)
                .collect(),
        }
    }
}

/// Goal component in the configuration schema.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct GoalConfig {
    pub mu: [f64; 2],
    pub sigma: [[f64; 2]; 2],
}

impl GoalConfig {
    pub fn build(&self) -> Result<GoalSpec<f64>> {
        Ok(GoalSpec::new(
            ComponentConfig {
                mu: self.mu,
                sigma: self.sigma,
            }
            .build()?,
        ))
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Write sample points as `x,y` rows.
pub fn write_samples_csv(path: &Path, points: &[Vec2<f64>]) -> Result<()> {
    let mut out = String::from("x,y\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.x, p.y);
    }
    write_text(path, &out)
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<Vec2<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with('x')) {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                message: format!("line {}: expected x,y", lineno + 1),
            })?
            .trim()
            .parse()
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: format!("line {}: {}", lineno + 1, e),
            })
        };
        let x = parse(parts.next())?;
        let y = parse(parts.next())?;
        points.push(Vec2::new(x, y));
    }
    Ok(points)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Occupancy raster: one row per lattice row (y ascending), space-separated
/// 0/1 values, x ascending within a row.
pub fn occupancy_raster(grid: &QuadratureGrid<f64>) -> String {
    let shape = grid.shape();
    let mut out = String::with_capacity(shape.len() * 2);
    for iy in 0..shape.ny {
        for ix in 0..shape.nx {
            if ix > 0 {
                out.push(' ');
            }
            let q = grid.q(iy * shape.nx + ix);
            out.push(if q > 0.0 { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

/// Density raster in the occupancy-raster layout.
pub fn density_raster(field: &DensityField<f64>) -> String {
    let shape = field.shape();
    let mut out = String::new();
    for iy in 0..shape.ny {
        for ix in 0..shape.nx {
            if ix > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", field.values()[iy * shape.nx + ix]);
        }
        out.push('\n');
    }
    out
}

/// Sidecar header describing a raster's geometry.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct RasterHeader {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub x0: f64,
    pub y0: f64,
}

impl RasterHeader {
    pub fn from_shape(shape: GridShape<f64>) -> Self {
        RasterHeader {
            nx: shape.nx,
            ny: shape.ny,
            dx: shape.dx,
            dy: shape.dy,
            x0: shape.x0,
            y0: shape.y0,
        }
    }
}

/// Write a density raster plus its `.hdr.json` sidecar.
pub fn write_density_raster(path: &Path, field: &DensityField<f64>) -> Result<()> {
    write_text(path, &density_raster(field))?;
    let header = RasterHeader::from_shape(field.shape());
    let sidecar = path.with_extension("hdr.json");
    write_json(&sidecar, &header)
}

/// Plan trajectory text format: a header line
/// `# planner <tag> success <0|1> components <k>` followed by one frame per
/// line: `s w1 mu1x mu1y s1xx s1xy s1yy [w2 ...]`.
pub fn trajectory_text(plan: &PlanTrajectory<f64>) -> String {
    let k = plan
        .frames
        .first()
        .map(|f| f.params.len())
        .unwrap_or(0);
    let mut out = format!(
        "# planner {} success {} components {}\n",
        plan.kind.as_str(),
        if plan.success { 1 } else { 0 },
        k
    );
    for frame in &plan.frames {
        let _ = write!(out, "{}", frame.s);
        for (i, w) in frame.params.weights().iter().enumerate() {
            let c = frame.params.component(i);
            let s = c.sigma();
            let _ = write!(
                out,
                " {} {} {} {} {} {}",
                w,
                c.mu().x,
                c.mu().y,
                s.m00,
                s.m01,
                s.m11
            );
        }
        out.push('\n');
    }
    out
}

pub fn write_trajectory(path: &Path, plan: &PlanTrajectory<f64>) -> Result<()> {
    write_text(path, &trajectory_text(plan))
}

pub fn read_trajectory(path: &Path) -> Result<PlanTrajectory<f64>> {
    let text = fs::read_to_string(path)?;
    parse_trajectory(&text, &path.display().to_string())
}

fn parse_trajectory(text: &str, path: &str) -> Result<PlanTrajectory<f64>> {
    let bad = |message: String| Error::Parse {
        path: path.to_string(),
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty trajectory".into()))?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 7 || tokens[0] != "#" {
        return Err(bad(format!("malformed header: {header}")));
    }
    let kind = match tokens[2] {
        "snmm-di" => PlannerKind::Di,
        "snmm-apf" => PlannerKind::SnmmApf,
        "gmm-apf" => PlannerKind::GmmApf,
        other => return Err(bad(format!("unknown planner {other}"))),
    };
    let success = tokens[4] == "1";
    let k: usize = tokens[6]
        .parse()
        .map_err(|e| bad(format!("component count: {e}")))?;
    let mut frames = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {}", lineno + 2, e)))?;
        if vals.len() != 1 + 6 * k {
            return Err(bad(format!(
                "line {}: expected {} values, got {}",
                lineno + 2,
                1 + 6 * k,
                vals.len()
            )));
        }
        let s = vals[0];
        let mut weights = Vec::with_capacity(k);
        let mut comps = Vec::with_capacity(k);
        for i in 0..k {
            let base = 1 + 6 * i;
            weights.push(vals[base]);
            comps.push(SnComponent::new(
                Vec2::new(vals[base + 1], vals[base + 2]),
                Mat2::symmetric(vals[base + 3], vals[base + 4], vals[base + 5]),
            )?);
        }
        frames.push(PlanFrame {
            s,
            params: MixtureParams::new(weights, comps)?,
        });
    }
    if frames.is_empty() {
        return Err(bad("trajectory has no frames".into()));
    }
    let steps = frames.len() - 1;
    Ok(PlanTrajectory {
        frames,
        kind,
        success,
        potential_trace: Vec::new(),
        steps,
    })
}

/// Write a scalar trace as `step,value` rows.
pub fn write_trace_csv(path: &Path, name: &str, values: &[f64]) -> Result<()> {
    let mut out = format!("step,{name}\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{i},{v}");
    }
    write_text(path, &out)
}

/// Per-agent trajectory CSV: `agent_id,step,x,y`.
pub fn write_agent_trajectories_csv(path: &Path, trajectories: &[Vec<Vec2<f64>>]) -> Result<()> {
    let mut out = String::from("agent_id,step,x,y\n");
    for (id, t) in trajectories.iter().enumerate() {
        for (step, p) in t.iter().enumerate() {
            let _ = writeln!(out, "{id},{step},{},{}", p.x, p.y);
        }
    }
    write_text(path, &out)
}

/// FNV-1a fingerprint of a byte string, as fixed-width hex.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// Run manifest: what produced the artifacts, from which seeds and config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new<T: Serialize>(command: &str, seeds: Vec<u64>, config: &T) -> Result<Self> {
        let bytes = serde_json::to_vec(config)?;
        Ok(RunManifest {
            command: command.to_string(),
            seeds,
            config_hash: fingerprint(&bytes),
            artifacts: Vec::new(),
        })
    }

    pub fn record(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
        self.artifacts.sort();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{plan_di, GoalSpec};
    use tempdir::scratch_dir;

    mod tempdir {
        use std::path::PathBuf;
        use std::sync::atomic::{AtomicU64, Ordering};

        static COUNTER: AtomicU64 = AtomicU64::new(0);

        /// Unique scratch directory under the target dir.
        pub fn scratch_dir(tag: &str) -> PathBuf {
            let n = COUNTER.fetch_add(1, Ordering::SeqCst);
            let dir = std::env::temp_dir().join(format!(
                "snmm-io-test-{tag}-{}-{n}",
                std::process::id()
            ));
            std::fs::create_dir_all(&dir).unwrap();
            dir
        }
    }

    fn sample_env() -> EnvConfig {
        EnvConfig {
            workspace: WorkspaceConfig::standard(),
            obstacles: vec![
                ObstacleConfig::Circle {
                    center: [5.0, 5.0],
                    radius: 1.0,
                },
                ObstacleConfig::ConvexPolygon {
                    vertices: vec![[7.0, 9.0], [11.0, 9.0], [11.0, 10.0], [7.0, 10.0]],
                },
            ],
            grid: GridConfig::default(),
        }
    }

    #[test]
    fn env_config_roundtrips_and_builds() {
        let dir = scratch_dir("env");
        let cfg = sample_env();
        let path = dir.join("env.json");
        write_json(&path, &cfg).unwrap();
        let back: EnvConfig = read_json(&path).unwrap();
        assert_eq!(back, cfg);
        let (field, grid) = back.build().unwrap();
        assert_eq!(field.obstacles().len(), 2);
        assert_eq!(grid.len(), 40_000);
    }

    #[test]
    fn samples_csv_roundtrips() {
        let dir = scratch_dir("samples");
        let pts = vec![Vec2::new(1.5, 2.25), Vec2::new(0.1, 19.875)];
        let path = dir.join("samples.csv");
        write_samples_csv(&path, &pts).unwrap();
        let back = read_samples_csv(&path).unwrap();
        assert_eq!(back, pts);
    }

    #[test]
    fn occupancy_raster_marks_obstacles() {
        let cfg = sample_env();
        let (_, grid) = cfg.build().unwrap();
        let raster = occupancy_raster(&grid);
        let rows: Vec<&str> = raster.lines().collect();
        assert_eq!(rows.len(), 200);
        // Row through the rectangle (y = 9.55 -> iy 95).
        let row: Vec<&str> = rows[95].split(' ').collect();
        assert_eq!(row.len(), 200);
        assert_eq!(row[90], "0"); // x = 9.05, inside the rectangle
        assert_eq!(row[5], "1");
    }

    #[test]
    fn trajectory_roundtrips_exactly() {
        let initial = MixtureConfig {
            weights: vec![0.5, 0.5],
            components: vec![
                ComponentConfig {
                    mu: [3.0, 13.0],
                    sigma: [[0.8, 0.1], [0.1, 0.8]],
                },
                ComponentConfig {
                    mu: [3.0, 7.0],
                    sigma: [[0.8, -0.1], [-0.1, 0.8]],
                },
            ],
        }
        .build()
        .unwrap();
        let goal = GoalSpec::new(
            ComponentConfig {
                mu: [17.0, 10.0],
                sigma: [[2.25, 0.0], [0.0, 2.25]],
            }
            .build()
            .unwrap(),
        );
        let plan = plan_di(&initial, &goal, 7).unwrap();
        let dir = scratch_dir("traj");
        let path = dir.join("plan.traj");
        write_trajectory(&path, &plan).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.kind, plan.kind);
        assert_eq!(back.success, plan.success);
        assert_eq!(back.frames.len(), plan.frames.len());
        for (a, b) in plan.frames.iter().zip(&back.frames) {
            assert_eq!(a.s, b.s);
            for i in 0..a.params.len() {
                assert_eq!(a.params.weights()[i], b.params.weights()[i]);
                assert_eq!(a.params.component(i).mu(), b.params.component(i).mu());
                assert_eq!(
                    a.params.component(i).sigma(),
                    b.params.component(i).sigma()
                );
            }
        }
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(fingerprint(b"abc"), fingerprint(b"abc"));
        assert_ne!(fingerprint(b"abc"), fingerprint(b"abd"));
    }

    #[test]
    fn manifest_records_sorted_artifacts() {
        let dir = scratch_dir("manifest");
        let mut manifest = RunManifest::new("test", vec![7], &sample_env()).unwrap();
        manifest.record(&dir.join("b.csv"));
        manifest.record(&dir.join("a.csv"));
        assert!(manifest.artifacts[0].ends_with("a.csv"));
        let path = dir.join("manifest.json");
        manifest.write(&path).unwrap();
        let back: RunManifest = read_json(&path).unwrap();
        assert_eq!(back.config_hash, manifest.config_hash);
        assert_eq!(back.artifacts.len(), 2);
    }
}
