use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::Workspace;
use crate::error::{Result, SimError};

const SAMPLES_PER_SEGMENT: usize = 256;

/// Constant-speed path through random waypoints: an interpolating natural
/// cubic spline (chord-length knots) reparameterized by arc length. Past the
/// end the target turns around and retraces the path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPath {
    pub waypoints: Vec<Vector3<f64>>,
    pub speed: f64,
    knots: Vec<f64>,
    /// Second derivatives at the knots, per axis.
    moments: Vec<Vector3<f64>>,
    /// (knot parameter, cumulative arc length) lookup table.
    table: Vec<(f64, f64)>,
}

impl TargetPath {
    pub fn new(waypoints: Vec<Vector3<f64>>, speed: f64) -> Result<Self> {
        if waypoints.len() < 2 || !(speed > 0.0) {
            return Err(SimError::Config("path needs at least two waypoints and a positive speed".into()));
        }
        let mut knots = vec![0.0];
        for w in waypoints.windows(2) {
            let d = (w[1] - w[0]).norm();
            if d < 1e-9 {
                return Err(SimError::Config("consecutive path waypoints coincide".into()));
            }
            knots.push(knots.last().unwrap() + d);
        }
        let moments = natural_moments(&knots, &waypoints);
        let mut path = Self {
            waypoints,
            speed,
            knots,
            moments,
            table: Vec::new(),
        };
        path.build_table();
        Ok(path)
    }

    fn build_table(&mut self) {
        let end = *self.knots.last().unwrap();
        let n = SAMPLES_PER_SEGMENT * (self.knots.len() - 1);
        let mut table = Vec::with_capacity(n + 1);
        let mut s = 0.0;
        let mut prev = self.eval(0.0);
        table.push((0.0, 0.0));
        for k in 1..=n {
            let t = end * k as f64 / n as f64;
            let p = self.eval(t);
            s += (p - prev).norm();
            prev = p;
            table.push((t, s));
        }
        self.table = table;
    }

    pub fn length(&self) -> f64 {
        self.table.last().map(|e| e.1).unwrap_or(0.0)
    }

    /// Spline point at knot parameter `t`.
    fn eval(&self, t: f64) -> Vector3<f64> {
        let n = self.knots.len() - 1;
        let i = self.knots[1..n].iter().take_while(|k| t >= **k).count();
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let a = (t1 - t) / h;
        let b = (t - t0) / h;
        let (p0, p1) = (self.waypoints[i], self.waypoints[i + 1]);
        let (m0, m1) = (self.moments[i], self.moments[i + 1]);
        p0 * a + p1 * b + (m0 * (a * a * a - a) + m1 * (b * b * b - b)) * (h * h / 6.0)
    }

    /// Position at time `time` seconds.
    pub fn position(&self, time: f64) -> Vector3<f64> {
        let len = self.length();
        let mut s = (self.speed * time.max(0.0)) % (2.0 * len);
        if s > len {
            s = 2.0 * len - s;
        }
        let k = self.table.partition_point(|e| e.1 < s).clamp(1, self.table.len() - 1);
        let (t0, s0) = self.table[k - 1];
        let (t1, s1) = self.table[k];
        let t = if s1 > s0 { t0 + (t1 - t0) * (s - s0) / (s1 - s0) } else { t0 };
        self.eval(t)
    }
}

/// Second derivatives of the natural cubic spline (zero at both ends).
fn natural_moments(knots: &[f64], points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let n = points.len();
    let mut m = vec![Vector3::zeros(); n];
    if n < 3 {
        return m;
    }
    // Tridiagonal system for interior moments (Thomas algorithm).
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let inner = n - 2;
    let mut diag = vec![0.0; inner];
    let mut rhs = vec![Vector3::zeros(); inner];
    let mut upper = vec![0.0; inner];
    for i in 0..inner {
        let k = i + 1;
        diag[i] = 2.0 * (h[k - 1] + h[k]);
        upper[i] = h[k];
        rhs[i] = ((points[k + 1] - points[k]) / h[k] - (points[k] - points[k - 1]) / h[k - 1]) * 6.0;
    }
    for i in 1..inner {
        let w = h[i] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        let prev = rhs[i - 1];
        rhs[i] -= prev * w;
    }
    for i in (0..inner).rev() {
        let next = if i + 1 < inner { m[i + 2] } else { Vector3::zeros() };
        m[i + 1] = (rhs[i] - next * upper[i]) / diag[i];
    }
    m
}

/// Random waypoints in `workspace` (seeded), joined by a constant-speed
/// spline. Consecutive waypoints are at least a fifth of the workspace
/// diagonal apart.
pub fn generate_target_path(workspace: &Workspace, n_waypoints: usize, speed: f64, seed: u64) -> Result<TargetPath> {
    if n_waypoints < 2 {
        return Err(SimError::Config("path needs at least two waypoints".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_gap = 0.2 * (workspace.max - workspace.min).norm();
    let mut points: Vec<Vector3<f64>> = Vec::with_capacity(n_waypoints);
    while points.len() < n_waypoints {
        let mut candidate = workspace.sample(&mut rng);
        for _ in 0..100 {
            if points.last().is_none_or(|p| (candidate - p).norm() >= min_gap) {
                break;
            }
            candidate = workspace.sample(&mut rng);
        }
        // A zero-extent workspace cannot host distinct waypoints.
        if points.last().is_some_and(|p| (candidate - p).norm() < 1e-9) {
            return Err(SimError::Config("workspace too small for a target path".into()));
        }
        points.push(candidate);
    }
    TargetPath::new(points, speed)
}
