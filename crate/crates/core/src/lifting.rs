//! Lifting two per-view pixel trajectories into a 3D trajectory distribution.
//!
//! At each timestep `t` the pixel `ξ_m(t)` of view `m` is the mean of a 2D
//! Gaussian with covariance `Σ_m`. Pixels drawn from that Gaussian, truncated
//! at a Mahalanobis radius, are cast as rays and sampled in depth; samples
//! from the two views that land within `delta` of each other are kept, each
//! kept pair contributing the closest-approach midpoint of its two rays. A
//! Gaussian fitted to the kept points is the waypoint distribution at `t`, and
//! the trajectory distribution is the product over timesteps.

use rustc_hash::FxHashMap;

use nalgebra::{Cholesky, Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pixel_to_ray, ray_ray_closest_points, CameraView, GeometryError, Ray};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LiftingError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("timestep {t} out of range 1..={horizon}")]
    IndexOutOfRange { t: usize, horizon: usize },
    #[error("empty intersection region at t={t} (delta {delta} m)")]
    EmptyRegion { t: usize, delta: f64 },
    #[error("singular covariance at t={t}")]
    SingularCovariance { t: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Number of times `delta` may be doubled when `auto_widen` is enabled.
pub const MAX_WIDENINGS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftingConfig {
    pub d_near: f64,
    pub d_far: f64,
    /// Density cutoff as a Mahalanobis radius in pixel space.
    pub epsilon_sigma: f64,
    /// Cross-view tolerance in meters.
    pub delta: f64,
    pub samples_per_view: usize,
    pub depth_samples: usize,
    pub rng_seed: u64,
    /// Retry an empty timestep with `delta` doubled, up to [`MAX_WIDENINGS`] times.
    pub auto_widen: bool,
}

impl Default for LiftingConfig {
    fn default() -> Self {
        LiftingConfig {
            d_near: 0.1,
            d_far: 3.0,
            epsilon_sigma: 3.0,
            delta: 0.01,
            samples_per_view: 64,
            depth_samples: 64,
            rng_seed: 0,
            auto_widen: false,
        }
    }
}

impl LiftingConfig {
    pub fn validate(&self) -> Result<(), LiftingError> {
        let bad = |m: &str| Err(LiftingError::Validation(m.to_string()));
        if !(self.d_near > 0.0 && self.d_near < self.d_far && self.d_far.is_finite()) {
            return bad("require 0 < d_near < d_far");
        }
        if !(self.epsilon_sigma > 0.0 && self.epsilon_sigma.is_finite()) {
            return bad("epsilon_sigma must be positive");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be positive");
        }
        if self.samples_per_view == 0 || self.depth_samples == 0 {
            return bad("sample counts must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PixelTrajectoryRepr", try_from = "PixelTrajectoryRepr")]
pub struct PixelTrajectory {
    pub view_id: String,
    pub points: Vec<Vector2<f64>>,
    pub sigma: Matrix2<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PixelTrajectoryRepr {
    view_id: String,
    sigma: [f64; 4],
    points: Vec<[f64; 2]>,
}

impl From<PixelTrajectory> for PixelTrajectoryRepr {
    fn from(p: PixelTrajectory) -> Self {
        let s = p.sigma;
        PixelTrajectoryRepr {
            view_id: p.view_id,
            sigma: [s[(0, 0)], s[(0, 1)], s[(1, 0)], s[(1, 1)]],
            points: p.points.iter().map(|v| [v.x, v.y]).collect(),
        }
    }
}

impl TryFrom<PixelTrajectoryRepr> for PixelTrajectory {
    type Error = LiftingError;

    fn try_from(r: PixelTrajectoryRepr) -> Result<Self, LiftingError> {
        let t = PixelTrajectory {
            view_id: r.view_id,
            points: r.points.iter().map(|p| Vector2::new(p[0], p[1])).collect(),
            sigma: Matrix2::from_row_slice(&r.sigma),
        };
        t.validate()?;
        Ok(t)
    }
}

impl PixelTrajectory {
    pub fn new(view_id: impl Into<String>, points: Vec<Vector2<f64>>, sigma: Matrix2<f64>) -> Result<Self, LiftingError> {
        let t = PixelTrajectory { view_id: view_id.into(), points, sigma };
        t.validate()?;
        Ok(t)
    }

    pub fn horizon(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<(), LiftingError> {
        if self.points.len() < 2 {
            return Err(LiftingError::Validation(format!("trajectory for {} needs >= 2 points", self.view_id)));
        }
        if self.points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(LiftingError::Validation("non-finite trajectory point".into()));
        }
        check_pd(&self.sigma).map_err(LiftingError::Validation)
    }
}

fn check_pd(sigma: &Matrix2<f64>) -> Result<(), String> {
    if sigma.iter().any(|v| !v.is_finite()) || sigma[(0, 1)] != sigma[(1, 0)] {
        return Err("pixel covariance must be finite and symmetric".into());
    }
    let eig = SymmetricEigen::new(*sigma).eigenvalues;
    if eig.iter().any(|&l| !(l > 0.0)) {
        return Err("pixel covariance must be positive definite".into());
    }
    Ok(())
}

/// 2D Gaussian over pixel positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelGaussian {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl PixelGaussian {
    pub fn density(&self, p: &Vector2<f64>) -> f64 {
        let inv = self.cov.try_inverse().unwrap_or_else(Matrix2::zeros);
        let d = p - self.mean;
        let m2 = (d.transpose() * inv * d)[0];
        (-0.5 * m2).exp() / (2.0 * std::f64::consts::PI * self.cov.determinant().sqrt())
    }

    pub fn mahalanobis(&self, p: &Vector2<f64>) -> f64 {
        let inv = self.cov.try_inverse().unwrap_or_else(Matrix2::zeros);
        let d = p - self.mean;
        (d.transpose() * inv * d)[0].max(0.0).sqrt()
    }
}

/// Gaussian at 1-based timestep `t`.
pub fn pixel_density_at(traj: &PixelTrajectory, t: usize) -> Result<PixelGaussian, LiftingError> {
    let h = traj.horizon();
    if t == 0 || t > h {
        return Err(LiftingError::IndexOutOfRange { t, horizon: h });
    }
    Ok(PixelGaussian { mean: traj.points[t - 1], cov: traj.sigma })
}

/// Resamples a polyline to `h` points spaced uniformly in arc length.
/// The first and last input points are reproduced exactly.
pub fn resample_equal_length(polyline: &[Vector2<f64>], h: usize) -> Result<Vec<Vector2<f64>>, LiftingError> {
    if polyline.len() < 2 || h < 2 {
        return Err(LiftingError::Validation("need a polyline of >= 2 points and H >= 2".into()));
    }
    if polyline.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(LiftingError::Validation("non-finite polyline point".into()));
    }
    let mut cum = Vec::with_capacity(polyline.len());
    cum.push(0.0);
    for w in polyline.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    if !(total > 0.0) {
        return Err(LiftingError::Validation("polyline has zero length".into()));
    }

    const SNAP: f64 = 1e-12;
    let mut out = Vec::with_capacity(h);
    let mut seg = 0;
    for k in 0..h {
        if k == h - 1 {
            out.push(*polyline.last().unwrap());
            break;
        }
        let s = total * k as f64 / (h - 1) as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let frac = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        let p = if frac <= SNAP {
            polyline[seg]
        } else if frac >= 1.0 - SNAP {
            polyline[seg + 1]
        } else {
            polyline[seg] + (polyline[seg + 1] - polyline[seg]) * frac
        };
        out.push(p);
    }
    Ok(out)
}

/// A 3D sample together with the index of the ray it was drawn on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub point: Vector3<f64>,
    pub ray: usize,
}

/// Sampled approximation of the 3D pre-image of a pixel density.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityRegion {
    pub rays: Vec<Ray>,
    pub samples: Vec<RaySample>,
}

impl DensityRegion {
    pub fn new(rays: Vec<Ray>, samples: Vec<RaySample>) -> Result<Self, LiftingError> {
        if samples.iter().any(|s| s.ray >= rays.len()) {
            return Err(LiftingError::Validation("sample references unknown ray".into()));
        }
        Ok(DensityRegion { rays, samples })
    }

    pub fn points(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.samples.iter().map(|s| s.point)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draws a standard 2D normal conditioned on `‖z‖ ≤ radius` by inverting the
/// CDF of the radius (chi with 2 degrees of freedom).
fn truncated_standard_normal_2d<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> Vector2<f64> {
    let mass = -(-0.5 * radius * radius).exp_m1();
    let u: f64 = rng.random();
    let r2 = -2.0 * (-u * mass).ln_1p();
    let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let r = r2.max(0.0).sqrt();
    Vector2::new(r * theta.cos(), r * theta.sin())
}

/// Samples `samples_per_view` pixels from the density truncated at
/// `epsilon_sigma`, casts each as a ray and draws `depth_samples` depths
/// uniformly in `[d_near, d_far]`.
pub fn cast_density_region<R: Rng + ?Sized>(
    view: &CameraView,
    density: &PixelGaussian,
    config: &LiftingConfig,
    rng: &mut R,
) -> Result<DensityRegion, LiftingError> {
    let chol = Cholesky::new(density.cov).ok_or_else(|| LiftingError::Validation("pixel covariance not PD".into()))?;
    let l = chol.l();
    let mut rays = Vec::with_capacity(config.samples_per_view);
    let mut samples = Vec::with_capacity(config.samples_per_view * config.depth_samples);
    for i in 0..config.samples_per_view {
        let z = truncated_standard_normal_2d(config.epsilon_sigma, rng);
        let pixel = density.mean + l * z;
        let ray = pixel_to_ray(view, &pixel)?;
        for _ in 0..config.depth_samples {
            let u: f64 = rng.random();
            let d = config.d_near + (config.d_far - config.d_near) * u;
            samples.push(RaySample { point: ray.point_at(d), ray: i });
        }
        rays.push(ray);
    }
    Ok(DensityRegion { rays, samples })
}

type Cell = (i64, i64, i64);

fn cell_of(p: &Vector3<f64>, size: f64) -> Cell {
    ((p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64)
}

/// Keeps every cross pair `(a, b)` with `‖a − b‖ ≤ delta` and returns, per
/// pair, the closest-approach midpoint of the two rays (the sample midpoint
/// when the rays are parallel). Output follows the order of a brute-force
/// double loop over `(region_1, region_2)`.
pub fn intersect_regions(region_1: &DensityRegion, region_2: &DensityRegion, delta: f64) -> Vec<Vector3<f64>> {
    let mut grid: FxHashMap<Cell, Vec<usize>> = FxHashMap::default();
    for (j, b) in region_2.samples.iter().enumerate() {
        grid.entry(cell_of(&b.point, delta)).or_default().push(j);
    }
    let mut out = Vec::new();
    let mut hits = Vec::new();
    for a in &region_1.samples {
        let (cx, cy, cz) = cell_of(&a.point, delta);
        hits.clear();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(js) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        hits.extend(js.iter().copied().filter(|&j| (a.point - region_2.samples[j].point).norm() <= delta));
                    }
                }
            }
        }
        hits.sort_unstable();
        for &j in &hits {
            let b = &region_2.samples[j];
            let rep = match ray_ray_closest_points(&region_1.rays[a.ray], &region_2.rays[b.ray]) {
                Ok(c) => c.midpoint(),
                Err(_) => (a.point + b.point) * 0.5,
            };
            out.push(rep);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "WaypointRepr", try_from = "WaypointRepr")]
pub struct WaypointGaussian {
    pub t: usize,
    pub mu: Vector3<f64>,
    pub sigma: Matrix3<f64>,
    pub n_samples: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WaypointRepr {
    t: usize,
    mu: [f64; 3],
    sigma: [f64; 9],
    n_samples: usize,
}

impl From<WaypointGaussian> for WaypointRepr {
    fn from(w: WaypointGaussian) -> Self {
        let s = w.sigma.transpose(); // column-major storage of Σᵀ is row-major Σ
        let mut sigma = [0.0; 9];
        sigma.copy_from_slice(s.as_slice());
        WaypointRepr { t: w.t, mu: [w.mu.x, w.mu.y, w.mu.z], sigma, n_samples: w.n_samples }
    }
}

impl TryFrom<WaypointRepr> for WaypointGaussian {
    type Error = LiftingError;

    fn try_from(r: WaypointRepr) -> Result<Self, LiftingError> {
        let w = WaypointGaussian {
            t: r.t,
            mu: Vector3::from(r.mu),
            sigma: Matrix3::from_row_slice(&r.sigma),
            n_samples: r.n_samples,
        };
        w.validate()?;
        Ok(w)
    }
}

impl WaypointGaussian {
    pub fn validate(&self) -> Result<(), LiftingError> {
        if self.mu.iter().chain(self.sigma.iter()).any(|v| !v.is_finite()) {
            return Err(LiftingError::Validation(format!("non-finite waypoint at t={}", self.t)));
        }
        if self.sigma != self.sigma.transpose() {
            return Err(LiftingError::Validation(format!("asymmetric covariance at t={}", self.t)));
        }
        let min_eig = SymmetricEigen::new(self.sigma).eigenvalues.min();
        if min_eig < -1e-12 {
            return Err(LiftingError::Validation(format!("covariance not PSD at t={} (eigenvalue {min_eig:e})", self.t)));
        }
        Ok(())
    }

    pub fn log_density(&self, x: &Vector3<f64>) -> Result<f64, LiftingError> {
        let chol = Cholesky::new(self.sigma).ok_or(LiftingError::SingularCovariance { t: self.t })?;
        let d = x - self.mu;
        let sol = chol.solve(&d);
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + log_det + d.dot(&sol)))
    }

    /// `L` with `L Lᵀ = Σ`, from the symmetric eigendecomposition so that
    /// singular covariances are allowed.
    fn sqrt_factor(&self) -> Matrix3<f64> {
        let eig = SymmetricEigen::new(self.sigma);
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        eig.eigenvectors * Matrix3::from_diagonal(&sqrt)
    }
}

/// Sample mean and population (divide-by-n) covariance.
pub fn fit_waypoint_gaussian(samples: &[Vector3<f64>], t: usize) -> Result<WaypointGaussian, LiftingError> {
    if samples.is_empty() {
        return Err(LiftingError::EmptyRegion { t, delta: f64::NAN });
    }
    let n = samples.len() as f64;
    let mu = samples.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let mut sigma = Matrix3::zeros();
    for p in samples {
        let d = p - mu;
        sigma += d * d.transpose();
    }
    sigma /= n;
    // exact symmetry regardless of summation order
    let sigma = (sigma + sigma.transpose()) * 0.5;
    Ok(WaypointGaussian { t, mu, sigma, n_samples: samples.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DistributionRepr", try_from = "DistributionRepr")]
pub struct TrajectoryDistribution {
    pub waypoints: Vec<WaypointGaussian>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionRepr {
    horizon: usize,
    waypoints: Vec<WaypointGaussian>,
}

impl From<TrajectoryDistribution> for DistributionRepr {
    fn from(d: TrajectoryDistribution) -> Self {
        DistributionRepr { horizon: d.waypoints.len(), waypoints: d.waypoints }
    }
}

impl TryFrom<DistributionRepr> for TrajectoryDistribution {
    type Error = LiftingError;

    fn try_from(r: DistributionRepr) -> Result<Self, LiftingError> {
        if r.horizon != r.waypoints.len() {
            return Err(LiftingError::Validation(format!(
                "horizon {} but {} waypoints",
                r.horizon,
                r.waypoints.len()
            )));
        }
        TrajectoryDistribution::new(r.waypoints)
    }
}

impl TrajectoryDistribution {
    pub fn new(waypoints: Vec<WaypointGaussian>) -> Result<Self, LiftingError> {
        let d = TrajectoryDistribution { waypoints };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), LiftingError> {
        for (i, w) in self.waypoints.iter().enumerate() {
            if w.t != i + 1 {
                return Err(LiftingError::Validation(format!("timesteps must be 1..=H, found {} at position {}", w.t, i)));
            }
            w.validate()?;
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.waypoints.len()
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("distribution serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, LiftingError> {
        serde_json::from_slice(bytes).map_err(|e| LiftingError::Validation(format!("distribution JSON: {e}")))
    }
}

pub fn mean_trajectory(dist: &TrajectoryDistribution) -> Vec<Vector3<f64>> {
    dist.waypoints.iter().map(|w| w.mu).collect()
}

/// Draws `x_t ~ N(μ_t, Σ_t)` independently per timestep.
pub fn sample_trajectory<R: Rng + ?Sized>(dist: &TrajectoryDistribution, rng: &mut R) -> Vec<Vector3<f64>> {
    dist.waypoints
        .iter()
        .map(|w| {
            let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            w.mu + w.sqrt_factor() * z
        })
        .collect()
}

/// `Σ_t log N(x_t | μ_t, Σ_t)`.
pub fn log_density(dist: &TrajectoryDistribution, traj: &[Vector3<f64>]) -> Result<f64, LiftingError> {
    if traj.len() != dist.horizon() {
        return Err(LiftingError::Validation(format!(
            "trajectory has {} points, distribution horizon is {}",
            traj.len(),
            dist.horizon()
        )));
    }
    dist.waypoints.iter().zip(traj).map(|(w, x)| w.log_density(x)).sum()
}

/// Timestep whose `delta` had to be widened to find a nonempty intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Widened {
    pub t: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftReport {
    pub distribution: TrajectoryDistribution,
    pub widened: Vec<Widened>,
}

/// Independent RNG stream per (seed, timestep, view), so timesteps can be
/// lifted in any order with identical results.
pub fn timestep_rng(seed: u64, t: usize, view: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((t as u64) << 1) | (view as u64 & 1));
    rng
}

pub fn lift_trajectory_pair(
    xi_1: &PixelTrajectory,
    xi_2: &PixelTrajectory,
    views: (&CameraView, &CameraView),
    config: &LiftingConfig,
) -> Result<TrajectoryDistribution, LiftingError> {
    lift_with_report(xi_1, xi_2, views, config).map(|r| r.distribution)
}

pub fn lift_with_report(
    xi_1: &PixelTrajectory,
    xi_2: &PixelTrajectory,
    views: (&CameraView, &CameraView),
    config: &LiftingConfig,
) -> Result<LiftReport, LiftingError> {
    config.validate()?;
    xi_1.validate()?;
    xi_2.validate()?;
    if xi_1.horizon() != xi_2.horizon() {
        return Err(LiftingError::Validation(format!(
            "trajectory lengths differ: {} vs {}",
            xi_1.horizon(),
            xi_2.horizon()
        )));
    }
    if xi_1.view_id != views.0.id || xi_2.view_id != views.1.id {
        return Err(LiftingError::Validation(format!(
            "trajectory views ({}, {}) do not match cameras ({}, {})",
            xi_1.view_id, xi_2.view_id, views.0.id, views.1.id
        )));
    }
    views.0.validate()?;
    views.1.validate()?;

    let steps: Vec<Result<(WaypointGaussian, Option<Widened>), LiftingError>> = (1..=xi_1.horizon())
        .into_par_iter()
        .map(|t| {
            let r1 = cast_density_region(views.0, &pixel_density_at(xi_1, t)?, config, &mut timestep_rng(config.rng_seed, t, 0))?;
            let r2 = cast_density_region(views.1, &pixel_density_at(xi_2, t)?, config, &mut timestep_rng(config.rng_seed, t, 1))?;
            let mut delta = config.delta;
            let mut widenings = 0;
            loop {
                let kept = intersect_regions(&r1, &r2, delta);
                if !kept.is_empty() {
                    let w = fit_waypoint_gaussian(&kept, t)?;
                    let widened = (widenings > 0).then_some(Widened { t, delta });
                    return Ok((w, widened));
                }
                if !config.auto_widen || widenings == MAX_WIDENINGS {
                    return Err(LiftingError::EmptyRegion { t, delta });
                }
                widenings += 1;
                delta *= 2.0;
                tracing::warn!(t, delta, "empty intersection, widening delta");
            }
        })
        .collect();

    let mut waypoints = Vec::with_capacity(steps.len());
    let mut widened = Vec::new();
    for s in steps {
        let (w, wd) = s?;
        waypoints.push(w);
        widened.extend(wd);
    }
    Ok(LiftReport { distribution: TrajectoryDistribution::new(waypoints)?, widened })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_point, CameraIntrinsics, CameraPose};
    use approx::assert_relative_eq;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 50.0, cy: 50.0, width: 100, height: 100 }
    }

    /// Two cameras 1 m from (0, 0, 1) with a 90° baseline.
    fn fixture_a() -> (CameraView, CameraView) {
        let a = CameraView { id: "view_1".into(), intrinsics: intrinsics(), pose: CameraPose::identity() };
        let b = CameraView {
            id: "view_2".into(),
            intrinsics: intrinsics(),
            pose: CameraPose::look_at(Vector3::new(1.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 1.0, 0.0))
                .unwrap(),
        };
        (a, b)
    }

    fn v2(x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(x, y)
    }

    #[test]
    fn resample_segment() {
        let out = resample_equal_length(&[v2(0.0, 0.0), v2(10.0, 0.0)], 11).unwrap();
        for (i, p) in out.iter().enumerate() {
            assert_relative_eq!(*p, v2(i as f64, 0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn resample_identity_on_uniform_input() {
        let input: Vec<_> = (0..6).map(|i| v2(3.0 * i as f64, 1.0)).collect();
        assert_eq!(resample_equal_length(&input, 6).unwrap(), input);
    }

    /// Independent arc-length parameterization: walk the polyline in tiny
    /// steps and record where the accumulated length crosses each target.
    fn arc_length_oracle(poly: &[Vector2<f64>], targets: &[f64]) -> Vec<Vector2<f64>> {
        let mut out = Vec::new();
        for &s in targets {
            let mut acc = 0.0;
            let mut found = *poly.last().unwrap();
            'outer: for w in poly.windows(2) {
                let n = 100_000;
                for k in 0..n {
                    let a = w[0] + (w[1] - w[0]) * (k as f64 / n as f64);
                    let b = w[0] + (w[1] - w[0]) * ((k + 1) as f64 / n as f64);
                    let step = (b - a).norm();
                    if acc + step >= s - 1e-12 {
                        found = a + (b - a) * ((s - acc) / step).clamp(0.0, 1.0);
                        break 'outer;
                    }
                    acc += step;
                }
            }
            out.push(found);
        }
        out
    }

    #[test]
    fn resample_l_shape_matches_oracle() {
        let poly = [v2(0.0, 0.0), v2(4.0, 0.0), v2(4.0, 4.0)];
        let out = resample_equal_length(&poly, 5).unwrap();
        let oracle = arc_length_oracle(&poly, &[0.0, 2.0, 4.0, 6.0, 8.0]);
        for (a, b) in out.iter().zip(&oracle) {
            assert_relative_eq!(*a, *b, epsilon = 1e-6);
        }
        assert_eq!(out[0], poly[0]);
        assert_eq!(out[4], poly[2]);
    }

    #[test]
    fn resample_rejects_zero_length() {
        assert!(resample_equal_length(&[v2(1.0, 1.0), v2(1.0, 1.0)], 4).is_err());
    }

    #[test]
    fn pixel_density_cases() {
        let pts: Vec<_> = (0..5).map(|i| v2(10.0 * i as f64, 60.0)).collect();
        let mut pts = pts;
        pts[2] = v2(40.0, 60.0);
        let traj = PixelTrajectory::new("v", pts, Matrix2::identity() * 4.0).unwrap();
        let g = pixel_density_at(&traj, 3).unwrap();
        assert_eq!(g.mean, v2(40.0, 60.0));
        assert_eq!(g.cov, Matrix2::identity() * 4.0);
        assert!(matches!(pixel_density_at(&traj, 6), Err(LiftingError::IndexOutOfRange { t: 6, horizon: 5 })));
        assert!(pixel_density_at(&traj, 0).is_err());
        // 1 / (2π σ²) with σ² = 4
        assert_relative_eq!(g.density(&g.mean), 1.0 / (8.0 * std::f64::consts::PI), epsilon = 1e-15);
    }

    #[test]
    fn collapsed_density_stays_on_mean_ray() {
        let (view, _) = fixture_a();
        let cfg = LiftingConfig { epsilon_sigma: 1e-9, ..Default::default() };
        let g = PixelGaussian { mean: v2(62.0, 41.0), cov: Matrix2::identity() * 2.0 };
        let region = cast_density_region(&view, &g, &cfg, &mut timestep_rng(3, 1, 0)).unwrap();
        assert_eq!(region.len(), cfg.samples_per_view * cfg.depth_samples);
        let axis = pixel_to_ray(&view, &g.mean).unwrap();
        for p in region.points() {
            let along = (p - axis.origin).dot(axis.direction());
            let lateral = (p - axis.point_at(along)).norm();
            // scaled to d = 1
            assert!(lateral / along <= 1e-6);
            assert!(along >= cfg.d_near - 1e-12 && along <= cfg.d_far + 1e-12);
        }
    }

    #[test]
    fn collapsed_density_at_fixed_depth() {
        let (view, _) = fixture_a();
        let cfg = LiftingConfig { epsilon_sigma: 1e-9, d_near: 1.0, d_far: 1.0, ..Default::default() };
        let g = PixelGaussian { mean: v2(50.0, 50.0), cov: Matrix2::identity() * 2.0 };
        let region = cast_density_region(&view, &g, &cfg, &mut timestep_rng(0, 1, 0)).unwrap();
        for p in region.points() {
            assert_relative_eq!(p, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-9);
        }
    }

    /// Rejection-sampling reference for the truncated Gaussian reprojection
    /// statistics.
    #[test]
    fn reprojected_samples_follow_truncated_gaussian() {
        let (view, _) = fixture_a();
        let cfg = LiftingConfig { samples_per_view: 10_000, depth_samples: 1, ..Default::default() };
        let cov = Matrix2::new(4.0, 1.0, 1.0, 3.0);
        let g = PixelGaussian { mean: v2(48.0, 55.0), cov };
        let region = cast_density_region(&view, &g, &cfg, &mut timestep_rng(11, 1, 0)).unwrap();
        let px: Vec<Vector2<f64>> = region.points().map(|p| project_point(&view, &p).unwrap()).collect();
        for p in &px {
            assert!(g.mahalanobis(p) <= cfg.epsilon_sigma + 1e-9);
        }
        let (mean, cov_emp) = moments2(&px);

        // reference: draw N(0, I) by Box-Muller, keep ‖z‖ ≤ 3, map through L
        let l = Cholesky::new(cov).unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut reference = Vec::new();
        while reference.len() < 200_000 {
            let z = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal));
            if z.norm() <= cfg.epsilon_sigma {
                reference.push(g.mean + l * z);
            }
        }
        let (_, cov_ref) = moments2(&reference);
        assert!((mean - g.mean).norm() <= 0.1, "mean {mean}");
        for i in 0..2 {
            for j in 0..2 {
                let scale = (cov_ref[(i, i)] * cov_ref[(j, j)]).sqrt();
                assert!((cov_emp[(i, j)] - cov_ref[(i, j)]).abs() <= 0.1 * scale, "cov {cov_emp} vs {cov_ref}");
            }
        }
    }

    fn moments2(px: &[Vector2<f64>]) -> (Vector2<f64>, Matrix2<f64>) {
        let n = px.len() as f64;
        let mean = px.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
        let cov = px.iter().fold(Matrix2::zeros(), |a, p| a + (p - mean) * (p - mean).transpose()) / n;
        (mean, cov)
    }

    fn single(point: Vector3<f64>, ray: Ray) -> DensityRegion {
        DensityRegion::new(vec![ray], vec![RaySample { point, ray: 0 }]).unwrap()
    }

    #[test]
    fn intersect_coincident_and_separated() {
        let (a, b) = fixture_a();
        let p = Vector3::new(0.0, 0.0, 1.0);
        let ra = pixel_to_ray(&a, &project_point(&a, &p).unwrap()).unwrap();
        let rb = pixel_to_ray(&b, &project_point(&b, &p).unwrap()).unwrap();
        let kept = intersect_regions(&single(p, ra), &single(p, rb), 0.3);
        assert_eq!(kept.len(), 1);
        assert_relative_eq!(kept[0], p, epsilon = 1e-12);

        let q = Vector3::new(0.0, 0.0, 2.0);
        assert!(intersect_regions(&single(p, ra), &single(q, ra), 0.5).is_empty());
    }

    #[test]
    fn grid_matches_brute_force() {
        let (a, b) = fixture_a();
        let cfg = LiftingConfig { samples_per_view: 16, depth_samples: 32, ..Default::default() };
        let ga = PixelGaussian { mean: v2(55.0, 48.0), cov: Matrix2::identity() * 2.0 };
        let gb = PixelGaussian { mean: v2(50.0, 48.0), cov: Matrix2::identity() * 2.0 };
        let r1 = cast_density_region(&a, &ga, &cfg, &mut timestep_rng(1, 1, 0)).unwrap();
        let r2 = cast_density_region(&b, &gb, &cfg, &mut timestep_rng(1, 1, 1)).unwrap();
        let delta = 0.02;
        let mut brute = Vec::new();
        for s1 in &r1.samples {
            for s2 in &r2.samples {
                if (s1.point - s2.point).norm() <= delta {
                    brute.push(ray_ray_closest_points(&r1.rays[s1.ray], &r2.rays[s2.ray]).unwrap().midpoint());
                }
            }
        }
        assert!(!brute.is_empty());
        assert_eq!(intersect_regions(&r1, &r2, delta), brute);
    }

    #[test]
    fn cloud_intersection_mean_near_triangulation() {
        let (a, b) = fixture_a();
        let truth = Vector3::new(0.05, -0.02, 1.03);
        let cfg = LiftingConfig { samples_per_view: 10, depth_samples: 10, d_near: 0.9, d_far: 1.2, ..Default::default() };
        let pa = project_point(&a, &truth).unwrap();
        let pb = project_point(&b, &truth).unwrap();
        let g = |m| PixelGaussian { mean: m, cov: Matrix2::identity() * 2.0 };
        let r1 = cast_density_region(&a, &g(pa), &cfg, &mut timestep_rng(5, 1, 0)).unwrap();
        let r2 = cast_density_region(&b, &g(pb), &cfg, &mut timestep_rng(5, 1, 1)).unwrap();
        assert_eq!(r1.len(), 100);
        let kept = intersect_regions(&r1, &r2, 0.05);
        assert!(!kept.is_empty());
        let oracle = ray_ray_closest_points(&pixel_to_ray(&a, &pa).unwrap(), &pixel_to_ray(&b, &pb).unwrap())
            .unwrap()
            .midpoint();
        let fit = fit_waypoint_gaussian(&kept, 1).unwrap();
        for i in 0..3 {
            let se = (fit.sigma[(i, i)] / kept.len() as f64).sqrt();
            // pairs share rays, so the effective count is the ray count
            let se_rays = (fit.sigma[(i, i)] / 10.0).sqrt();
            assert!((fit.mu[i] - oracle[i]).abs() <= 2.0 * se.max(se_rays) + 1e-9, "axis {i}: {} vs {}", fit.mu[i], oracle[i]);
        }
    }

    #[test]
    fn fit_cases() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let w = fit_waypoint_gaussian(&[p, p, p], 4).unwrap();
        assert_eq!(w.mu, p);
        assert_eq!(w.sigma, Matrix3::zeros());
        assert_eq!(w.n_samples, 3);

        let w = fit_waypoint_gaussian(&[Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)], 1).unwrap();
        assert_eq!(w.mu, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(w.sigma, Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 0.0)));

        let w = fit_waypoint_gaussian(&[p], 1).unwrap();
        assert_eq!((w.mu, w.sigma), (p, Matrix3::zeros()));
        assert!(matches!(fit_waypoint_gaussian(&[], 2), Err(LiftingError::EmptyRegion { t: 2, .. })));
    }

    fn project_traj(view: &CameraView, pts: &[Vector3<f64>], var: f64) -> PixelTrajectory {
        let px = pts.iter().map(|p| project_point(view, p).unwrap()).collect();
        PixelTrajectory::new(view.id.clone(), px, Matrix2::identity() * var).unwrap()
    }

    #[test]
    fn degenerate_lift_is_exact_triangulation() {
        let (a, b) = fixture_a();
        let pts = [Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.1, 0.0, 1.0)];
        let cfg = LiftingConfig { epsilon_sigma: 1e-9, ..Default::default() };
        let dist = lift_trajectory_pair(&project_traj(&a, &pts, 2.0), &project_traj(&b, &pts, 2.0), (&a, &b), &cfg).unwrap();
        for (w, p) in dist.waypoints.iter().zip(&pts) {
            assert!((w.mu - p).norm() <= 1e-4);
        }
        assert_eq!(mean_trajectory(&dist), dist.waypoints.iter().map(|w| w.mu).collect::<Vec<_>>());
    }

    #[test]
    fn one_pixel_lift_tolerances() {
        let (a, b) = fixture_a();
        let pts = [Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.1, 0.0, 1.0)];
        let cfg = LiftingConfig { rng_seed: 7, ..Default::default() };
        let dist = lift_trajectory_pair(&project_traj(&a, &pts, 1.0), &project_traj(&b, &pts, 1.0), (&a, &b), &cfg).unwrap();
        for (w, p) in dist.waypoints.iter().zip(&pts) {
            assert!((w.mu - p).norm() <= 5e-3, "mu {} vs {p}", w.mu);
            assert!(w.sigma.trace() < 0.02 * 0.02, "trace {}", w.sigma.trace());
        }
    }

    #[test]
    fn lift_validation_errors() {
        let (a, b) = fixture_a();
        let p3: Vec<_> = (0..3).map(|i| Vector3::new(0.01 * i as f64, 0.0, 1.0)).collect();
        let p4: Vec<_> = (0..4).map(|i| Vector3::new(0.01 * i as f64, 0.0, 1.0)).collect();
        let cfg = LiftingConfig::default();
        let e = lift_trajectory_pair(&project_traj(&a, &p3, 2.0), &project_traj(&b, &p4, 2.0), (&a, &b), &cfg);
        assert!(matches!(e, Err(LiftingError::Validation(_))));
        let e = lift_trajectory_pair(&project_traj(&b, &p3, 2.0), &project_traj(&a, &p3, 2.0), (&a, &b), &cfg);
        assert!(matches!(e, Err(LiftingError::Validation(_))));
    }

    #[test]
    fn empty_region_and_widening() {
        let (a, b) = fixture_a();
        // inconsistent pixels: view 2 sees a point 10 cm above the view-1 ray
        let pa = vec![v2(50.0, 50.0), v2(50.0, 50.0)];
        let pb = vec![v2(50.0, 40.0), v2(50.0, 50.0)];
        let xa = PixelTrajectory::new("view_1", pa, Matrix2::identity() * 0.01).unwrap();
        let xb = PixelTrajectory::new("view_2", pb, Matrix2::identity() * 0.01).unwrap();
        let cfg = LiftingConfig { epsilon_sigma: 1.0, ..Default::default() };
        assert!(matches!(lift_trajectory_pair(&xa, &xb, (&a, &b), &cfg), Err(LiftingError::EmptyRegion { t: 1, .. })));
        let cfg = LiftingConfig { auto_widen: true, delta: 0.02, epsilon_sigma: 1.0, ..Default::default() };
        let r = lift_with_report(&xa, &xb, (&a, &b), &cfg).unwrap();
        assert_eq!(r.widened.len(), 1);
        assert_eq!(r.widened[0].t, 1);
        assert!(r.widened[0].delta > 0.02);
    }

    #[test]
    fn lifting_is_deterministic() {
        let (a, b) = fixture_a();
        let pts: Vec<_> = (0..6).map(|i| Vector3::new(-0.1 + 0.04 * i as f64, 0.02, 1.0)).collect();
        let cfg = LiftingConfig { rng_seed: 42, ..Default::default() };
        let x1 = project_traj(&a, &pts, 2.0);
        let x2 = project_traj(&b, &pts, 2.0);
        let d1 = lift_trajectory_pair(&x1, &x2, (&a, &b), &cfg).unwrap();
        let d2 = lift_trajectory_pair(&x1, &x2, (&a, &b), &cfg).unwrap();
        assert_eq!(d1, d2);
    }

    fn dist_with(sigmas: &[Matrix3<f64>]) -> TrajectoryDistribution {
        TrajectoryDistribution::new(
            sigmas
                .iter()
                .enumerate()
                .map(|(i, s)| WaypointGaussian { t: i + 1, mu: Vector3::new(i as f64, 1.0, -0.5), sigma: *s, n_samples: 1 })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mean_trajectory_cases() {
        let d = TrajectoryDistribution::new(vec![
            WaypointGaussian { t: 1, mu: Vector3::zeros(), sigma: Matrix3::zeros(), n_samples: 1 },
            WaypointGaussian { t: 2, mu: Vector3::new(1.0, 1.0, 1.0), sigma: Matrix3::zeros(), n_samples: 1 },
        ])
        .unwrap();
        assert_eq!(mean_trajectory(&d), vec![Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0)]);
        let one = dist_with(&[Matrix3::identity()]);
        assert_eq!(mean_trajectory(&one).len(), 1);
    }

    #[test]
    fn zero_covariance_sample_is_mean() {
        let d = dist_with(&[Matrix3::zeros(); 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_trajectory(&d, &mut rng), mean_trajectory(&d));
    }

    #[test]
    fn sample_moments() {
        let d = dist_with(&[Matrix3::identity() * 1e-4]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let xs: Vec<_> = (0..n).map(|_| sample_trajectory(&d, &mut rng)[0]).collect();
        let fit = fit_waypoint_gaussian(&xs, 1).unwrap();
        let sigma = 1e-2;
        for i in 0..3 {
            assert!((fit.mu[i] - d.waypoints[0].mu[i]).abs() <= 3.0 * sigma / (n as f64).sqrt());
            assert!((fit.sigma[(i, i)] - 1e-4).abs() <= 1e-5);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_trajectory(&d, &mut r1), sample_trajectory(&d, &mut r2));
    }

    #[test]
    fn log_density_at_mean_with_unit_covariance() {
        let h = 4;
        let d = dist_with(&vec![Matrix3::identity(); h]);
        let ld = log_density(&d, &mean_trajectory(&d)).unwrap();
        assert_relative_eq!(ld, -(h as f64) * 1.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn log_density_singular_and_mode() {
        let d = dist_with(&[Matrix3::identity(), Matrix3::zeros()]);
        assert!(matches!(log_density(&d, &mean_trajectory(&d)), Err(LiftingError::SingularCovariance { t: 2 })));
        let s = Matrix3::new(2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5);
        let d = dist_with(&[s, s, s]);
        let best = log_density(&d, &mean_trajectory(&d)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let other = sample_trajectory(&d, &mut rng);
            assert!(log_density(&d, &other).unwrap() <= best);
        }
    }

    #[test]
    fn distribution_json_round_trip() {
        let s = Matrix3::new(2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5);
        let d = dist_with(&[s, Matrix3::zeros()]);
        let back = TrajectoryDistribution::from_json(&d.to_json()).unwrap();
        assert_eq!(back, d);
        let v: serde_json::Value = serde_json::from_slice(&d.to_json()).unwrap();
        assert_eq!(v["horizon"], 2);
        assert_eq!(v["waypoints"][0]["sigma"][1], 0.3);
        assert_eq!(v["waypoints"][0]["sigma"][5], 0.1);
    }

    #[test]
    fn pixel_trajectory_json() {
        let json = r#"{"view_id":"view_1","sigma":[2,0,0,2],"points":[[1,2],[3,4]]}"#;
        let t: PixelTrajectory = serde_json::from_str(json).unwrap();
        assert_eq!(t.points[1], v2(3.0, 4.0));
        let bad = r#"{"view_id":"view_1","sigma":[2,0,0,-2],"points":[[1,2],[3,4]]}"#;
        assert!(serde_json::from_str::<PixelTrajectory>(bad).is_err());
    }
}
