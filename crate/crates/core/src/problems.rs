//! Input generators for the five experiment families, exact/reference
//! solutions, error metrics, physical diagnostics, and ensemble statistics.
//!
//! Every generator is a pure function of (spec, seed): sample s draws from
//! its own SplitMix64 stream, so regeneration is bit-identical and batch
//! generation parallelizes without shared state.

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;

use crate::basis::{BasisTables, SpectralField};
use crate::nse_solver::{Lifting, Mesh, TimeField};
use crate::rng::SplitMix64;

/// Experiment family of a generated batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFamily {
    Forcing2D,
    Initial2D,
    Boundary2D,
    Initial3DBeltrami,
    Forcing3D,
    PerturbedForcing2D,
}

/// Batch description: family, coefficient distribution, and seed.
#[derive(Debug, Clone)]
pub struct RandomInputSpec {
    pub family: InputFamily,
    /// Standard deviation of the coefficient distribution.
    pub sigma: f64,
    /// Mean of the coefficient distribution (0, or 60 for Beltrami).
    pub mean: f64,
    pub seed: u64,
    pub count: usize,
    /// Beltrami resampling rule: keep only |C| >= 60.
    pub truncate: bool,
}

impl RandomInputSpec {
    pub fn new(family: InputFamily, sigma: f64, seed: u64, count: usize) -> Self {
        let (mean, truncate) = match family {
            InputFamily::Initial3DBeltrami => (60.0, true),
            _ => (0.0, false),
        };
        assert!(sigma > 0.0, "sigma must be positive");
        Self { family, sigma, mean, seed, count, truncate }
    }

    fn stream(&self, sample: usize) -> SplitMix64 {
        SplitMix64::stream(self.seed, sample as u64)
    }
}

/// A finite sum Re[ amplitude * T(t) * sum_k c_k e^{i k . x} ] with complex
/// coefficients; derivatives stay in the family (multiply by i k_axis).
#[derive(Debug, Clone)]
pub struct TrigSum {
    pub amplitude: f64,
    /// Multiply by sin(t) when set; otherwise time-independent.
    pub sin_t: bool,
    /// (wave vector, coefficient) pairs in draw order.
    pub terms: Vec<(Vec<i64>, Complex64)>,
}

impl TrigSum {
    /// Draws coefficients c = a + i b with a, b ~ Normal(mean, sigma^2) for
    /// every wave vector in `waves`, in order.
    fn draw(
        rng: &mut SplitMix64,
        waves: &[Vec<i64>],
        sigma: f64,
        amplitude: f64,
        sin_t: bool,
    ) -> Self {
        let terms = waves
            .iter()
            .map(|k| {
                let a = rng.normal_with(0.0, sigma);
                let b = rng.normal_with(0.0, sigma);
                (k.clone(), Complex64::new(a, b))
            })
            .collect();
        Self { amplitude, sin_t, terms }
    }

    pub fn eval_at(&self, t: f64, x: &[f64]) -> f64 {
        let time = if self.sin_t { t.sin() } else { 1.0 };
        let mut acc = 0.0;
        for (k, c) in &self.terms {
            let theta: f64 = k.iter().zip(x).map(|(&ki, &xi)| ki as f64 * xi).sum();
            acc += c.re * theta.cos() - c.im * theta.sin();
        }
        self.amplitude * time * acc
    }

    /// Partial derivative along `axis` (multiplies coefficients by i k).
    pub fn partial(&self, axis: usize) -> TrigSum {
        let terms = self
            .terms
            .iter()
            .map(|(k, c)| (k.clone(), c * Complex64::new(0.0, k[axis] as f64)))
            .collect();
        Self { amplitude: self.amplitude, sin_t: self.sin_t, terms }
    }

    pub fn eval_mesh(&self, t: f64, mesh: &Mesh) -> ArrayD<f64> {
        let mut out = mesh.zeros();
        let d = mesh.points.len();
        let mut x = vec![0.0; d];
        for (idx, v) in out.indexed_iter_mut() {
            for ax in 0..d {
                x[ax] = mesh.points[ax][&idx];
            }
            *v = self.eval_at(t, &x);
        }
        out
    }
}

fn waves_2d(max_k: i64) -> Vec<Vec<i64>> {
    let mut w = Vec::new();
    for kx in 0..=max_k {
        for ky in 0..=max_k {
            w.push(vec![kx, ky]);
        }
    }
    w
}

fn waves_3d(max_k: i64) -> Vec<Vec<i64>> {
    let mut w = Vec::new();
    for kx in 0..=max_k {
        for ky in 0..=max_k {
            for kz in 0..=max_k {
                w.push(vec![kx, ky, kz]);
            }
        }
    }
    w
}

/// One forcing sample: a trig sum per velocity component, plus an optional
/// clean base field (the perturbed-forcing family).
pub struct ForcingSample {
    pub components: Vec<TrigSum>,
    pub clean: Option<CleanForcing2D>,
}

impl TimeField for ForcingSample {
    fn components(&self) -> usize {
        self.components.len()
    }
    fn eval(&self, t: f64, mesh: &Mesh) -> Vec<ArrayD<f64>> {
        let mut out: Vec<ArrayD<f64>> =
            self.components.iter().map(|c| c.eval_mesh(t, mesh)).collect();
        if let Some(clean) = &self.clean {
            let base = clean.eval(t, mesh);
            for (o, b) in out.iter_mut().zip(base) {
                *o += &b;
            }
        }
        out
    }
}

/// The fixed clean forcing of the perturbed-forcing family.
pub struct CleanForcing2D;

impl TimeField for CleanForcing2D {
    fn components(&self) -> usize {
        2
    }
    fn eval(&self, t: f64, mesh: &Mesh) -> Vec<ArrayD<f64>> {
        let s = 1.5 * t.sin();
        let x = &mesh.points[0];
        let y = &mesh.points[1];
        let fx = ndarray::Zip::from(x)
            .and(y)
            .map_collect(|&a, &b| s * (1.0 + b.cos() - a.sin() - (a + b).sin()))
            .into_dyn();
        let fy = ndarray::Zip::from(x)
            .and(y)
            .map_collect(|&a, &b| s * (1.0 + b.sin() - a.cos() - (a + b).cos()))
            .into_dyn();
        vec![fx, fy]
    }
}

/// Random time-modulated 2D forcing pairs:
/// (1/12) sin(t) sum_{kx,ky=0..2} c e^{i(kx x + ky y)} per component.
pub fn gen_forcing_2d(spec: &RandomInputSpec) -> Vec<ForcingSample> {
    assert_eq!(spec.family, InputFamily::Forcing2D);
    (0..spec.count)
        .map(|s| {
            let mut rng = spec.stream(s);
            let fx = TrigSum::draw(&mut rng, &waves_2d(2), spec.sigma, 1.0 / 12.0, true);
            let fy = TrigSum::draw(&mut rng, &waves_2d(2), spec.sigma, 1.0 / 12.0, true);
            ForcingSample { components: vec![fx, fy], clean: None }
        })
        .collect()
}

/// Perturbations around the fixed clean forcing, amplitude (1/24) sin(t).
pub fn gen_perturbed_forcing(spec: &RandomInputSpec) -> Vec<ForcingSample> {
    assert_eq!(spec.family, InputFamily::PerturbedForcing2D);
    (0..spec.count)
        .map(|s| {
            let mut rng = spec.stream(s);
            let ex = TrigSum::draw(&mut rng, &waves_2d(2), spec.sigma, 1.0 / 24.0, true);
            let ey = TrigSum::draw(&mut rng, &waves_2d(2), spec.sigma, 1.0 / 24.0, true);
            ForcingSample { components: vec![ex, ey], clean: Some(CleanForcing2D) }
        })
        .collect()
}

/// Random 3D forcing triples: (1/2) sin(t) sum_{k=0..2}^3 c e^{i k.x}.
pub fn gen_forcing_3d(spec: &RandomInputSpec) -> Vec<ForcingSample> {
    assert_eq!(spec.family, InputFamily::Forcing3D);
    (0..spec.count)
        .map(|s| {
            let mut rng = spec.stream(s);
            let comps = (0..3)
                .map(|_| TrigSum::draw(&mut rng, &waves_3d(2), spec.sigma, 0.5, true))
                .collect();
            ForcingSample { components: comps, clean: None }
        })
        .collect()
}

/// Divergence-free initial condition from a random stream function:
/// (u0, v0) = (-dPsi/dy, dPsi/dx). The source's sin(t) factor would zero
/// the field at t = 0, so the coefficient field is taken at unit phase;
/// `metadata()` records the choice.
pub struct InitialSample2D {
    pub psi: TrigSum,
}

impl InitialSample2D {
    pub fn metadata() -> &'static str {
        "stream-function initial data; sin(t) modulation dropped (unit phase)"
    }
}

impl TimeField for InitialSample2D {
    fn components(&self) -> usize {
        2
    }
    fn eval(&self, _t: f64, mesh: &Mesh) -> Vec<ArrayD<f64>> {
        let u = self.psi.partial(1);
        let v = self.psi.partial(0);
        let mut un = u.eval_mesh(0.0, mesh);
        un.mapv_inplace(|x| -x);
        vec![un, v.eval_mesh(0.0, mesh)]
    }
}

/// Random 2D initial conditions, stream-function amplitude 1/240.
pub fn gen_initial_2d(spec: &RandomInputSpec) -> Vec<InitialSample2D> {
    assert_eq!(spec.family, InputFamily::Initial2D);
    (0..spec.count)
        .map(|s| {
            let mut rng = spec.stream(s);
            let psi = TrigSum::draw(&mut rng, &waves_2d(2), spec.sigma, 1.0 / 240.0, false);
            InitialSample2D { psi }
        })
        .collect()
}

/// One top-wall boundary sample: g(t, x) = 0.015 sin(t) sum_k c_k e^{i k x}.
pub struct BoundarySample2D {
    pub g: TrigSum,
    /// max |g| over the corners x = +-1 at unit sin(t) phase.
    pub corner_magnitude: f64,
}

impl BoundarySample2D {
    /// Builds the lifting closures used by the solver.
    pub fn lifting(&self) -> Lifting {
        let g = self.g.clone();
        let gx = self.g.partial(0);
        let gxx = gx.partial(0);
        Lifting {
            g: Box::new(move |t, x| g.eval_at(t, &[x])),
            g_x: Box::new(move |t, x| gx.eval_at(t, &[x])),
            g_xx: Box::new(move |t, x| gxx.eval_at(t, &[x])),
            corner_magnitude: self.corner_magnitude,
        }
    }
}

/// Random top-wall data for the 2D boundary family; corner values are
/// reported so incompatible samples are visible at generation time.
pub fn gen_boundary_2d(spec: &RandomInputSpec) -> Vec<BoundarySample2D> {
    assert_eq!(spec.family, InputFamily::Boundary2D);
    (0..spec.count)
        .map(|s| {
            let mut rng = spec.stream(s);
            let waves: Vec<Vec<i64>> = (0..=9).map(|k| vec![k]).collect();
            let g = TrigSum::draw(&mut rng, &waves, spec.sigma, 0.015, true);
            let mut probe = g.clone();
            probe.sin_t = false;
            let corner_magnitude =
                probe.eval_at(0.0, &[1.0]).abs().max(probe.eval_at(0.0, &[-1.0]).abs());
            BoundarySample2D { g, corner_magnitude }
        })
        .collect()
}

/// Parameters of one tri-periodic Beltrami flow.
#[derive(Debug, Clone)]
pub struct BeltramiParams {
    pub k: i64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub amplitude: f64,
    pub nu: f64,
    pub r: f64,
}

impl BeltramiParams {
    /// Derived constants a..f from (r, C4, C5).
    fn abcdef(&self) -> [f64; 6] {
        let s3 = 3.0f64.sqrt();
        let c1 = (s3 - self.r) * (s3 * self.r - 1.0);
        let c2 = (s3 + self.r) * (s3 * self.r + 1.0);
        let c3 = 3.0 * self.r * self.r - 1.0;
        [c1 * self.c4, c3 * self.c4, c2 * self.c5, c3 * self.c5, c3, self.r * c3]
    }

    fn decay(&self, t: f64) -> f64 {
        (-3.0 * self.nu * (self.k * self.k) as f64 * t).exp()
    }

    /// Velocity components at one point.
    pub fn velocity_at(&self, t: f64, x: f64, y: f64, z: f64) -> [f64; 3] {
        let [a, b, c, d, e, f] = self.abcdef();
        let k = self.k as f64;
        let dec = self.amplitude * self.decay(t);
        let trig = |p: f64| ((k * p).cos(), (k * p).sin());
        let (cx, sx) = trig(x);
        let (cy, sy) = trig(y);
        let (cz, sz) = trig(z);
        let u = (a * cx + b * sx) * (-c * sy + d * cy) * (e * cz + f * sz)
            - (-a * sz + b * cz) * (c * cx + d * sx) * (e * cy + f * sy);
        let v = (a * cy + b * sy) * (-c * sz + d * cz) * (e * cx + f * sx)
            - (-a * sx + b * cx) * (c * cy + d * sy) * (e * cz + f * sz);
        let w = (a * cz + b * sz) * (-c * sx + d * cx) * (e * cy + f * sy)
            - (-a * sy + b * cy) * (c * cz + d * sz) * (e * cx + f * sx);
        [dec * u, dec * v, dec * w]
    }

    /// Pressure p = p0 - |u|^2 / 2 with p0 = 0.
    pub fn pressure_at(&self, t: f64, x: f64, y: f64, z: f64) -> f64 {
        let [u, v, w] = self.velocity_at(t, x, y, z);
        -(u * u + v * v + w * w) / 2.0
    }

    pub fn velocity_mesh(&self, t: f64, mesh: &Mesh) -> Vec<ArrayD<f64>> {
        let mut out: Vec<ArrayD<f64>> = (0..3).map(|_| mesh.zeros()).collect();
        let shape = mesh.shape.clone();
        let mut tmp = ArrayD::from_elem(IxDyn(&shape), [0.0; 3]);
        for (idx, v) in tmp.indexed_iter_mut() {
            *v = self.velocity_at(
                t,
                mesh.points[0][&idx],
                mesh.points[1][&idx],
                mesh.points[2][&idx],
            );
        }
        for c in 0..3 {
            out[c].zip_mut_with(&tmp, |o, vals| *o = vals[c]);
        }
        out
    }

    pub fn pressure_mesh(&self, t: f64, mesh: &Mesh) -> ArrayD<f64> {
        let mut out = mesh.zeros();
        for (idx, v) in out.indexed_iter_mut() {
            *v = self.pressure_at(
                t,
                mesh.points[0][&idx],
                mesh.points[1][&idx],
                mesh.points[2][&idx],
            );
        }
        out
    }
}

/// Exact Beltrami trajectory as a time field (initial data and ground
/// truth).
pub struct BeltramiFlow(pub BeltramiParams);

impl TimeField for BeltramiFlow {
    fn components(&self) -> usize {
        3
    }
    fn eval(&self, t: f64, mesh: &Mesh) -> Vec<ArrayD<f64>> {
        self.0.velocity_mesh(t, mesh)
    }
}

/// Draws Beltrami parameter sets: k uniform in {1,2,3}; C4, C5, C6 from
/// Normal(mean, sigma^2) resampled until |C| >= 60 under the truncation
/// rule; A = 2e-6, nu = 0.1, r = 0.
pub fn gen_beltrami(spec: &RandomInputSpec) -> Vec<BeltramiParams> {
    assert_eq!(spec.family, InputFamily::Initial3DBeltrami);
    (0..spec.count)
        .map(|s| {
            let mut rng = spec.stream(s);
            let k = 1 + (rng.next_u64() % 3) as i64;
            let draw = |rng: &mut SplitMix64| loop {
                let v = rng.normal_with(spec.mean, spec.sigma);
                if !spec.truncate || v.abs() >= 60.0 {
                    break v;
                }
            };
            let c4 = draw(&mut rng);
            let c5 = draw(&mut rng);
            let c6 = draw(&mut rng);
            BeltramiParams { k, c4, c5, c6, amplitude: 2e-6, nu: 0.1, r: 0.0 }
        })
        .collect()
}

/// Tensor-product quadrature of nodal samples.
pub fn integrate_nodal(a: &ArrayD<f64>, tables: &[BasisTables]) -> f64 {
    let mut acc = 0.0;
    for (idx, v) in a.indexed_iter() {
        let mut w = 1.0;
        for (ax, t) in tables.iter().enumerate() {
            w *= t.quadrature.weights[idx[ax]];
        }
        acc += w * v;
    }
    acc
}

/// Domain volume covered by the tables.
pub fn domain_volume(tables: &[BasisTables]) -> f64 {
    tables
        .iter()
        .map(|t| {
            let (a, b) = t.spec.interval();
            b - a
        })
        .product()
}

/// One aligned trajectory sample used by the error metrics.
pub struct TrajectorySample {
    pub time: f64,
    pub velocity: Vec<ArrayD<f64>>,
    pub pressure_grad: Option<Vec<ArrayD<f64>>>,
}

/// Relative error curves and space-time scalars.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub times: Vec<f64>,
    /// rel_l2_x[c][i]: per-component curve over the sampled times.
    pub rel_l2_x: Vec<Vec<f64>>,
    /// Space-time scalar per component.
    pub rel_l2_tx: Vec<f64>,
    /// H1 (gradient) pressure curve/scalar, when gradients were provided.
    pub rel_h1_x_pressure: Option<Vec<f64>>,
    pub rel_h1_tx_pressure: Option<f64>,
}

impl ErrorReport {
    /// Mean of the per-component space-time errors.
    pub fn mean_rel_l2_tx(&self) -> f64 {
        self.rel_l2_tx.iter().sum::<f64>() / self.rel_l2_tx.len() as f64
    }

    /// Velocity-magnitude relative error at the sampled time closest to t.
    pub fn rel_l2_x_at(&self, t: f64) -> f64 {
        let i = self
            .times
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (*a - t).abs().total_cmp(&(*b - t).abs()))
            .map(|(i, _)| i)
            .unwrap();
        self.rel_l2_x.iter().map(|c| c[i]).sum::<f64>() / self.rel_l2_x.len() as f64
    }
}

/// Relative L2/H1 errors between aligned trajectories on one grid.
pub fn rel_errors(
    pred: &[TrajectorySample],
    reference: &[TrajectorySample],
    tables: &[BasisTables],
) -> ErrorReport {
    assert_eq!(pred.len(), reference.len(), "trajectory lengths differ");
    assert!(!pred.is_empty());
    let comps = pred[0].velocity.len();
    let mut times = Vec::with_capacity(pred.len());
    let mut rel_l2_x = vec![Vec::with_capacity(pred.len()); comps];
    let mut num_tx = vec![0.0; comps];
    let mut den_tx = vec![0.0; comps];
    let mut h1_curve = Vec::new();
    let mut h1_num = 0.0;
    let mut h1_den = 0.0;
    let mut any_h1 = false;
    for (p, r) in pred.iter().zip(reference) {
        assert!(
            (p.time - r.time).abs() <= 1e-12 * (1.0 + r.time.abs()),
            "time stamps differ: {} vs {}",
            p.time,
            r.time
        );
        times.push(r.time);
        for c in 0..comps {
            let mut diff = p.velocity[c].clone();
            diff -= &r.velocity[c];
            diff.mapv_inplace(|v| v * v);
            let num = integrate_nodal(&diff, tables);
            let den = integrate_nodal(&r.velocity[c].mapv(|v| v * v), tables);
            rel_l2_x[c].push(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() });
            num_tx[c] += num;
            den_tx[c] += den;
        }
        if let (Some(pg), Some(rg)) = (&p.pressure_grad, &r.pressure_grad) {
            any_h1 = true;
            let mut num = 0.0;
            let mut den = 0.0;
            for (pc, rc) in pg.iter().zip(rg) {
                let mut diff = pc.clone();
                diff -= rc;
                diff.mapv_inplace(|v| v * v);
                num += integrate_nodal(&diff, tables);
                den += integrate_nodal(&rc.mapv(|v| v * v), tables);
            }
            h1_curve.push(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() });
            h1_num += num;
            h1_den += den;
        }
    }
    let rel_l2_tx = num_tx
        .iter()
        .zip(&den_tx)
        .map(|(n, d)| if *d > 0.0 { (n / d).sqrt() } else { n.sqrt() })
        .collect();
    ErrorReport {
        times,
        rel_l2_x,
        rel_l2_tx,
        rel_h1_x_pressure: any_h1.then_some(h1_curve),
        rel_h1_tx_pressure: any_h1.then(|| {
            if h1_den > 0.0 {
                (h1_num / h1_den).sqrt()
            } else {
                h1_num.sqrt()
            }
        }),
    }
}

/// Domain-averaged kinetic energy (1/|O|) int |u|^2/2 and enstrophy
/// (1/|O|) int |curl u|^2/2 over a trajectory of spectral velocities.
pub fn energy_enstrophy(
    samples: &[(f64, &SpectralField)],
    tables: &[BasisTables],
) -> Vec<(f64, f64, f64)> {
    let vol = domain_volume(tables);
    samples
        .iter()
        .map(|(t, field)| {
            let d = field.dim();
            let nodal: Vec<ArrayD<f64>> = field
                .components
                .iter()
                .map(|c| crate::basis::synthesize_scalar_orders(c, tables, &vec![0u8; d]))
                .collect();
            let mut speed_sq = nodal[0].mapv(|v| v * v);
            for comp in nodal.iter().skip(1) {
                speed_sq.zip_mut_with(comp, |a, b| *a += b * b);
            }
            let energy = 0.5 * integrate_nodal(&speed_sq, tables) / vol;
            // Vorticity components via spectral derivatives.
            let deriv = |c: usize, ax: usize| {
                let mut orders = vec![0u8; d];
                orders[ax] = 1;
                crate::basis::synthesize_scalar_orders(&field.components[c], tables, &orders)
            };
            let mut vort_sq = ArrayD::zeros(IxDyn(&nodal[0].shape().to_vec()));
            if d == 2 {
                let mut w = deriv(1, 0);
                w -= &deriv(0, 1);
                vort_sq.zip_mut_with(&w, |a, b| *a += b * b);
            } else {
                let pairs = [(2, 1, 1, 2), (0, 2, 2, 0), (1, 0, 0, 1)];
                for (c1, a1, c2, a2) in pairs {
                    let mut w = deriv(c1, a1);
                    w -= &deriv(c2, a2);
                    vort_sq.zip_mut_with(&w, |a, b| *a += b * b);
                }
            }
            let enstrophy = 0.5 * integrate_nodal(&vort_sq, tables) / vol;
            (*t, energy, enstrophy)
        })
        .collect()
}

/// Ensemble statistics of a quantity of interest and the ensemble-mean
/// field convergence.
#[derive(Debug, Clone)]
pub struct EnsembleReport {
    /// Q = int u dx at the final time, one value per sample.
    pub q_values: Vec<f64>,
    /// Histograms over nested sample prefixes: (S, bin edges, counts).
    pub histograms: Vec<(usize, Vec<f64>, Vec<usize>)>,
    /// (S, || mean_S - mean_Smax ||_{L2_x}) pairs.
    pub convergence: Vec<(usize, f64)>,
    /// Least-squares log-log slope of the convergence pairs; None when the
    /// fit is degenerate (zero distances or fewer than two points).
    pub slope: Option<f64>,
    /// (S, sample skewness of Q over the first S samples).
    pub skewness: Vec<(usize, f64)>,
    /// (S, excess kurtosis of Q over the first S samples).
    pub kurtosis: Vec<(usize, f64)>,
}

pub fn sample_skewness(q: &[f64]) -> f64 {
    let n = q.len() as f64;
    let mean = q.iter().sum::<f64>() / n;
    let m2 = q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = q.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

pub fn sample_excess_kurtosis(q: &[f64]) -> f64 {
    let n = q.len() as f64;
    let mean = q.iter().sum::<f64>() / n;
    let m2 = q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = q.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    if m2 <= 0.0 {
        0.0
    } else {
        m4 / (m2 * m2) - 3.0
    }
}

/// Builds the ensemble report from per-sample final fields of one velocity
/// component.
///
/// `histogram_s`: nested prefixes for the Q histograms. `slope_s`: prefix
/// sizes compared against the full mean (kept well below the sample count
/// so the finite-S_max bias stays small). Reductions run in a fixed order.
pub fn ensemble_stats(
    final_fields: &[ArrayD<f64>],
    tables: &[BasisTables],
    histogram_s: &[usize],
    slope_s: &[usize],
    bins: usize,
) -> EnsembleReport {
    let s_max = final_fields.len();
    assert!(s_max >= 2, "need at least two samples");
    let q_values: Vec<f64> =
        final_fields.iter().map(|f| integrate_nodal(f, tables)).collect();

    // Histograms on a common axis (the full-sample range).
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &q in &q_values {
        lo = lo.min(q);
        hi = hi.max(q);
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let mut histograms = Vec::new();
    let mut hist_sizes: Vec<usize> =
        histogram_s.iter().copied().filter(|&s| s >= 1 && s <= s_max).collect();
    hist_sizes.sort_unstable();
    hist_sizes.dedup();
    for &s in &hist_sizes {
        let edges: Vec<f64> =
            (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        let mut counts = vec![0usize; bins];
        for &q in &q_values[..s] {
            let mut b = ((q - lo) / (hi - lo) * bins as f64) as usize;
            if b >= bins {
                b = bins - 1;
            }
            counts[b] += 1;
        }
        histograms.push((s, edges, counts));
    }

    // Ensemble-mean convergence toward the full mean.
    let mut mean_full = final_fields[0].clone();
    for f in &final_fields[1..] {
        mean_full += f;
    }
    mean_full.mapv_inplace(|v| v / s_max as f64);
    let mut slope_sizes: Vec<usize> =
        slope_s.iter().copied().filter(|&s| s >= 1 && s < s_max).collect();
    slope_sizes.sort_unstable();
    slope_sizes.dedup();
    let mut convergence = Vec::new();
    let mut running = ArrayD::zeros(final_fields[0].raw_dim());
    let mut count = 0usize;
    for &s in &slope_sizes {
        while count < s {
            running += &final_fields[count];
            count += 1;
        }
        let mut diff = running.mapv(|v| v / s as f64);
        diff -= &mean_full;
        diff.mapv_inplace(|v| v * v);
        convergence.push((s, integrate_nodal(&diff, tables).sqrt()));
    }

    // Log-log least squares; distances at rounding level count as zero so
    // identical samples report a degenerate fit instead of a noise slope.
    let mean_scale = integrate_nodal(&mean_full.mapv(|v| v * v), tables).sqrt();
    let degenerate_below = 1e-12 * mean_scale.max(1e-300);
    let pts: Vec<(f64, f64)> = convergence
        .iter()
        .filter(|(_, e)| *e > degenerate_below)
        .map(|(s, e)| ((*s as f64).ln(), e.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let denom = n * sxx - sx * sx;
        (denom.abs() > 1e-12).then(|| (n * sxy - sx * sy) / denom)
    } else {
        None
    };

    let skewness = hist_sizes.iter().map(|&s| (s, sample_skewness(&q_values[..s]))).collect();
    let kurtosis =
        hist_sizes.iter().map(|&s| (s, sample_excess_kurtosis(&q_values[..s]))).collect();
    EnsembleReport { q_values, histograms, convergence, slope, skewness, kurtosis }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_tables, BasisSpec};
    use crate::nse_solver::Mesh;

    fn fourier_mesh(n: usize, dim: usize) -> (Vec<BasisTables>, Mesh) {
        let spec = BasisSpec::fourier(n);
        let tables: Vec<BasisTables> =
            (0..dim).map(|_| build_tables(spec, 0).unwrap()).collect();
        let mesh = Mesh::from_tables(&tables);
        (tables, mesh)
    }

    #[test]
    fn forcing_2d_vanishes_at_t_zero_and_reproduces() {
        let spec = RandomInputSpec::new(InputFamily::Forcing2D, 5.0, 42, 3);
        let batch = gen_forcing_2d(&spec);
        let (_, mesh) = fourier_mesh(8, 2);
        for sample in &batch {
            for comp in sample.eval(0.0, &mesh) {
                assert!(comp.iter().all(|v| *v == 0.0));
            }
        }
        let again = gen_forcing_2d(&spec);
        for (a, b) in batch.iter().zip(&again) {
            for (ca, cb) in a.components.iter().zip(&b.components) {
                for ((ka, va), (kb, vb)) in ca.terms.iter().zip(&cb.terms) {
                    assert_eq!(ka, kb);
                    assert_eq!(va, vb); // bit-identical regeneration
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_give_zero_field() {
        let sum = TrigSum { amplitude: 1.0, sin_t: true, terms: vec![(vec![1, 1], Complex64::new(0.0, 0.0))] };
        assert_eq!(sum.eval_at(0.7, &[0.3, 0.4]), 0.0);
    }

    #[test]
    fn initial_2d_is_divergence_free() {
        let spec = RandomInputSpec::new(InputFamily::Initial2D, 5.0, 7, 2);
        let batch = gen_initial_2d(&spec);
        let (_, mesh) = fourier_mesh(16, 2);
        for sample in &batch {
            // Analytic divergence: -d2Psi/dxdy + d2Psi/dxdy = 0; check the
            // sampled fields' spectral divergence instead.
            let u = sample.eval(0.0, &mesh);
            let spec_f = BasisSpec::fourier(16);
            let tables: Vec<BasisTables> =
                (0..2).map(|_| build_tables(spec_f, 0).unwrap()).collect();
            let mut div = ArrayD::<Complex64>::zeros(IxDyn(&[16, 16]));
            for (c, comp) in u.iter().enumerate() {
                let a = crate::basis::analyze_fourier(comp, &tables);
                div += &crate::basis::fourier_derivative(&a, &spec_f, c);
            }
            let max = div.iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(max <= 1e-12, "divergence {max:e}");
        }
    }

    #[test]
    fn boundary_samples_vanish_at_t0_and_report_corners() {
        let spec = RandomInputSpec::new(InputFamily::Boundary2D, 5.0, 11, 2);
        let batch = gen_boundary_2d(&spec);
        for s in &batch {
            assert_eq!(s.g.eval_at(0.0, &[0.5]), 0.0);
            assert!(s.corner_magnitude > 0.0);
            let l = s.lifting();
            // Constant-in-x part: k=0 term exists, so g is generally
            // nonzero at the corners.
            let v = (l.g)(1.0, 1.0);
            assert!(v.is_finite());
        }
    }

    #[test]
    fn beltrami_truncation_keeps_large_coefficients() {
        let spec = RandomInputSpec::new(InputFamily::Initial3DBeltrami, 10.0, 3, 20);
        for p in gen_beltrami(&spec) {
            assert!(p.c4.abs() >= 60.0 && p.c5.abs() >= 60.0 && p.c6.abs() >= 60.0);
            assert!((1..=3).contains(&p.k));
            assert_eq!(p.amplitude, 2e-6);
            assert_eq!(p.nu, 0.1);
        }
    }

    #[test]
    fn beltrami_velocity_decays_pointwise() {
        let p = BeltramiParams { k: 2, c4: 65.0, c5: -71.0, c6: 62.0, amplitude: 2e-6, nu: 0.1, r: 0.0 };
        let x = (0.7, 1.3, 2.1);
        let v0 = p.velocity_at(0.0, x.0, x.1, x.2);
        let vt = p.velocity_at(0.5, x.0, x.1, x.2);
        let factor = (-3.0 * p.nu * (p.k * p.k) as f64 * 0.5).exp();
        for c in 0..3 {
            assert!((vt[c] - factor * v0[c]).abs() <= 1e-12 * v0[c].abs().max(1e-12));
        }
    }

    #[test]
    fn beltrami_is_divergence_free_on_fourier_grid() {
        let p = BeltramiParams { k: 1, c4: 64.0, c5: 66.0, c6: -61.0, amplitude: 2e-6, nu: 0.1, r: 0.0 };
        let n = 16;
        let spec = BasisSpec::fourier(n);
        let tables: Vec<BasisTables> = (0..3).map(|_| build_tables(spec, 0).unwrap()).collect();
        let mesh = Mesh::from_tables(&tables);
        let u = p.velocity_mesh(0.3, &mesh);
        let mut div = ArrayD::<Complex64>::zeros(IxDyn(&[n, n, n]));
        for (c, comp) in u.iter().enumerate() {
            let a = crate::basis::analyze_fourier(comp, &tables);
            div += &crate::basis::fourier_derivative(&a, &spec, c);
        }
        let scale = u[0].iter().fold(1e-300f64, |a, v| a.max(v.abs()));
        let max = div.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(max <= 1e-10 * scale.max(1.0), "divergence {max:e}");
    }

    #[test]
    fn beltrami_satisfies_momentum_residual_spectrally() {
        // u_t + u.grad u - nu Lap u + grad p = 0, all derivatives spectral.
        let p = BeltramiParams { k: 1, c4: 61.0, c5: -72.0, c6: 65.0, amplitude: 2e-6, nu: 0.1, r: 0.0 };
        let n = 16;
        let spec = BasisSpec::fourier(n);
        let tables: Vec<BasisTables> = (0..3).map(|_| build_tables(spec, 0).unwrap()).collect();
        let mesh = Mesh::from_tables(&tables);
        let t = 0.2;
        let u = p.velocity_mesh(t, &mesh);
        let u_scale = u.iter().flat_map(|c| c.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
        // u_t = -3 nu k^2 u for the velocity (decay factor only).
        let dudt: Vec<ArrayD<f64>> =
            u.iter().map(|c| c.mapv(|v| -3.0 * p.nu * (p.k * p.k) as f64 * v)).collect();
        let ahat: Vec<_> = u.iter().map(|c| crate::basis::analyze_fourier(c, &tables)).collect();
        let deriv = |c: usize, ax: usize| {
            let d = crate::basis::fourier_derivative(&ahat[c], &spec, ax);
            let f = SpectralField {
                axes: vec![spec; 3],
                components: vec![crate::basis::Coeffs::Complex(d)],
            };
            crate::basis::synthesize(&f, &tables).remove(0)
        };
        let phat = crate::basis::analyze_fourier(&p.pressure_mesh(t, &mesh), &tables);
        let mut max_res = 0.0f64;
        for c in 0..3 {
            let mut res = dudt[c].clone();
            for a in 0..3 {
                let mut adv = deriv(c, a);
                adv.zip_mut_with(&u[a], |g, uu| *g *= uu);
                res += &adv;
            }
            for a in 0..3 {
                let d1 = crate::basis::fourier_derivative(&ahat[c], &spec, a);
                let d2 = crate::basis::fourier_derivative(&d1, &spec, a);
                let f = SpectralField {
                    axes: vec![spec; 3],
                    components: vec![crate::basis::Coeffs::Complex(d2)],
                };
                let lap = crate::basis::synthesize(&f, &tables).remove(0);
                res.zip_mut_with(&lap, |r, l| *r -= p.nu * l);
            }
            let dp = crate::basis::fourier_derivative(&phat, &spec, c);
            let f = SpectralField {
                axes: vec![spec; 3],
                components: vec![crate::basis::Coeffs::Complex(dp)],
            };
            let gp = crate::basis::synthesize(&f, &tables).remove(0);
            res += &gp;
            max_res = res.iter().fold(max_res, |a, v| a.max(v.abs()));
        }
        assert!(max_res <= 1e-8 * u_scale.max(1.0), "momentum residual {max_res:e}");
    }

    #[test]
    fn perturbed_forcing_reduces_to_clean_field_without_noise() {
        let spec = RandomInputSpec::new(InputFamily::PerturbedForcing2D, 5.0, 5, 1);
        let mut batch = gen_perturbed_forcing(&spec);
        for comp in &mut batch[0].components {
            for term in &mut comp.terms {
                term.1 = Complex64::new(0.0, 0.0);
            }
        }
        let (_, mesh) = fourier_mesh(8, 2);
        let got = batch[0].eval(0.9, &mesh);
        let clean = CleanForcing2D.eval(0.9, &mesh);
        for (g, c) in got.iter().zip(&clean) {
            for (a, b) in g.iter().zip(c.iter()) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn rel_errors_identities() {
        let (tables, mesh) = fourier_mesh(8, 2);
        let x = &mesh.points[0];
        let field = vec![x.mapv(f64::sin), x.mapv(f64::cos)];
        let make = |scale: f64| TrajectorySample {
            time: 1.0,
            velocity: field.iter().map(|f| f.mapv(|v| scale * v)).collect(),
            pressure_grad: None,
        };
        let same = rel_errors(&[make(1.0)], &[make(1.0)], &tables);
        assert!(same.rel_l2_tx.iter().all(|e| *e == 0.0));
        let double = rel_errors(&[make(2.0)], &[make(1.0)], &tables);
        for e in &double.rel_l2_tx {
            assert!((e - 1.0).abs() <= 1e-12, "{e}");
        }
    }

    #[test]
    fn rel_errors_match_hand_integral() {
        // pred = 0, ref = sin(x): error = 1 exactly; and with
        // pred = sin(x), ref = 2 sin(x): sqrt(int sin^2 / int 4 sin^2) = 1/2.
        let (tables, mesh) = fourier_mesh(16, 2);
        let x = &mesh.points[0];
        let r = TrajectorySample {
            time: 0.5,
            velocity: vec![x.mapv(|v| 2.0 * v.sin())],
            pressure_grad: None,
        };
        let p = TrajectorySample { time: 0.5, velocity: vec![x.mapv(f64::sin)], pressure_grad: None };
        let rep = rel_errors(&[p], &[r], &tables);
        assert!((rep.rel_l2_tx[0] - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn energy_enstrophy_of_single_mode_matches_closed_form() {
        // u = (sin y, 0): energy = (1/|O|) int sin^2/2 = 1/4 per the 2 pi
        // measure; enstrophy = (1/|O|) int cos^2/2 = 1/4.
        let n = 16;
        let spec = BasisSpec::fourier(n);
        let tables: Vec<BasisTables> = (0..2).map(|_| build_tables(spec, 0).unwrap()).collect();
        let mesh = Mesh::from_tables(&tables);
        let y = &mesh.points[1];
        let nodal = vec![y.mapv(f64::sin), mesh.zeros()];
        let mut comps = Vec::new();
        for c in &nodal {
            comps.push(crate::basis::Coeffs::Complex(crate::basis::analyze_fourier(c, &tables)));
        }
        let field = SpectralField { axes: vec![spec; 2], components: comps };
        let out = energy_enstrophy(&[(0.0, &field)], &tables);
        assert!((out[0].1 - 0.25).abs() <= 1e-12, "energy {}", out[0].1);
        assert!((out[0].2 - 0.25).abs() <= 1e-12, "enstrophy {}", out[0].2);
    }

    #[test]
    fn beltrami_energy_decay_matches_decay_factor() {
        let p = BeltramiParams { k: 1, c4: 63.0, c5: 61.0, c6: -67.0, amplitude: 2e-6, nu: 0.1, r: 0.0 };
        let n = 16;
        let spec = BasisSpec::fourier(n);
        let tables: Vec<BasisTables> = (0..3).map(|_| build_tables(spec, 0).unwrap()).collect();
        let mesh = Mesh::from_tables(&tables);
        let energy_at = |t: f64| {
            let u = p.velocity_mesh(t, &mesh);
            let comps = u
                .iter()
                .map(|c| crate::basis::Coeffs::Complex(crate::basis::analyze_fourier(c, &tables)))
                .collect();
            let f = SpectralField { axes: vec![spec; 3], components: comps };
            energy_enstrophy(&[(t, &f)], &tables)[0].1
        };
        let e0 = energy_at(0.0);
        let e1 = energy_at(1.0);
        let expect = e0 * (-6.0 * p.nu * (p.k * p.k) as f64).exp();
        assert!((e1 - expect).abs() <= 0.01 * expect, "{e1} vs {expect}");
    }

    #[test]
    fn ensemble_stats_identical_samples_are_degenerate() {
        let (tables, mesh) = fourier_mesh(8, 2);
        let x = &mesh.points[0];
        let f = x.mapv(f64::sin);
        let fields: Vec<ArrayD<f64>> = (0..10).map(|_| f.clone()).collect();
        let rep = ensemble_stats(&fields, &tables, &[5, 10], &[2, 4], 10);
        assert!(rep.slope.is_none());
        for (_, _, counts) in &rep.histograms {
            assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 1);
        }
    }

    #[test]
    fn ensemble_slope_matches_clt_for_iid_fields() {
        // Synthetic i.i.d. Gaussian stand-in fields: slope -0.5 +- 0.1.
        let (tables, _) = fourier_mesh(16, 2);
        let mut rng = SplitMix64::new(99);
        let s_max = 4096;
        let fields: Vec<ArrayD<f64>> = (0..s_max)
            .map(|_| ArrayD::from_shape_fn(IxDyn(&[16, 16]), |_| rng.normal()))
            .collect();
        let slope_s = [16, 23, 32, 45, 64, 90, 128, 181, 256, 362, 512];
        let rep = ensemble_stats(&fields, &tables, &[100, 500, 1000], &slope_s, 15);
        let slope = rep.slope.expect("non-degenerate");
        assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
    }

    #[test]
    fn skewness_shrinks_with_sample_size_in_expectation() {
        let mut total_small = 0.0;
        let mut total_large = 0.0;
        for seed in 0..10 {
            let mut rng = SplitMix64::new(1000 + seed);
            let q: Vec<f64> = (0..1000).map(|_| rng.normal()).collect();
            total_small += sample_skewness(&q[..100]).abs();
            total_large += sample_skewness(&q).abs();
        }
        assert!(total_large < total_small, "{total_large} !< {total_small}");
    }
}
