//! Classical rotational pressure-correction time stepper for the
//! incompressible Navier-Stokes equations.
//!
//! One step from t^k to t^{k+1}:
//!
//! 1. momentum (BDF2): (3 u~ - 4 u^k + u^{k-1})/(2 dt) - nu Lap(u~) + grad p^k
//!    = g^{k+1}, with g = f - (2 (u^k . grad) u^k - (u^{k-1} . grad) u^{k-1});
//! 2. pressure Poisson for the correction variable:
//!    Lap(Phi) = (3/(2 dt)) div(u~), dPhi/dn = 0 (zero-mean gauge);
//! 3. projection u^{k+1} = u~ - (2 dt/3) grad Phi and the rotational pressure
//!    update p^{k+1} = p^k + Phi - nu div(u~).
//!
//! The projected velocity u^{k+1} lives in the span of the velocity basis
//! plus grad(pressure basis); it is kept in that exact two-term form for the
//! marching history (its weak divergence vanishes identically), while the
//! stored `FlowState::u` holds its L2 projection onto the velocity basis
//! (exact for Fourier; boundary-enforced for Legendre, at the cost of the
//! scheme's usual O(dt^2) tangential slip moving into the projection
//! remainder).

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;

use crate::basis::{
    analyze_fourier, build_tables, enforce_conjugate_symmetry, fourier_derivative, project_rhs,
    synthesize_scalar_orders, BasisSpec, BasisTables, Coeffs, SpectralField,
};
use crate::error::Error;
use crate::galerkin::{solve_fourier, HelmholtzOperator, MassProjector, NeumannPoisson};

/// Boundary condition of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bc {
    Dirichlet,
    Periodic,
}

/// Full run configuration of the classical solver.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub dim: usize,
    pub bc: Bc,
    /// Modes per axis.
    pub n_modes: usize,
    pub nu: f64,
    pub dt: f64,
    /// Number of time steps; final time T = dt * steps.
    pub steps: usize,
    /// Form nonlinear products on a 3/2-rule grid (validation runs).
    pub dealias: bool,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(2..=3).contains(&self.dim) {
            return Err(Error::Config(format!("dim must be 2 or 3, got {}", self.dim)));
        }
        if self.nu <= 0.0 {
            return Err(Error::Config("nu must be positive".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.bc == Bc::Periodic && self.n_modes % 2 != 0 {
            return Err(Error::Config("periodic runs need an even mode count".into()));
        }
        Ok(())
    }

    pub fn final_time(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn velocity_spec(&self) -> BasisSpec {
        match self.bc {
            Bc::Dirichlet => BasisSpec::legendre_dirichlet(self.n_modes),
            Bc::Periodic => BasisSpec::fourier(self.n_modes),
        }
    }

    pub fn pressure_spec(&self) -> BasisSpec {
        match self.bc {
            Bc::Dirichlet => BasisSpec::legendre_neumann(self.n_modes),
            Bc::Periodic => BasisSpec::fourier(self.n_modes),
        }
    }
}

/// Coordinate arrays of a tensor grid, one full-shape array per axis.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub shape: Vec<usize>,
    pub points: Vec<ArrayD<f64>>,
}

impl Mesh {
    pub fn from_tables(tables: &[BasisTables]) -> Self {
        let shape: Vec<usize> = tables.iter().map(|t| t.point_count()).collect();
        let points = (0..tables.len())
            .map(|ax| {
                ArrayD::from_shape_fn(IxDyn(&shape), |idx| tables[ax].nodes()[idx[ax]])
            })
            .collect();
        Self { shape, points }
    }

    pub fn zeros(&self) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(&self.shape))
    }
}

/// A time-dependent vector field sampled on a mesh (forcing terms, initial
/// data, exact solutions).
pub trait TimeField: Sync {
    fn components(&self) -> usize;
    fn eval(&self, t: f64, mesh: &Mesh) -> Vec<ArrayD<f64>>;
}

/// Identically-zero field.
pub struct ZeroField(pub usize);

impl TimeField for ZeroField {
    fn components(&self) -> usize {
        self.0
    }
    fn eval(&self, _t: f64, mesh: &Mesh) -> Vec<ArrayD<f64>> {
        (0..self.0).map(|_| mesh.zeros()).collect()
    }
}

/// Field defined by a closure over (t, mesh).
pub struct FnField<F: Fn(f64, &Mesh) -> Vec<ArrayD<f64>> + Sync> {
    pub components: usize,
    pub f: F,
}

impl<F: Fn(f64, &Mesh) -> Vec<ArrayD<f64>> + Sync> TimeField for FnField<F> {
    fn components(&self) -> usize {
        self.components
    }
    fn eval(&self, t: f64, mesh: &Mesh) -> Vec<ArrayD<f64>> {
        (self.f)(t, mesh)
    }
}

/// Nonhomogeneous top-wall data for the u-component, imposed through the
/// explicit lifting l(t, x, y) = g(t, x) (1 + y)/2.
///
/// The homogeneous remainder lives in the Dirichlet basis; the momentum
/// right-hand side absorbs tau*l - nu*Lap(l), and the Poisson solve removes
/// the incompatible mean the lifting introduces when g(t, +-1) != 0
/// (recorded per step as `div_compat_defect`).
pub struct Lifting {
    pub g: Box<dyn Fn(f64, f64) -> f64 + Sync>,
    pub g_x: Box<dyn Fn(f64, f64) -> f64 + Sync>,
    pub g_xx: Box<dyn Fn(f64, f64) -> f64 + Sync>,
    /// max |g| over the corners x = +-1, reported at generation time.
    pub corner_magnitude: f64,
}

impl Lifting {
    fn eval(&self, t: f64, mesh: &Mesh, order: LiftOrder) -> ArrayD<f64> {
        let x = &mesh.points[0];
        let y = &mesh.points[1];
        let mut out = mesh.zeros();
        for ((o, &xv), &yv) in out.iter_mut().zip(x.iter()).zip(y.iter()) {
            *o = match order {
                LiftOrder::Value => (self.g)(t, xv) * (1.0 + yv) / 2.0,
                LiftOrder::Dx => (self.g_x)(t, xv) * (1.0 + yv) / 2.0,
                LiftOrder::Dy => (self.g)(t, xv) / 2.0,
                LiftOrder::Laplacian => (self.g_xx)(t, xv) * (1.0 + yv) / 2.0,
            };
        }
        out
    }
}

#[derive(Clone, Copy)]
enum LiftOrder {
    Value,
    Dx,
    Dy,
    Laplacian,
}

/// Per-step diagnostics recorded on every state.
#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    /// Norm of the weak divergence of the corrected velocity.
    pub weak_div_u: f64,
    /// Norm of the weak divergence of the intermediate velocity.
    pub weak_div_u_tilde: f64,
    /// Mean defect removed from the Poisson right-hand side (lifted runs).
    pub div_compat_defect: f64,
    /// Max |u| over boundary nodes of the stored velocity (Dirichlet runs).
    pub max_boundary_speed: f64,
}

/// Velocity, pressure, and correction variable at one time step.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub step_index: usize,
    pub time: f64,
    /// Corrected velocity in the velocity basis (projected for Legendre).
    pub u: SpectralField,
    pub p: SpectralField,
    pub phi: SpectralField,
    pub u_tilde: SpectralField,
    /// Nodal values of the true corrected velocity on the standard grid.
    pub u_nodal: Vec<ArrayD<f64>>,
    pub diagnostics: StepDiagnostics,
}

/// Marching history carried between steps: the true velocity and its
/// gradient on the product grid.
pub struct NodalState {
    pub u: Vec<ArrayD<f64>>,
    pub grad: Vec<Vec<ArrayD<f64>>>,
}

enum MomentumSolver {
    Legendre(HelmholtzOperator),
    Fourier,
}

enum PoissonSolver {
    Legendre(NeumannPoisson),
    Fourier,
}

/// Shared tables, operators, and factorizations for one configuration;
/// immutable after construction and reused across steps, trajectories, and
/// ensemble members.
pub struct Discretization {
    pub cfg: SolverConfig,
    pub vel_spec: BasisSpec,
    pub prs_spec: BasisSpec,
    pub vel_tables: Vec<BasisTables>,
    pub prs_tables: Vec<BasisTables>,
    /// Product-grid tables (3/2 rule when dealiasing, otherwise the same
    /// resolution as the standard grid).
    pub rhs_vel_tables: Vec<BasisTables>,
    pub rhs_prs_tables: Vec<BasisTables>,
    pub mesh: Mesh,
    pub rhs_mesh: Mesh,
    momentum: MomentumSolver,
    poisson: PoissonSolver,
    vel_proj: Option<MassProjector>,
    prs_proj: Option<MassProjector>,
    pub tau: f64,
}

impl Discretization {
    pub fn new(cfg: SolverConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let vel_spec = cfg.velocity_spec();
        let prs_spec = cfg.pressure_spec();
        let n = cfg.n_modes;
        let std_points = match cfg.bc {
            Bc::Dirichlet => n + 2,
            Bc::Periodic => n,
        };
        let rhs_points = if cfg.dealias { (3 * n) / 2 + 2 } else { std_points };
        let one = |spec, pts| build_tables(spec, pts);
        let vel_tables: Vec<BasisTables> =
            (0..cfg.dim).map(|_| one(vel_spec, std_points)).collect::<Result<_, _>>()?;
        let prs_tables: Vec<BasisTables> =
            (0..cfg.dim).map(|_| one(prs_spec, std_points)).collect::<Result<_, _>>()?;
        let rhs_vel_tables: Vec<BasisTables> =
            (0..cfg.dim).map(|_| one(vel_spec, rhs_points)).collect::<Result<_, _>>()?;
        let rhs_prs_tables: Vec<BasisTables> =
            (0..cfg.dim).map(|_| one(prs_spec, rhs_points)).collect::<Result<_, _>>()?;
        let tau = 3.0 / (2.0 * cfg.dt);
        let (momentum, poisson, vel_proj, prs_proj) = match cfg.bc {
            Bc::Dirichlet => (
                MomentumSolver::Legendre(HelmholtzOperator::build(tau, cfg.nu, vel_spec, cfg.dim)?),
                PoissonSolver::Legendre(NeumannPoisson::build(1.0, prs_spec, cfg.dim)?),
                Some(MassProjector::new(&vel_tables)?),
                Some(MassProjector::new(&prs_tables)?),
            ),
            Bc::Periodic => (MomentumSolver::Fourier, PoissonSolver::Fourier, None, None),
        };
        let mesh = Mesh::from_tables(&vel_tables);
        let rhs_mesh = Mesh::from_tables(&rhs_vel_tables);
        Ok(Self {
            cfg,
            vel_spec,
            prs_spec,
            vel_tables,
            prs_tables,
            rhs_vel_tables,
            rhs_prs_tables,
            mesh,
            rhs_mesh,
            momentum,
            poisson,
            vel_proj,
            prs_proj,
            tau,
        })
    }

    pub fn vel_axes(&self) -> Vec<BasisSpec> {
        vec![self.vel_spec; self.cfg.dim]
    }

    /// Momentum Helmholtz operator (Legendre runs).
    pub fn momentum_operator(&self) -> Option<&HelmholtzOperator> {
        match &self.momentum {
            MomentumSolver::Legendre(op) => Some(op),
            MomentumSolver::Fourier => None,
        }
    }

    /// Correction-variable Poisson operator (Legendre runs).
    pub fn poisson_operator(&self) -> Option<&NeumannPoisson> {
        match &self.poisson {
            PoissonSolver::Legendre(p) => Some(p),
            PoissonSolver::Fourier => None,
        }
    }

    pub fn prs_axes(&self) -> Vec<BasisSpec> {
        vec![self.prs_spec; self.cfg.dim]
    }

    /// Projects nodal velocity data (standard grid) into the velocity basis.
    pub fn project_velocity(&self, nodal: &[ArrayD<f64>]) -> SpectralField {
        let comps = nodal
            .iter()
            .map(|c| match self.cfg.bc {
                Bc::Dirichlet => Coeffs::Real(
                    self.vel_proj.as_ref().unwrap().project_nodal(c, &self.vel_tables),
                ),
                Bc::Periodic => {
                    let mut a = analyze_fourier(c, &self.vel_tables);
                    enforce_conjugate_symmetry(&mut a, &self.vel_axes());
                    Coeffs::Complex(a)
                }
            })
            .collect();
        SpectralField { axes: self.vel_axes(), components: comps }
    }

    /// Projects nodal scalar data into the pressure basis with the gauge
    /// coefficient pinned to zero.
    pub fn project_pressure(&self, nodal: &ArrayD<f64>) -> SpectralField {
        let coeffs = match self.cfg.bc {
            Bc::Dirichlet => {
                let mut a =
                    self.prs_proj.as_ref().unwrap().project_nodal(nodal, &self.prs_tables);
                a[IxDyn(&vec![0; self.cfg.dim])] = 0.0;
                Coeffs::Real(a)
            }
            Bc::Periodic => {
                let mut a = analyze_fourier(nodal, &self.prs_tables);
                enforce_conjugate_symmetry(&mut a, &self.prs_axes());
                a[IxDyn(&self.zero_mode_index())] = Complex64::new(0.0, 0.0);
                Coeffs::Complex(a)
            }
        };
        SpectralField { axes: self.prs_axes(), components: vec![coeffs] }
    }

    fn zero_mode_index(&self) -> Vec<usize> {
        vec![self.prs_spec.zero_mode(); self.cfg.dim]
    }

    /// Synthesizes one scalar coefficient set on the product grid with the
    /// given per-axis derivative orders.
    fn synth_rhs(&self, coeffs: &Coeffs, vel_basis: bool, orders: &[u8]) -> ArrayD<f64> {
        let tables = if vel_basis { &self.rhs_vel_tables } else { &self.rhs_prs_tables };
        synthesize_scalar_orders(coeffs, tables, orders)
    }

    fn synth_std(&self, coeffs: &Coeffs, vel_basis: bool, orders: &[u8]) -> ArrayD<f64> {
        let tables = if vel_basis { &self.vel_tables } else { &self.prs_tables };
        synthesize_scalar_orders(coeffs, tables, orders)
    }

    /// Norm of the weak divergence of a velocity given nodal divergence
    /// samples on the product grid (tested against the pressure basis).
    pub fn weak_divergence_norm(&self, div_nodal: &ArrayD<f64>) -> f64 {
        match self.cfg.bc {
            Bc::Dirichlet => {
                let p = project_rhs(div_nodal, &self.rhs_prs_tables);
                p.iter().map(|v| v * v).sum::<f64>().sqrt()
            }
            Bc::Periodic => {
                let p = analyze_fourier(div_nodal, &self.rhs_prs_tables);
                p.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
            }
        }
    }

    /// Solves the momentum Helmholtz problem for one component from nodal
    /// right-hand-side samples on the product grid.
    fn solve_momentum(&self, rhs_nodal: &ArrayD<f64>) -> Result<Coeffs, Error> {
        match &self.momentum {
            MomentumSolver::Legendre(op) => {
                let f = project_rhs(rhs_nodal, &self.rhs_vel_tables);
                Ok(Coeffs::Real(op.solve_projected(&f)))
            }
            MomentumSolver::Fourier => {
                let mut f = analyze_fourier(rhs_nodal, &self.rhs_vel_tables);
                enforce_conjugate_symmetry(&mut f, &self.vel_axes());
                Ok(Coeffs::Complex(solve_fourier(self.tau, self.cfg.nu, &f, &self.vel_axes())?))
            }
        }
    }

    /// Solves the correction-variable Poisson problem from nodal divergence
    /// samples; `allow_mean_defect` removes an incompatible mean instead of
    /// erroring (lifted boundary runs) and reports it.
    fn solve_poisson(
        &self,
        div_nodal: &ArrayD<f64>,
        allow_mean_defect: bool,
    ) -> Result<(Coeffs, f64), Error> {
        let scale = 3.0 / (2.0 * self.cfg.dt);
        match &self.poisson {
            PoissonSolver::Legendre(poisson) => {
                let mut f = project_rhs(div_nodal, &self.rhs_prs_tables);
                f.mapv_inplace(|v| -scale * v);
                let gauge = vec![0usize; self.cfg.dim];
                let mut defect = 0.0;
                if allow_mean_defect {
                    defect = f[IxDyn(&gauge)];
                    f[IxDyn(&gauge)] = 0.0;
                }
                let alpha = poisson.solve_projected(&f).map_err(|e| match e {
                    Error::Compatibility { mean, limit } => Error::Compatibility { mean, limit },
                    other => other,
                })?;
                Ok((Coeffs::Real(alpha), defect))
            }
            PoissonSolver::Fourier => {
                let mut f = analyze_fourier(div_nodal, &self.rhs_prs_tables);
                enforce_conjugate_symmetry(&mut f, &self.prs_axes());
                f.mapv_inplace(|z| -scale * z);
                let zero = self.zero_mode_index();
                let mut defect = 0.0;
                if allow_mean_defect {
                    defect = f[IxDyn(&zero)].norm();
                    f[IxDyn(&zero)] = Complex64::new(0.0, 0.0);
                }
                let alpha = solve_fourier(0.0, 1.0, &f, &self.prs_axes())?;
                Ok((Coeffs::Complex(alpha), defect))
            }
        }
    }
}

/// The time stepper: configuration, shared discretization, forcing, and
/// optional boundary lifting. One trajectory is sequential in k; independent
/// trajectories may share one `Stepper` read-only.
pub struct Stepper<'a> {
    pub disc: &'a Discretization,
    pub forcing: &'a dyn TimeField,
    pub lifting: Option<&'a Lifting>,
}

impl<'a> Stepper<'a> {
    pub fn new(disc: &'a Discretization, forcing: &'a dyn TimeField) -> Self {
        Self { disc, forcing, lifting: None }
    }

    pub fn with_lifting(mut self, lifting: &'a Lifting) -> Self {
        assert_eq!(self.disc.cfg.dim, 2, "lifting is a 2-D feature");
        assert_eq!(self.disc.cfg.bc, Bc::Dirichlet, "lifting needs Dirichlet runs");
        self.lifting = Some(lifting);
        self
    }

    fn dim(&self) -> usize {
        self.disc.cfg.dim
    }

    /// Nodal state (velocity and gradient on the product grid) of a velocity
    /// represented as u~ + correction from Phi, plus lifting at time t.
    pub fn nodal_state(
        &self,
        u_tilde: &SpectralField,
        phi: Option<&SpectralField>,
        t: f64,
    ) -> NodalState {
        let d = self.dim();
        let dt = self.disc.cfg.dt;
        let mut u = Vec::with_capacity(d);
        let mut grad = Vec::with_capacity(d);
        for c in 0..d {
            let mut orders = vec![0u8; d];
            let mut val = self.disc.synth_rhs(&u_tilde.components[c], true, &orders);
            if let Some(phi) = phi {
                let mut po = vec![0u8; d];
                po[c] = 1;
                let dphi = self.disc.synth_rhs(&phi.components[0], false, &po);
                val.zip_mut_with(&dphi, |a, b| *a -= 2.0 * dt / 3.0 * b);
            }
            let mut g = Vec::with_capacity(d);
            for a in 0..d {
                orders = vec![0u8; d];
                orders[a] = 1;
                let mut dv = self.disc.synth_rhs(&u_tilde.components[c], true, &orders);
                if let Some(phi) = phi {
                    let mut po = vec![0u8; d];
                    po[c] += 1;
                    po[a] += 1;
                    let dphi = self.disc.synth_rhs(&phi.components[0], false, &po);
                    dv.zip_mut_with(&dphi, |x, y| *x -= 2.0 * dt / 3.0 * y);
                }
                g.push(dv);
            }
            u.push(val);
            grad.push(g);
        }
        if let Some(l) = self.lifting {
            let mesh = &self.disc.rhs_mesh;
            u[0] += &l.eval(t, mesh, LiftOrder::Value);
            grad[0][0] += &l.eval(t, mesh, LiftOrder::Dx);
            grad[0][1] += &l.eval(t, mesh, LiftOrder::Dy);
        }
        NodalState { u, grad }
    }

    /// (u . grad) u on the product grid.
    fn advection(&self, s: &NodalState) -> Vec<ArrayD<f64>> {
        let d = self.dim();
        (0..d)
            .map(|c| {
                let mut out = s.grad[c][0].clone();
                out.zip_mut_with(&s.u[0], |g, u| *g *= u);
                for a in 1..d {
                    let mut term = s.grad[c][a].clone();
                    term.zip_mut_with(&s.u[a], |g, u| *g *= u);
                    out += &term;
                }
                out
            })
            .collect()
    }

    /// Artificial preceding velocity from the Stokes relation:
    /// u^{-1} = u^0 - dt (f(t^0) + nu Lap u^0 - grad p^0).
    pub fn stokes_startup(
        &self,
        u0: &SpectralField,
        p0: &SpectralField,
    ) -> SpectralField {
        let d = self.dim();
        let dt = self.disc.cfg.dt;
        let nu = self.disc.cfg.nu;
        let f0 = self.forcing.eval(0.0, &self.disc.rhs_mesh);
        let mut comps = Vec::with_capacity(d);
        for c in 0..d {
            let mut val = self.disc.synth_rhs(&u0.components[c], true, &vec![0u8; d]);
            // - dt * f(t^0)
            val.zip_mut_with(&f0[c], |a, b| *a -= dt * b);
            // - dt * nu * Lap u^0
            for a in 0..d {
                let mut orders = vec![0u8; d];
                orders[a] = 2;
                let lap = self.disc.synth_rhs(&u0.components[c], true, &orders);
                val.zip_mut_with(&lap, |x, y| *x -= dt * nu * y);
            }
            // + dt * grad p^0
            let mut orders = vec![0u8; d];
            orders[c] = 1;
            let gp = self.disc.synth_rhs(&p0.components[0], false, &orders);
            val.zip_mut_with(&gp, |x, y| *x += dt * y);
            comps.push(val);
        }
        self.project_rhs_grid_velocity(&comps)
    }

    /// Projects product-grid nodal velocity into the velocity basis.
    pub fn project_rhs_grid_velocity(&self, nodal: &[ArrayD<f64>]) -> SpectralField {
        let comps = nodal
            .iter()
            .map(|c| match self.disc.cfg.bc {
                Bc::Dirichlet => {
                    let rhs = project_rhs(c, &self.disc.rhs_vel_tables);
                    Coeffs::Real(self.disc.vel_proj.as_ref().unwrap().solve_mass(&rhs))
                }
                Bc::Periodic => {
                    let mut a = analyze_fourier(c, &self.disc.rhs_vel_tables);
                    enforce_conjugate_symmetry(&mut a, &self.disc.vel_axes());
                    Coeffs::Complex(a)
                }
            })
            .collect();
        SpectralField { axes: self.disc.vel_axes(), components: comps }
    }

    /// Explicit part of the momentum right-hand side:
    /// g^{k+1} = f(t^{k+1}) - (2 (u^k.grad)u^k - (u^{k-1}.grad)u^{k-1}).
    fn nonlinear_rhs(
        &self,
        s_k: &NodalState,
        s_km1: &NodalState,
        t_kp1: f64,
    ) -> Vec<ArrayD<f64>> {
        let d = self.dim();
        let f = self.forcing.eval(t_kp1, &self.disc.rhs_mesh);
        assert_eq!(f.len(), d, "forcing component count mismatch");
        let adv_k = self.advection(s_k);
        let adv_km1 = self.advection(s_km1);
        (0..d)
            .map(|c| {
                let mut out = f[c].clone();
                out.zip_mut_with(&adv_k[c], |a, b| *a -= 2.0 * b);
                out.zip_mut_with(&adv_km1[c], |a, b| *a += b);
                out
            })
            .collect()
    }

    /// Momentum right-hand side per component on the product grid:
    /// g^{k+1} - grad p^k + (4 u^k - u^{k-1})/(2 dt), plus the lifting
    /// residual when boundary data is imposed.
    pub fn momentum_rhs(
        &self,
        k: usize,
        s_k: &NodalState,
        s_km1: &NodalState,
        p_k: &SpectralField,
    ) -> Vec<ArrayD<f64>> {
        let d = self.dim();
        let cfg = &self.disc.cfg;
        let dt = cfg.dt;
        let t_kp1 = dt * (k + 1) as f64;
        let tau = self.disc.tau;
        let g = self.nonlinear_rhs(s_k, s_km1, t_kp1);
        let mut out = Vec::with_capacity(d);
        for c in 0..d {
            let mut rhs = g[c].clone();
            let mut orders = vec![0u8; d];
            orders[c] = 1;
            let gp = self.disc.synth_rhs(&p_k.components[0], false, &orders);
            rhs -= &gp;
            rhs.zip_mut_with(&s_k.u[c], |a, b| *a += 4.0 * b / (2.0 * dt));
            rhs.zip_mut_with(&s_km1.u[c], |a, b| *a -= b / (2.0 * dt));
            if c == 0 {
                if let Some(l) = self.lifting {
                    let mesh = &self.disc.rhs_mesh;
                    let lv = l.eval(t_kp1, mesh, LiftOrder::Value);
                    let ll = l.eval(t_kp1, mesh, LiftOrder::Laplacian);
                    rhs.zip_mut_with(&lv, |a, b| *a -= tau * b);
                    rhs.zip_mut_with(&ll, |a, b| *a += cfg.nu * b);
                }
            }
            out.push(rhs);
        }
        out
    }

    /// Divergence of the intermediate velocity (plus lifting) on the
    /// product grid.
    pub fn divergence_nodal(&self, u_tilde: &SpectralField, t: f64) -> ArrayD<f64> {
        let d = self.dim();
        let mut div = ArrayD::zeros(IxDyn(&self.disc.rhs_mesh.shape));
        for c in 0..d {
            let mut orders = vec![0u8; d];
            orders[c] = 1;
            div += &self.disc.synth_rhs(&u_tilde.components[c], true, &orders);
        }
        if let Some(l) = self.lifting {
            div += &l.eval(t, &self.disc.rhs_mesh, LiftOrder::Dx);
        }
        div
    }

    /// One full step from (u^k, u^{k-1}, p^k) at t^k to the state at t^{k+1}.
    fn step(
        &self,
        k: usize,
        s_k: &NodalState,
        s_km1: &NodalState,
        p_k: &SpectralField,
    ) -> Result<(FlowState, NodalState), Error> {
        let d = self.dim();
        let cfg = &self.disc.cfg;
        let t_kp1 = cfg.dt * (k + 1) as f64;
        let rhs = self.momentum_rhs(k, s_k, s_km1, p_k);
        let mut u_tilde_comps = Vec::with_capacity(d);
        for comp in &rhs {
            u_tilde_comps.push(self.disc.solve_momentum(comp)?);
        }
        let u_tilde = SpectralField { axes: self.disc.vel_axes(), components: u_tilde_comps };

        let div = self.divergence_nodal(&u_tilde, t_kp1);
        let weak_div_u_tilde = self.disc.weak_divergence_norm(&div);

        // Correction variable.
        let allow_defect = self.lifting.is_some();
        let (phi_coeffs, div_compat_defect) = self.disc.solve_poisson(&div, allow_defect)?;
        let phi = SpectralField { axes: self.disc.prs_axes(), components: vec![phi_coeffs] };

        self.apply_correction(k, u_tilde, phi, p_k, weak_div_u_tilde, div_compat_defect)
    }

    /// Projection and pressure update applied to an intermediate velocity
    /// and correction variable (the same algebra whether the pair came from
    /// the classical solves or from network outputs).
    pub fn apply_correction(
        &self,
        k: usize,
        u_tilde: SpectralField,
        phi: SpectralField,
        p_k: &SpectralField,
        weak_div_u_tilde: f64,
        div_compat_defect: f64,
    ) -> Result<(FlowState, NodalState), Error> {
        let d = self.dim();
        let cfg = &self.disc.cfg;
        let t_kp1 = cfg.dt * (k + 1) as f64;

        // Corrected velocity (exact two-term form) and its diagnostics.
        let s_kp1 = self.nodal_state(&u_tilde, Some(&phi), t_kp1);
        let mut div_u = ArrayD::zeros(IxDyn(&self.disc.rhs_mesh.shape));
        for c in 0..d {
            div_u += &s_kp1.grad[c][c];
        }
        let weak_div_u = self.disc.weak_divergence_norm(&div_u);

        // Blow-up detection.
        let mut max_speed = 0.0f64;
        for c in 0..d {
            for v in s_kp1.u[c].iter() {
                if !v.is_finite() {
                    return Err(Error::BlowUp {
                        step: k + 1,
                        what: "non-finite velocity".into(),
                    });
                }
                max_speed = max_speed.max(v.abs());
            }
        }
        if max_speed > 1e6 {
            return Err(Error::BlowUp {
                step: k + 1,
                what: format!("nodal |u| = {max_speed:e} exceeds 1e6"),
            });
        }

        // Pressure update p^{k+1} = p^k + Phi - nu div(u~), projected back
        // onto the pressure basis.
        let p_next = match (&p_k.components[0], &phi.components[0]) {
            (Coeffs::Complex(pk), Coeffs::Complex(ph)) => {
                // div(u~) in coefficient space.
                let mut divc = ArrayD::<Complex64>::zeros(pk.raw_dim());
                for c in 0..d {
                    divc += &fourier_derivative(
                        u_tilde.components[c].as_complex(),
                        &self.disc.vel_spec,
                        c,
                    );
                }
                let mut out = pk.clone();
                out.zip_mut_with(ph, |a, b| *a += b);
                out.zip_mut_with(&divc, |a, b| *a -= cfg.nu * b);
                out[IxDyn(&self.disc.zero_mode_index())] = Complex64::new(0.0, 0.0);
                SpectralField {
                    axes: self.disc.prs_axes(),
                    components: vec![Coeffs::Complex(out)],
                }
            }
            _ => {
                // Nodal update on the standard grid, then L2 projection.
                let std_shape: Vec<usize> =
                    self.disc.prs_tables.iter().map(|t| t.point_count()).collect();
                let mut nodal = ArrayD::zeros(IxDyn(&std_shape));
                nodal += &self.disc.synth_std(&p_k.components[0], false, &vec![0u8; d]);
                nodal += &self.disc.synth_std(&phi.components[0], false, &vec![0u8; d]);
                let mut div_std = ArrayD::zeros(IxDyn(&std_shape));
                for c in 0..d {
                    let mut orders = vec![0u8; d];
                    orders[c] = 1;
                    div_std += &self.disc.synth_std(&u_tilde.components[c], true, &orders);
                }
                if let Some(l) = self.lifting {
                    div_std += &l.eval(t_kp1, &self.disc.mesh, LiftOrder::Dx);
                }
                nodal.zip_mut_with(&div_std, |a, b| *a -= cfg.nu * b);
                self.disc.project_pressure(&nodal)
            }
        };

        // Stored velocity: exact for Fourier, L2-projected for Legendre.
        let (u_stored, u_nodal_std, max_boundary_speed) = self.stored_velocity(&u_tilde, &phi, t_kp1)?;

        let state = FlowState {
            step_index: k + 1,
            time: t_kp1,
            u: u_stored,
            p: p_next,
            phi,
            u_tilde,
            u_nodal: u_nodal_std,
            diagnostics: StepDiagnostics {
                weak_div_u,
                weak_div_u_tilde,
                div_compat_defect,
                max_boundary_speed,
            },
        };
        Ok((state, s_kp1))
    }

    /// Builds the stored velocity representation, its standard-grid nodal
    /// values (true corrected velocity), and the boundary diagnostic.
    fn stored_velocity(
        &self,
        u_tilde: &SpectralField,
        phi: &SpectralField,
        t: f64,
    ) -> Result<(SpectralField, Vec<ArrayD<f64>>, f64), Error> {
        let d = self.dim();
        let dt = self.disc.cfg.dt;
        match self.disc.cfg.bc {
            Bc::Periodic => {
                let mut comps = Vec::with_capacity(d);
                let mut nodal = Vec::with_capacity(d);
                for c in 0..d {
                    let mut out = u_tilde.components[c].as_complex().clone();
                    let dphi =
                        fourier_derivative(phi.components[0].as_complex(), &self.disc.prs_spec, c);
                    out.zip_mut_with(&dphi, |a, b| *a -= 2.0 * dt / 3.0 * b);
                    let coeffs = Coeffs::Complex(out);
                    nodal.push(self.disc.synth_std(&coeffs, true, &vec![0u8; d]));
                    comps.push(coeffs);
                }
                let u = SpectralField { axes: self.disc.vel_axes(), components: comps };
                Ok((u, nodal, 0.0))
            }
            Bc::Dirichlet => {
                // True corrected velocity (plus lifting) on the standard grid.
                let std_shape: Vec<usize> =
                    self.disc.vel_tables.iter().map(|t| t.point_count()).collect();
                let mut nodal = Vec::with_capacity(d);
                for c in 0..d {
                    let mut val = self.disc.synth_std(&u_tilde.components[c], true, &vec![0u8; d]);
                    let mut orders = vec![0u8; d];
                    orders[c] = 1;
                    let dphi = self.disc.synth_std(&phi.components[0], false, &orders);
                    val.zip_mut_with(&dphi, |a, b| *a -= 2.0 * dt / 3.0 * b);
                    nodal.push(val);
                }
                if let Some(l) = self.lifting {
                    let std_mesh = Mesh {
                        shape: std_shape.clone(),
                        points: (0..d)
                            .map(|ax| {
                                ArrayD::from_shape_fn(IxDyn(&std_shape), |idx| {
                                    self.disc.vel_tables[ax].nodes()[idx[ax]]
                                })
                            })
                            .collect(),
                    };
                    nodal[0] += &l.eval(t, &std_mesh, LiftOrder::Value);
                }
                // Project the homogeneous part into the Dirichlet basis.
                let mut homog = nodal.clone();
                if let Some(l) = self.lifting {
                    let std_mesh = Mesh {
                        shape: std_shape.clone(),
                        points: (0..d)
                            .map(|ax| {
                                ArrayD::from_shape_fn(IxDyn(&std_shape), |idx| {
                                    self.disc.vel_tables[ax].nodes()[idx[ax]]
                                })
                            })
                            .collect(),
                    };
                    homog[0] -= &l.eval(t, &std_mesh, LiftOrder::Value);
                }
                let u = self.disc.project_velocity(&homog);
                // Boundary diagnostic on the stored (basis-enforced) part.
                let stored_nodal: Vec<ArrayD<f64>> = u
                    .components
                    .iter()
                    .map(|c| self.disc.synth_std(c, true, &vec![0u8; d]))
                    .collect();
                let p = self.disc.vel_tables[0].point_count();
                let mut max_boundary = 0.0f64;
                for comp in &stored_nodal {
                    for (idx, v) in comp.indexed_iter() {
                        let on_boundary = (0..d).any(|ax| idx[ax] == 0 || idx[ax] == p - 1);
                        if on_boundary {
                            max_boundary = max_boundary.max(v.abs());
                        }
                    }
                }
                Ok((u, nodal, max_boundary))
            }
        }
    }

    /// Full time march t in (0, T]. `on_step` observes every state in
    /// order; the final state is returned. Deterministic given the
    /// configuration and inputs.
    pub fn run(
        &self,
        u0: &dyn TimeField,
        p0: Option<&dyn TimeField>,
        mut on_step: impl FnMut(&FlowState),
    ) -> Result<FlowState, Error> {
        let d = self.dim();
        let cfg = &self.disc.cfg;
        // Initial data onto the bases.
        let u0_nodal = u0.eval(0.0, &self.disc.rhs_mesh);
        assert_eq!(u0_nodal.len(), d, "initial velocity component count mismatch");
        let u0_field = self.project_rhs_grid_velocity(&u0_nodal);
        let p0_field = match p0 {
            Some(p) => {
                let nodal = p.eval(0.0, &self.disc.rhs_mesh);
                // Project via the standard grid for consistency.
                let std_nodal = match cfg.bc {
                    Bc::Dirichlet if cfg.dealias => {
                        // Re-evaluate on the standard grid.
                        let mesh = Mesh::from_tables(&self.disc.prs_tables);
                        p.eval(0.0, &mesh).remove(0)
                    }
                    _ => nodal[0].clone(),
                };
                self.disc.project_pressure(&std_nodal)
            }
            None => SpectralField::zeros(self.disc.prs_axes(), 1),
        };
        let u_m1 = self.stokes_startup(&u0_field, &p0_field);

        let mut s_km1 = self.nodal_state(&u_m1, None, -cfg.dt);
        let mut s_k = self.nodal_state(&u0_field, None, 0.0);
        if self.lifting.is_some() {
            // nodal_state added lifting at the passed times; the startup
            // field carries its own boundary data, which for t <= 0 is the
            // same homogeneous zero state as u0 in the families used here.
        }
        let mut p_k = p0_field;
        let mut last = None;
        for k in 0..cfg.steps {
            let (state, s_kp1) = self.step(k, &s_k, &s_km1, &p_k)?;
            p_k = state.p.clone();
            s_km1 = s_k;
            s_k = s_kp1;
            on_step(&state);
            last = Some(state);
        }
        Ok(last.expect("steps >= 1"))
    }

    /// Convenience wrapper collecting the whole trajectory.
    pub fn run_collect(
        &self,
        u0: &dyn TimeField,
        p0: Option<&dyn TimeField>,
    ) -> Result<Vec<FlowState>, Error> {
        let mut states = Vec::with_capacity(self.disc.cfg.steps);
        self.run(u0, p0, |s| states.push(s.clone()))?;
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn periodic_cfg(n: usize, nu: f64, dt: f64, steps: usize, dim: usize) -> SolverConfig {
        SolverConfig { dim, bc: Bc::Periodic, n_modes: n, nu, dt, steps, dealias: false }
    }

    #[test]
    fn zero_data_zero_forcing_stays_zero() {
        let disc = Discretization::new(periodic_cfg(8, 0.5, 0.01, 5, 2)).unwrap();
        let forcing = ZeroField(2);
        let stepper = Stepper::new(&disc, &forcing);
        let u0 = ZeroField(2);
        let last = stepper.run(&u0, None, |s| {
            assert!(s.u.norm_sq() <= 1e-28);
            assert!(s.p.norm_sq() <= 1e-28);
        });
        assert!(last.unwrap().u.norm_sq() <= 1e-28);
    }

    #[test]
    fn stokes_startup_identities() {
        // Zero data -> zero preceding velocity; steady Stokes data
        // (f = -nu Lap u0 + grad p0) -> u^{-1} = u^0.
        let disc = Discretization::new(periodic_cfg(16, 0.3, 0.02, 1, 2)).unwrap();
        let zero_f = ZeroField(2);
        let stepper = Stepper::new(&disc, &zero_f);
        let u0 = SpectralField::zeros(disc.vel_axes(), 2);
        let p0 = SpectralField::zeros(disc.prs_axes(), 1);
        let um1 = stepper.stokes_startup(&u0, &p0);
        assert!(um1.norm_sq() <= 1e-28);

        // Steady field u = (sin y, 0): Lap u = -u, take f = nu * u so the
        // Stokes relation has zero time derivative (p0 = 0).
        let nu = disc.cfg.nu;
        let steady_f = FnField {
            components: 2,
            f: move |_t: f64, mesh: &Mesh| {
                let y = &mesh.points[1];
                vec![y.mapv(|v| nu * v.sin()), mesh.zeros()]
            },
        };
        let stepper = Stepper::new(&disc, &steady_f);
        let u0_field = FnField {
            components: 2,
            f: |_t: f64, mesh: &Mesh| {
                let y = &mesh.points[1];
                vec![y.mapv(f64::sin), mesh.zeros()]
            },
        };
        let u0_nodal = u0_field.eval(0.0, &disc.rhs_mesh);
        let u0_proj = stepper.project_rhs_grid_velocity(&u0_nodal);
        let um1 = stepper.stokes_startup(&u0_proj, &p0);
        let mut diff = um1.clone();
        diff.add_scaled(&u0_proj, -1.0);
        assert!(diff.norm_sq().sqrt() <= 1e-10 * u0_proj.norm_sq().sqrt());
    }

    #[test]
    fn shear_flow_advection_vanishes() {
        // u = (sin y, 0) gives (u.grad)u = 0, so g = f.
        let disc = Discretization::new(periodic_cfg(16, 0.5, 0.01, 1, 2)).unwrap();
        let forcing = ZeroField(2);
        let stepper = Stepper::new(&disc, &forcing);
        let u0_field = FnField {
            components: 2,
            f: |_t: f64, mesh: &Mesh| {
                let y = &mesh.points[1];
                vec![y.mapv(f64::sin), mesh.zeros()]
            },
        };
        let u0_nodal = u0_field.eval(0.0, &disc.rhs_mesh);
        let u0_proj = stepper.project_rhs_grid_velocity(&u0_nodal);
        let s = stepper.nodal_state(&u0_proj, None, 0.0);
        let adv = stepper.advection(&s);
        for comp in adv {
            for v in comp.iter() {
                assert!(v.abs() <= 1e-11, "advection {v:e}");
            }
        }
    }

    #[test]
    fn divergence_free_intermediate_gives_zero_phi() {
        let disc = Discretization::new(periodic_cfg(8, 0.5, 0.01, 1, 2)).unwrap();
        let div = ArrayD::zeros(IxDyn(&disc.rhs_mesh.shape));
        let (phi, _) = disc.solve_poisson(&div, false).unwrap();
        assert!(Coeffs::norm_sq(&phi) <= 1e-28);
    }

    #[test]
    fn single_mode_poisson_matches_hand_algebra() {
        // u~ = (sin x, 0): div = cos x, so Phi = -(3/(2 dt)) cos x / 1 and
        // the corrected field u~ - (2 dt/3) grad Phi has zero divergence.
        let dt = 0.01;
        let mut cfg = periodic_cfg(8, 0.5, dt, 1, 2);
        cfg.nu = 1.0;
        let disc = Discretization::new(cfg).unwrap();
        let x = &disc.rhs_mesh.points[0];
        let div = x.mapv(f64::cos);
        let (phi, _) = disc.solve_poisson(&div, false).unwrap();
        let phi_field =
            SpectralField { axes: disc.prs_axes(), components: vec![phi] };
        let nodal = crate::basis::synthesize(&phi_field, &disc.prs_tables);
        let scale = 3.0 / (2.0 * dt);
        let mut max_err = 0.0f64;
        for (j, v) in nodal[0].indexed_iter() {
            let xx = disc.prs_tables[0].nodes()[j[0]];
            max_err = max_err.max((v + scale * xx.cos()).abs());
        }
        assert!(max_err <= 1e-11, "phi mismatch {max_err:e}");
    }

    #[test]
    fn projection_annihilates_weak_divergence_periodic() {
        // A generic non-solenoidal start: the corrected velocity must have
        // weak divergence ~ 0 relative to the intermediate one.
        let disc = Discretization::new(periodic_cfg(16, 0.1, 0.01, 3, 2)).unwrap();
        let forcing = FnField {
            components: 2,
            f: |t: f64, mesh: &Mesh| {
                let x = &mesh.points[0];
                let y = &mesh.points[1];
                vec![
                    ndarray::Zip::from(x).and(y).map_collect(|&a, &b| {
                        t.sin() * (a.sin() * b.cos() + 0.3 * (a + b).cos())
                    }).into_dyn(),
                    ndarray::Zip::from(x).and(y).map_collect(|&a, &b| {
                        t.sin() * (0.5 * a.cos() + (a - b).sin())
                    }).into_dyn(),
                ]
            },
        };
        let stepper = Stepper::new(&disc, &forcing);
        let u0 = ZeroField(2);
        stepper
            .run(&u0, None, |s| {
                assert!(
                    s.diagnostics.weak_div_u
                        <= 1e-8 * s.diagnostics.weak_div_u_tilde + 1e-12,
                    "step {}: {:e} vs {:e}",
                    s.step_index,
                    s.diagnostics.weak_div_u,
                    s.diagnostics.weak_div_u_tilde
                );
            })
            .unwrap();
    }

    #[test]
    fn projection_annihilates_weak_divergence_dirichlet() {
        let cfg = SolverConfig {
            dim: 2,
            bc: Bc::Dirichlet,
            n_modes: 12,
            nu: 0.1,
            dt: 0.01,
            steps: 3,
            dealias: false,
        };
        let disc = Discretization::new(cfg).unwrap();
        let forcing = FnField {
            components: 2,
            f: |t: f64, mesh: &Mesh| {
                let x = &mesh.points[0];
                let y = &mesh.points[1];
                vec![
                    ndarray::Zip::from(x).and(y).map_collect(|&a, &b| {
                        t.sin() * ((a + b).cos() + a.sin())
                    }).into_dyn(),
                    ndarray::Zip::from(x).and(y).map_collect(|&a, &b| {
                        t.sin() * (a.cos() - (a * b).sin())
                    }).into_dyn(),
                ]
            },
        };
        let stepper = Stepper::new(&disc, &forcing);
        let u0 = ZeroField(2);
        stepper
            .run(&u0, None, |s| {
                assert!(
                    s.diagnostics.weak_div_u
                        <= 1e-8 * s.diagnostics.weak_div_u_tilde + 1e-12,
                    "step {}: {:e} vs {:e}",
                    s.step_index,
                    s.diagnostics.weak_div_u,
                    s.diagnostics.weak_div_u_tilde
                );
                assert!(s.diagnostics.max_boundary_speed <= 1e-10);
            })
            .unwrap();
    }

    #[test]
    fn unforced_viscous_decay_is_monotone() {
        let disc = Discretization::new(periodic_cfg(16, 0.05, 0.01, 20, 2)).unwrap();
        let forcing = ZeroField(2);
        let stepper = Stepper::new(&disc, &forcing);
        let mut rng = SplitMix64::new(31);
        let (a, b, c, d2) = (rng.normal(), rng.normal(), rng.normal(), rng.normal());
        let u0 = FnField {
            components: 2,
            f: move |_t: f64, mesh: &Mesh| {
                let x = &mesh.points[0];
                let y = &mesh.points[1];
                // Divergence-free: (dy psi, -dx psi) for psi = mix of modes.
                vec![
                    ndarray::Zip::from(x).and(y).map_collect(|&xx, &yy| {
                        a * yy.cos() + b * (xx + yy).cos() * 0.5 + c * (2.0 * yy).cos() * 0.25
                    }).into_dyn(),
                    ndarray::Zip::from(x).and(y).map_collect(|&xx, &yy| {
                        -b * (xx + yy).cos() * 0.5 - d2 * xx.cos() * 0.5
                    }).into_dyn(),
                ]
            },
        };
        let mut energies = Vec::new();
        stepper
            .run(&u0, None, |s| {
                let h = std::f64::consts::TAU / 16.0;
                let e: f64 = s
                    .u_nodal
                    .iter()
                    .map(|c| c.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    * h
                    * h
                    * 0.5;
                energies.push(e);
            })
            .unwrap();
        for w in energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "energy grew: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn blow_up_is_detected_with_step_index() {
        // A huge forcing with a tiny viscosity drives the state over the
        // 1e6 guard within a few steps.
        let disc = Discretization::new(periodic_cfg(8, 0.001, 0.5, 50, 2)).unwrap();
        let forcing = FnField {
            components: 2,
            f: |_t: f64, mesh: &Mesh| {
                let y = &mesh.points[1];
                vec![y.mapv(|v| 1e7 * v.sin()), mesh.zeros()]
            },
        };
        let stepper = Stepper::new(&disc, &forcing);
        let u0 = ZeroField(2);
        match stepper.run(&u0, None, |_| {}) {
            Err(Error::BlowUp { step, .. }) => assert!(step >= 1),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }
}
