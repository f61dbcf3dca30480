//! Mass/stiffness assembly, eigen-diagonalization, preconditioning, and
//! Helmholtz-type solves/residuals for all four cases (2D/3D x
//! Dirichlet-Legendre/periodic-Fourier).
//!
//! The Legendre weak form tau*u - nu*Lap(u) = f with the composite basis
//! turns into tau B a B + nu a B + nu B a = F (2D, stiffness = identity) and
//! its three-axis analogue. Diagonalizing the mass matrix B = E diag(l) E^T
//! decouples the tensor system into independent 1-D systems, one per
//! eigencolumn: ((tau l_p + nu) B + nu l_p I) v_p = g_p, which a diagonal
//! preconditioner C (unit diagonal after C A C) makes well conditioned.
//! The same residuals the classical solver drives to zero are the training
//! losses of the operator networks.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array2, ArrayD, IxDyn};
use num_complex::Complex64;

use crate::basis::{
    apply_axis_real, build_tables, BasisKind, BasisSpec, BasisTables, Coeffs, SpectralField,
};
use crate::error::Error;

/// Mass matrix of one Legendre axis in its composite basis.
#[derive(Debug, Clone)]
pub struct MassMatrix {
    pub entries: Array2<f64>,
    pub basis: BasisSpec,
}

impl MassMatrix {
    /// Active sub-block: everything for Dirichlet, modes 1.. for Neumann
    /// (the constant mode decouples and is handled separately).
    pub fn active(&self) -> Array2<f64> {
        match self.basis.kind {
            BasisKind::LegendreNeumann => {
                let n = self.basis.n_modes;
                self.entries.slice(ndarray::s![1..n, 1..n]).to_owned()
            }
            _ => self.entries.clone(),
        }
    }
}

/// Assembles the mass matrix by GLL quadrature on the N+2-point grid.
///
/// Quadrature is authoritative: it is exactly consistent with `project_rhs`
/// on the same grid. (GLL with P = N+2 points is exact to degree 2P-3 =
/// 2N+1, one short of the top-mode diagonal's degree 2N+2, so that single
/// entry deviates from the closed-form integral by design.)
pub fn assemble_mass(spec: BasisSpec) -> Result<MassMatrix, Error> {
    assert!(spec.kind.is_legendre(), "mass assembly needs a Legendre kind");
    let t = build_tables(spec, spec.n_modes + 2)?;
    Ok(assemble_mass_from_tables(&t))
}

pub fn assemble_mass_from_tables(tables: &BasisTables) -> MassMatrix {
    let n = tables.spec.n_modes;
    let mut b = Array2::zeros((n, n));
    for l in 0..n {
        for m in l..n {
            let v: f64 = tables
                .quadrature
                .weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * tables.values[[l, j]] * tables.values[[m, j]])
                .sum();
            b[[l, m]] = v;
            b[[m, l]] = v;
        }
    }
    MassMatrix { entries: b, basis: tables.spec }
}

/// Closed-form Dirichlet mass entry (c_l = 1/sqrt(4l+6); pentadiagonal with
/// the coupling on the larger index).
pub fn dirichlet_mass_closed_form(l: usize, m: usize) -> f64 {
    let c = |n: usize| 1.0 / ((4 * n + 6) as f64).sqrt();
    if l == m {
        c(l) * c(l) * (2.0 / (2 * l + 1) as f64 + 2.0 / (2 * l + 5) as f64)
    } else if l + 2 == m || m + 2 == l {
        let hi = l.max(m);
        -c(l) * c(m) * 2.0 / (2 * hi + 1) as f64
    } else {
        0.0
    }
}

/// Assembles the stiffness matrix int psi'_l psi'_m dx by quadrature.
///
/// For the Dirichlet normalization this is the identity; for Neumann it is
/// the identity on modes 1.. with a zero row/column for the constant mode
/// (verified by the tests rather than assumed).
pub fn assemble_stiffness(spec: BasisSpec) -> Result<Array2<f64>, Error> {
    assert!(spec.kind.is_legendre(), "stiffness assembly needs a Legendre kind");
    let t = build_tables(spec, spec.n_modes + 2)?;
    let n = spec.n_modes;
    let mut s = Array2::zeros((n, n));
    for l in 0..n {
        for m in l..n {
            let v: f64 = t
                .quadrature
                .weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * t.derivatives[[l, j]] * t.derivatives[[m, j]])
                .sum();
            s[[l, m]] = v;
            s[[m, l]] = v;
        }
    }
    Ok(s)
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

/// One preconditioned 1-D system C A C (A SPD), factorized once.
#[derive(Debug, Clone)]
struct PrecondSystem {
    /// Diagonal of C: 1/sqrt(diag(A)).
    c: DVector<f64>,
    /// C A C (unit diagonal by construction).
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl PrecondSystem {
    fn new(a: DMatrix<f64>) -> Result<Self, Error> {
        let n = a.nrows();
        let mut c = DVector::zeros(n);
        for i in 0..n {
            let d = a[(i, i)];
            if d <= 0.0 {
                return Err(Error::Numerical(format!(
                    "non-positive diagonal {d:e} in preconditioned system"
                )));
            }
            c[i] = 1.0 / d.sqrt();
        }
        let mut m = a;
        for r in 0..n {
            for cc in 0..n {
                m[(r, cc)] *= c[r] * c[cc];
            }
        }
        let chol = Cholesky::new(m.clone()).ok_or_else(|| {
            Error::Numerical("Cholesky factorization of preconditioned system failed".into())
        })?;
        Ok(Self { c, matrix: m, chol })
    }
}

/// Layout of the per-eigenvalue systems of one Legendre Helmholtz operator.
///
/// 2D: the rhs is transformed along axis 0 (G = E^T F); row p solves
/// ((tau l_p + nu) B + nu l_p I) v_p = g_p over the axis-1 coefficients.
/// 3D: axes 0 and 1 are transformed; the pair (j, k) solves
/// ((tau l_j l_k + nu l_j + nu l_k) B + nu l_j l_k I) v = g over axis 2.
#[derive(Debug, Clone)]
pub struct HelmholtzOperator {
    pub tau: f64,
    pub nu: f64,
    pub basis: BasisSpec,
    pub dim: usize,
    pub eigvals: Vec<f64>,
    /// Orthonormal eigenvectors of B, one per column.
    pub eigvecs: Array2<f64>,
    /// E^T, cached for the forward transform.
    eigvecs_t: Array2<f64>,
    systems: Vec<PrecondSystem>,
    /// Active mode count per axis (N, or N-1 for the Neumann basis).
    pub n_active: usize,
}

impl HelmholtzOperator {
    /// Builds the cached eigendecomposition and all per-eigenvalue
    /// preconditioned factorizations for a fixed (tau, nu).
    pub fn build(tau: f64, nu: f64, spec: BasisSpec, dim: usize) -> Result<Self, Error> {
        assert!(spec.kind.is_legendre(), "Fourier axes use solve_fourier");
        assert!(tau >= 0.0 && nu > 0.0, "need tau >= 0 and nu > 0");
        assert!((2..=3).contains(&dim), "dim must be 2 or 3");
        let mass = assemble_mass(spec)?;
        let b = to_nalgebra(&mass.active());
        let n = b.nrows();
        let eig = b.clone().symmetric_eigen();
        // Sort eigenpairs ascending and fix each vector's sign for
        // reproducible reconstructions.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let mut eigvals = Vec::with_capacity(n);
        let mut evecs = Array2::zeros((n, n));
        for (col, &src) in order.iter().enumerate() {
            let lam = eig.eigenvalues[src];
            if lam <= 0.0 {
                return Err(Error::Numerical(format!(
                    "mass matrix not positive definite: eigenvalue {lam:e}"
                )));
            }
            eigvals.push(lam);
            let v = eig.eigenvectors.column(src);
            let lead = v.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            let sign = if lead < 0.0 { -1.0 } else { 1.0 };
            for r in 0..n {
                evecs[[r, col]] = sign * v[r];
            }
        }
        let mut systems = Vec::new();
        match dim {
            2 => {
                for &lp in &eigvals {
                    systems.push(PrecondSystem::new(helmholtz_matrix(&b, tau, nu, lp))?);
                }
            }
            3 => {
                for &lj in &eigvals {
                    for &lk in &eigvals {
                        // tau' = tau l_j l_k + nu l_j + nu l_k, nu' = nu l_j l_k.
                        let mut a = b.clone() * (tau * lj * lk + nu * lj + nu * lk);
                        for i in 0..n {
                            a[(i, i)] += nu * lj * lk;
                        }
                        systems.push(PrecondSystem::new(a)?);
                    }
                }
            }
            _ => unreachable!(),
        }
        let eigvecs_t = evecs.t().to_owned();
        Ok(Self {
            tau,
            nu,
            basis: spec,
            dim,
            eigvals,
            eigvecs: evecs,
            eigvecs_t,

            systems,
            n_active: n,
        })
    }

    fn system(&self, idx: &[usize]) -> &PrecondSystem {
        match self.dim {
            2 => &self.systems[idx[0]],
            3 => &self.systems[idx[0] * self.n_active + idx[1]],
            _ => unreachable!(),
        }
    }

    /// Shape of the active coefficient block.
    pub fn active_shape(&self) -> Vec<usize> {
        vec![self.n_active; self.dim]
    }

    /// Transforms a projected right-hand side F into the preconditioned
    /// blocks h: G = E^T-contraction along the first dim-1 axes, then
    /// h = C g per system.
    pub fn transform_rhs(&self, f_proj: &ArrayD<f64>) -> ArrayD<f64> {
        assert_eq!(f_proj.shape(), self.active_shape().as_slice(), "rhs shape mismatch");
        let mut g = f_proj.clone();
        for ax in 0..self.dim - 1 {
            g = apply_axis_real(&g, &self.eigvecs_t, ax);
        }
        self.for_each_lane(&g, |sys, lane| {
            for i in 0..lane.len() {
                lane[i] *= sys.c[i];
            }
        })
    }

    /// Per-system residual r = C A C w - h and the total squared norm.
    pub fn residual(&self, w: &ArrayD<f64>, h: &ArrayD<f64>) -> (ArrayD<f64>, f64) {
        assert_eq!(w.shape(), h.shape(), "shape mismatch");
        let mut out = self.apply_precond_systems(w);
        out -= h;
        let norm_sq = out.iter().map(|v| v * v).sum();
        (out, norm_sq)
    }

    /// Applies the block-diagonal preconditioned matrix: (C A C) w per lane.
    ///
    /// The operator is symmetric, so the loss gradient with respect to w is
    /// 2 * apply_precond_systems(residual).
    pub fn apply_precond_systems(&self, w: &ArrayD<f64>) -> ArrayD<f64> {
        assert_eq!(w.shape(), self.active_shape().as_slice(), "shape mismatch");
        self.for_each_lane(w, |sys, lane| {
            let v = DVector::from_column_slice(lane);
            let out = &sys.matrix * v;
            lane.copy_from_slice(out.as_slice());
        })
    }

    /// Exact solve of every preconditioned 1-D system: w = (C A C)^{-1} h.
    pub fn solve_w(&self, h: &ArrayD<f64>) -> ArrayD<f64> {
        self.for_each_lane(h, |sys, lane| {
            let v = DVector::from_column_slice(lane);
            let out = sys.chol.solve(&v);
            lane.copy_from_slice(out.as_slice());
        })
    }

    /// Reconstructs physical coefficients alpha from w: v = C w per lane,
    /// then the E-contraction along the transformed axes.
    pub fn w_to_alpha(&self, w: &ArrayD<f64>) -> ArrayD<f64> {
        let mut v = self.for_each_lane(w, |sys, lane| {
            for i in 0..lane.len() {
                lane[i] *= sys.c[i];
            }
        });
        for ax in 0..self.dim - 1 {
            v = apply_axis_real(&v, &self.eigvecs, ax);
        }
        v
    }

    /// Full classical-solver path: projected rhs -> coefficients.
    pub fn solve_projected(&self, f_proj: &ArrayD<f64>) -> ArrayD<f64> {
        let h = self.transform_rhs(f_proj);
        let w = self.solve_w(&h);
        self.w_to_alpha(&w)
    }

    /// Runs `f` on every lane along the last axis with its system.
    fn for_each_lane(
        &self,
        a: &ArrayD<f64>,
        f: impl Fn(&PrecondSystem, &mut [f64]),
    ) -> ArrayD<f64> {
        let mut out = a.clone();
        let n = self.n_active;
        match self.dim {
            2 => {
                let mut buf = vec![0.0; n];
                for p in 0..n {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b = out[[p, i]];
                    }
                    f(self.system(&[p]), &mut buf);
                    for (i, b) in buf.iter().enumerate() {
                        out[[p, i]] = *b;
                    }
                }
            }
            3 => {
                let mut buf = vec![0.0; n];
                for j in 0..n {
                    for k in 0..n {
                        for (i, b) in buf.iter_mut().enumerate() {
                            *b = out[[j, k, i]];
                        }
                        f(self.system(&[j, k]), &mut buf);
                        for (i, b) in buf.iter().enumerate() {
                            out[[j, k, i]] = *b;
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        out
    }

    /// Condition number of the preconditioned system for eigen index `idx`,
    /// paired with the unpreconditioned one (diagnostics/tests).
    pub fn condition_numbers(&self, idx: &[usize]) -> (f64, f64) {
        let sys = self.system(idx);
        let cond = |m: &DMatrix<f64>| {
            let eig = m.clone().symmetric_eigen();
            let mut lo = f64::INFINITY;
            let mut hi = 0.0f64;
            for &l in eig.eigenvalues.iter() {
                lo = lo.min(l.abs());
                hi = hi.max(l.abs());
            }
            hi / lo
        };
        // Reconstruct A = C^{-1} (C A C) C^{-1}.
        let n = sys.c.len();
        let mut a = sys.matrix.clone();
        for r in 0..n {
            for c in 0..n {
                a[(r, c)] /= sys.c[r] * sys.c[c];
            }
        }
        (cond(&sys.matrix), cond(&a))
    }
}

fn helmholtz_matrix(b: &DMatrix<f64>, tau: f64, nu: f64, lambda: f64) -> DMatrix<f64> {
    let n = b.nrows();
    let mut a = b.clone() * (tau * lambda + nu);
    for i in 0..n {
        a[(i, i)] += nu * lambda;
    }
    a
}

/// Case tag of a residual system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemCase {
    Legendre2D,
    Legendre3D,
    Fourier2D,
    Fourier3D,
}

/// A Helmholtz problem instance: the cached operator plus one transformed
/// right-hand side.
#[derive(Debug)]
pub struct ResidualSystem<'a> {
    pub case: SystemCase,
    pub operator: &'a HelmholtzOperator,
    /// Preconditioned blocks h = C E^T F.
    pub rhs: ArrayD<f64>,
}

impl<'a> ResidualSystem<'a> {
    pub fn new(operator: &'a HelmholtzOperator, f_proj: &ArrayD<f64>) -> Self {
        let case = if operator.dim == 2 { SystemCase::Legendre2D } else { SystemCase::Legendre3D };
        let rhs = operator.transform_rhs(f_proj);
        Self { case, operator, rhs }
    }

    pub fn residual(&self, w: &ArrayD<f64>) -> (ArrayD<f64>, f64) {
        self.operator.residual(w, &self.rhs)
    }

    pub fn solve_direct(&self) -> ArrayD<f64> {
        let w = self.operator.solve_w(&self.rhs);
        self.operator.w_to_alpha(&w)
    }
}

/// Diagonal Fourier Helmholtz solve: alpha_xi = F_xi(f) / (tau + nu |xi|^2),
/// with the zero mode pinned when tau = 0 (zero-mean gauge).
pub fn solve_fourier(
    tau: f64,
    nu: f64,
    f_hat: &ArrayD<Complex64>,
    axes: &[BasisSpec],
) -> Result<ArrayD<Complex64>, Error> {
    for a in axes {
        assert_eq!(a.kind, BasisKind::Fourier, "solve_fourier needs Fourier axes");
    }
    let mut out = f_hat.clone();
    if tau == 0.0 {
        let zero: Vec<usize> = axes.iter().map(|a| a.zero_mode()).collect();
        let f0 = f_hat[IxDyn(&zero)].norm();
        let scale = f_hat.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if f0 > 1e-8 * scale.max(1e-300) {
            return Err(Error::Compatibility { mean: f0, limit: 1e-8 * scale });
        }
    }
    for (idx, v) in out.indexed_iter_mut() {
        let mut xi_sq = 0.0;
        for (ax, spec) in axes.iter().enumerate() {
            let xi = spec.wave_number(idx[ax]) as f64;
            xi_sq += xi * xi;
        }
        let denom = tau + nu * xi_sq;
        if denom == 0.0 {
            *v = Complex64::new(0.0, 0.0);
        } else {
            *v /= denom;
        }
    }
    Ok(out)
}

/// Per-mode Fourier Helmholtz residual (tau + nu |xi|^2) alpha - F and its
/// squared norm; when tau = 0 the zero-mode row is excluded (gauge).
pub fn fourier_residual(
    tau: f64,
    nu: f64,
    alpha: &ArrayD<Complex64>,
    f_hat: &ArrayD<Complex64>,
    axes: &[BasisSpec],
) -> (ArrayD<Complex64>, f64) {
    assert_eq!(alpha.shape(), f_hat.shape(), "shape mismatch");
    let mut r = ArrayD::zeros(alpha.raw_dim());
    let mut norm_sq = 0.0;
    for (idx, out) in r.indexed_iter_mut() {
        let mut xi_sq = 0.0;
        let mut is_zero_mode = true;
        for (ax, spec) in axes.iter().enumerate() {
            let xi = spec.wave_number(idx[ax]) as f64;
            xi_sq += xi * xi;
            is_zero_mode &= xi == 0.0;
        }
        if tau == 0.0 && is_zero_mode {
            continue;
        }
        let v = (tau + nu * xi_sq) * alpha[&idx] - f_hat[&idx];
        norm_sq += v.norm_sqr();
        *out = v;
    }
    (r, norm_sq)
}

/// Poisson solver in the Neumann basis with the constant mode pinned.
///
/// The constant mode decouples from the active block (its stiffness row is
/// zero and its mass row is 2 e_0), so the full N^d system splits by the
/// set Z of axes held at the constant mode: the |Z| = 0 core is the usual
/// diagonalized system, each |Z| = z < d face is a (d-z)-dimensional system
/// with viscosity nu 2^z, and the all-constant mode is the gauge (pinned to
/// zero, with its right-hand side required to vanish).
#[derive(Debug)]
pub struct NeumannPoisson {
    pub nu: f64,
    pub spec: BasisSpec,
    pub dim: usize,
    /// Operators for sub-dimensions >= 2, indexed by z = number of pinned
    /// axes; ops[z] has dim - z axes and viscosity nu 2^z.
    ops: Vec<HelmholtzOperator>,
    /// Relative tolerance of the compatibility check.
    pub compat_tol: f64,
}

/// Enumerated faces of the coefficient tensor, by pinned-axis subset.
fn subsets(dim: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..(1 << dim) {
        let z: Vec<usize> = (0..dim).filter(|ax| mask & (1 << ax) != 0).collect();
        out.push(z);
    }
    out.sort_by_key(|z| (z.len(), z.clone()));
    out
}

impl NeumannPoisson {
    pub fn build(nu: f64, spec: BasisSpec, dim: usize) -> Result<Self, Error> {
        assert_eq!(spec.kind, BasisKind::LegendreNeumann, "Neumann basis expected");
        let mut ops = Vec::new();
        for z in 0..dim {
            let sub_dim = dim - z;
            if sub_dim >= 2 {
                ops.push(HelmholtzOperator::build(0.0, nu * (1 << z) as f64, spec, sub_dim)?);
            }
        }
        Ok(Self { nu, spec, dim, ops, compat_tol: 1e-8 })
    }

    pub fn n_modes(&self) -> usize {
        self.spec.n_modes
    }

    fn full_shape(&self) -> Vec<usize> {
        vec![self.spec.n_modes; self.dim]
    }

    /// Checks that the all-constant row of the projected rhs vanishes.
    pub fn check_compatibility(&self, f_proj: &ArrayD<f64>) -> Result<(), Error> {
        let zero = vec![0usize; self.dim];
        let f0 = f_proj[IxDyn(&zero)].abs();
        let scale = f_proj.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if f0 > self.compat_tol * scale.max(1e-300) {
            return Err(Error::Compatibility { mean: f0, limit: self.compat_tol * scale });
        }
        Ok(())
    }

    /// Extracts the face of `a` with the axes in `z` pinned to index 0 and
    /// the others restricted to modes 1.. .
    fn face(&self, a: &ArrayD<f64>, z: &[usize]) -> ArrayD<f64> {
        let n = self.spec.n_modes;
        let free: Vec<usize> = (0..self.dim).filter(|ax| !z.contains(ax)).collect();
        let shape: Vec<usize> = free.iter().map(|_| n - 1).collect();
        ArrayD::from_shape_fn(IxDyn(&shape), |idx| {
            let mut full = vec![0usize; self.dim];
            for (i, &ax) in free.iter().enumerate() {
                full[ax] = idx[i] + 1;
            }
            a[IxDyn(&full)]
        })
    }

    fn write_face(&self, out: &mut ArrayD<f64>, z: &[usize], face: &ArrayD<f64>) {
        let free: Vec<usize> = (0..self.dim).filter(|ax| !z.contains(ax)).collect();
        for (idx, &v) in face.indexed_iter() {
            let mut full = vec![0usize; self.dim];
            for (i, &ax) in free.iter().enumerate() {
                full[ax] = idx[i] + 1;
            }
            out[IxDyn(&full)] = v;
        }
    }

    /// Direct solve: projected rhs (full N^d layout, constant modes
    /// included) to Neumann-basis coefficients with the gauge pinned.
    pub fn solve_projected(&self, f_proj: &ArrayD<f64>) -> Result<ArrayD<f64>, Error> {
        assert_eq!(f_proj.shape(), self.full_shape().as_slice(), "rhs shape mismatch");
        self.check_compatibility(f_proj)?;
        let mut out = ArrayD::zeros(IxDyn(&self.full_shape()));
        for z in subsets(self.dim) {
            let zl = z.len();
            if zl == self.dim {
                continue; // gauge: coefficient stays zero
            }
            let rhs = self.face(f_proj, &z);
            let sub_dim = self.dim - zl;
            let alpha = if sub_dim == 1 {
                // 1-D active system: nu_z * I (stiffness identity).
                let nu_z = self.nu * (1 << zl) as f64;
                rhs.mapv(|v| v / nu_z)
            } else {
                self.ops[zl].solve_projected(&rhs)
            };
            self.write_face(&mut out, &z, &alpha);
        }
        Ok(out)
    }

    /// Flattened length of the preconditioned unknown vector (gauge
    /// excluded): N^d - 1.
    pub fn w_len(&self) -> usize {
        self.spec.n_modes.pow(self.dim as u32) - 1
    }

    /// Splits a packed w vector into per-face blocks following the
    /// canonical subset order.
    fn face_ranges(&self) -> Vec<(Vec<usize>, std::ops::Range<usize>)> {
        let n = self.spec.n_modes;
        let mut out = Vec::new();
        let mut at = 0;
        for z in subsets(self.dim) {
            if z.len() == self.dim {
                continue;
            }
            let len = (n - 1).pow((self.dim - z.len()) as u32);
            out.push((z, at..at + len));
            at += len;
        }
        out
    }

    /// Residual of the packed preconditioned unknowns against a projected
    /// rhs; returns (residual vector, squared norm).
    pub fn residual(&self, w: &[f64], f_proj: &ArrayD<f64>) -> (Vec<f64>, f64) {
        assert_eq!(w.len(), self.w_len(), "shape mismatch");
        let mut r = vec![0.0; w.len()];
        let mut norm_sq = 0.0;
        for (z, range) in self.face_ranges() {
            let zl = z.len();
            let rhs = self.face(f_proj, &z);
            let sub_dim = self.dim - zl;
            if sub_dim == 1 {
                let nu_z = self.nu * (1 << zl) as f64;
                let s = nu_z.sqrt();
                // Scalar systems a*alpha = F with C = 1/sqrt(a):
                // r = w - F/sqrt(a).
                for (i, slot) in range.clone().enumerate() {
                    let v = w[slot] - rhs.as_slice().unwrap()[i] / s;
                    r[slot] = v;
                    norm_sq += v * v;
                }
            } else {
                let op = &self.ops[zl];
                let shape = op.active_shape();
                let wf = ArrayD::from_shape_vec(IxDyn(&shape), w[range.clone()].to_vec()).unwrap();
                let h = op.transform_rhs(&rhs);
                let (rf, ns) = op.residual(&wf, &h);
                norm_sq += ns;
                r[range].copy_from_slice(rf.as_slice().unwrap());
            }
        }
        (r, norm_sq)
    }

    /// Gradient of the squared residual norm with respect to w: 2 M^T r
    /// with M the block-diagonal preconditioned matrix (symmetric).
    pub fn residual_gradient(&self, r: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; r.len()];
        for (z, range) in self.face_ranges() {
            let zl = z.len();
            let sub_dim = self.dim - zl;
            if sub_dim == 1 {
                for slot in range {
                    g[slot] = 2.0 * r[slot];
                }
            } else {
                let op = &self.ops[zl];
                let shape = op.active_shape();
                let rf = ArrayD::from_shape_vec(IxDyn(&shape), r[range.clone()].to_vec()).unwrap();
                let gf = op.apply_precond_systems(&rf);
                for (i, slot) in range.enumerate() {
                    g[slot] = 2.0 * gf.as_slice().unwrap()[i];
                }
            }
        }
        g
    }

    /// Reconstructs full-layout coefficients from packed w (gauge zero).
    pub fn w_to_coeffs(&self, w: &[f64]) -> ArrayD<f64> {
        assert_eq!(w.len(), self.w_len(), "shape mismatch");
        let mut out = ArrayD::zeros(IxDyn(&self.full_shape()));
        for (z, range) in self.face_ranges() {
            let zl = z.len();
            let sub_dim = self.dim - zl;
            let alpha = if sub_dim == 1 {
                let nu_z = self.nu * (1 << zl) as f64;
                let s = 1.0 / nu_z.sqrt();
                let shape = vec![self.spec.n_modes - 1];
                ArrayD::from_shape_vec(
                    IxDyn(&shape),
                    w[range.clone()].iter().map(|v| v * s).collect(),
                )
                .unwrap()
            } else {
                let op = &self.ops[zl];
                let shape = op.active_shape();
                let wf = ArrayD::from_shape_vec(IxDyn(&shape), w[range.clone()].to_vec()).unwrap();
                op.w_to_alpha(&wf)
            };
            self.write_face(&mut out, &z, &alpha);
        }
        out
    }

    /// Packs full-layout coefficients into w coordinates (inverse of
    /// `w_to_coeffs` on the pinned-gauge subspace).
    pub fn coeffs_to_w(&self, alpha: &ArrayD<f64>) -> Vec<f64> {
        let mut w = vec![0.0; self.w_len()];
        for (z, range) in self.face_ranges() {
            let zl = z.len();
            let sub_dim = self.dim - zl;
            let face = self.face(alpha, &z);
            if sub_dim == 1 {
                let nu_z = self.nu * (1 << zl) as f64;
                let s = nu_z.sqrt();
                for (i, slot) in range.clone().enumerate() {
                    w[slot] = face.as_slice().unwrap()[i] * s;
                }
            } else {
                let op = &self.ops[zl];
                // w = C^{-1} E^T alpha per lane.
                let mut v = face.clone();
                for ax in 0..op.dim - 1 {
                    v = apply_axis_real(&v, &op.eigvecs_t, ax);
                }
                let packed = op.for_each_lane(&v, |sys, lane| {
                    for i in 0..lane.len() {
                        lane[i] /= sys.c[i];
                    }
                });
                w[range].copy_from_slice(packed.as_slice().unwrap());
            }
        }
        w
    }
}

/// L2 projection onto the spectral basis: solves B alpha B ... = project_rhs
/// along every axis using cached mass factorizations.
#[derive(Debug)]
pub struct MassProjector {
    chols: Vec<Cholesky<f64, Dyn>>,
    specs: Vec<BasisSpec>,
}

impl MassProjector {
    pub fn new(tables: &[BasisTables]) -> Result<Self, Error> {
        let mut chols = Vec::new();
        let mut specs = Vec::new();
        for t in tables {
            assert!(t.spec.kind.is_legendre(), "Fourier axes need no mass projection");
            let b = to_nalgebra(&assemble_mass_from_tables(t).entries);
            let chol = Cholesky::new(b)
                .ok_or_else(|| Error::Numerical("mass matrix factorization failed".into()))?;
            chols.push(chol);
            specs.push(t.spec);
        }
        Ok(Self { chols, specs })
    }

    /// Coefficients of the L2 projection of nodal data (full layout; the
    /// Neumann constant mode is retained).
    pub fn project_nodal(&self, nodal: &ArrayD<f64>, tables: &[BasisTables]) -> ArrayD<f64> {
        let rhs = crate::basis::project_rhs(nodal, tables);
        self.solve_mass(&rhs)
    }

    /// Applies B^{-1} along every axis of a projected rhs.
    pub fn solve_mass(&self, rhs: &ArrayD<f64>) -> ArrayD<f64> {
        let mut cur = rhs.clone();
        for (ax, chol) in self.chols.iter().enumerate() {
            let n = self.specs[ax].n_modes;
            let mut out = cur.clone();
            for (mut ol, il) in out
                .lanes_mut(ndarray::Axis(ax))
                .into_iter()
                .zip(cur.lanes(ndarray::Axis(ax)).into_iter())
            {
                let v = DVector::from_fn(n, |i, _| il[i]);
                let s = chol.solve(&v);
                for i in 0..n {
                    ol[i] = s[i];
                }
            }
            cur = out;
        }
        cur
    }
}

/// Helper: wraps real Legendre coefficients as a scalar field.
pub fn scalar_field(axes: Vec<BasisSpec>, coeffs: ArrayD<f64>) -> SpectralField {
    SpectralField { axes, components: vec![Coeffs::Real(coeffs)] }
}
