//! Spectral basis families, Gauss-Lobatto-Legendre quadrature, and
//! nodal/spectral transforms.
//!
//! Two Legendre-composite families (boundary conditions built into the basis)
//! and the periodic Fourier family are supported:
//!
//! * `LegendreDirichlet`: psi_n = (L_n - L_{n+2}) / sqrt(4n+6), zero at x = +-1.
//! * `LegendreNeumann`:   psi_n = (L_n - b_n L_{n+2}) / sqrt(b_n (4n+6)) with
//!   b_n = n(n+1)/((n+2)(n+3)); zero slope at x = +-1. The n = 0 normalization
//!   is singular (b_0 = 0), so the constant mode is kept unnormalized as L_0
//!   and its coefficient is pinned to zero wherever a Poisson gauge is needed.
//! * `Fourier`: psi_xi = e^{i xi x} / (2 pi) on [0, 2 pi), wave numbers
//!   xi = -N/2+1 ... N/2.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use num_complex::Complex64;

use crate::error::Error;

/// Basis family of one spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisKind {
    LegendreDirichlet,
    LegendreNeumann,
    Fourier,
}

impl BasisKind {
    pub fn is_legendre(self) -> bool {
        !matches!(self, BasisKind::Fourier)
    }
}

/// One spatial axis: basis family plus resolution.
///
/// Legendre kinds live on [-1, 1]; Fourier lives on [0, 2 pi).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub n_modes: usize,
}

impl BasisSpec {
    pub fn legendre_dirichlet(n_modes: usize) -> Self {
        assert!(n_modes >= 1, "need at least one mode");
        Self { kind: BasisKind::LegendreDirichlet, n_modes }
    }

    pub fn legendre_neumann(n_modes: usize) -> Self {
        assert!(n_modes >= 1, "need at least one mode");
        Self { kind: BasisKind::LegendreNeumann, n_modes }
    }

    pub fn fourier(n_modes: usize) -> Self {
        assert!(n_modes >= 2 && n_modes % 2 == 0, "Fourier needs an even mode count");
        Self { kind: BasisKind::Fourier, n_modes }
    }

    /// Interval covered by the axis.
    pub fn interval(&self) -> (f64, f64) {
        match self.kind {
            BasisKind::Fourier => (0.0, std::f64::consts::TAU),
            _ => (-1.0, 1.0),
        }
    }

    /// Wave number of mode index l (Fourier only): xi_l = -N/2+1+l.
    pub fn wave_number(&self, l: usize) -> i64 {
        debug_assert_eq!(self.kind, BasisKind::Fourier);
        -(self.n_modes as i64) / 2 + 1 + l as i64
    }

    /// Mode index of the zero wave number (Fourier only).
    pub fn zero_mode(&self) -> usize {
        debug_assert_eq!(self.kind, BasisKind::Fourier);
        self.n_modes / 2 - 1
    }

    /// Index of the conjugate partner of mode l under xi -> -xi.
    ///
    /// The top mode xi = N/2 aliases to -N/2 on the grid and is its own
    /// partner.
    pub fn conjugate_mode(&self, l: usize) -> usize {
        debug_assert_eq!(self.kind, BasisKind::Fourier);
        if l == self.n_modes - 1 {
            l
        } else {
            self.n_modes - 2 - l
        }
    }
}

/// Gauss-Lobatto-Legendre quadrature on [-1, 1] (exact to degree 2P-3),
/// or the trapezoidal/equispaced rule on [0, 2 pi) for Fourier axes.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn point_count(&self) -> usize {
        self.nodes.len()
    }

    /// Quadrature of nodal samples taken on this rule's grid.
    pub fn integrate(&self, samples: &[f64]) -> f64 {
        assert_eq!(samples.len(), self.nodes.len(), "grid mismatch");
        self.weights.iter().zip(samples).map(|(w, f)| w * f).sum()
    }
}

/// Evaluates L_0..L_{n_max} at x by the three-term recurrence.
pub fn legendre_values(n_max: usize, x: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(n_max + 1);
    v.push(1.0);
    if n_max == 0 {
        return v;
    }
    v.push(x);
    for n in 1..n_max {
        let nf = n as f64;
        let next = ((2.0 * nf + 1.0) * x * v[n] - nf * v[n - 1]) / (nf + 1.0);
        v.push(next);
    }
    v
}

/// Evaluates L'_0..L'_{n_max} at x via L'_{n+1} = L'_{n-1} + (2n+1) L_n.
pub fn legendre_derivatives(n_max: usize, x: f64) -> Vec<f64> {
    let vals = legendre_values(n_max, x);
    let mut d = Vec::with_capacity(n_max + 1);
    d.push(0.0);
    if n_max == 0 {
        return d;
    }
    d.push(1.0);
    for n in 1..n_max {
        d.push(d[n - 1] + (2.0 * n as f64 + 1.0) * vals[n]);
    }
    d
}

/// Evaluates L''_0..L''_{n_max} at x via L''_{n+1} = L''_{n-1} + (2n+1) L'_n.
pub fn legendre_second_derivatives(n_max: usize, x: f64) -> Vec<f64> {
    let ders = legendre_derivatives(n_max, x);
    let mut d = Vec::with_capacity(n_max + 1);
    d.push(0.0);
    if n_max == 0 {
        return d;
    }
    d.push(0.0);
    for n in 1..n_max {
        d.push(d[n - 1] + (2.0 * n as f64 + 1.0) * ders[n]);
    }
    d
}

/// Gauss-Lobatto-Legendre rule with `point_count` points.
///
/// Nodes are the roots of (1 - x^2) L'_{P-1}; weights are
/// 2 / (P (P-1) L_{P-1}(x_j)^2).
pub fn gll_rule(point_count: usize) -> Result<QuadratureRule, Error> {
    assert!(point_count >= 2, "GLL needs at least two points");
    let p = point_count;
    let deg = p - 1;
    let mut nodes = vec![0.0; p];
    nodes[0] = -1.0;
    nodes[p - 1] = 1.0;
    for j in 1..p - 1 {
        // Chebyshev-Gauss-Lobatto point as the Newton start.
        let mut x = -(std::f64::consts::PI * j as f64 / deg as f64).cos();
        let mut converged = false;
        for _ in 0..100 {
            let vals = legendre_values(deg, x);
            let ders = legendre_derivatives(deg, x);
            // L''_{deg} from the Legendre ODE.
            let dd = (2.0 * x * ders[deg] - (deg * (deg + 1)) as f64 * vals[deg]) / (1.0 - x * x);
            let step = ders[deg] / dd;
            x -= step;
            if step.abs() < 1e-15 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical(format!(
                "GLL Newton iteration failed to converge for node {j} of {p}"
            )));
        }
        nodes[j] = x;
    }
    let pf = p as f64;
    let weights = nodes
        .iter()
        .map(|&x| {
            let l = legendre_values(deg, x)[deg];
            2.0 / (pf * (pf - 1.0) * l * l)
        })
        .collect();
    Ok(QuadratureRule { nodes, weights })
}

/// Neumann-basis coefficient b_n = n(n+1) / ((n+2)(n+3)).
pub fn neumann_b(n: usize) -> f64 {
    (n * (n + 1)) as f64 / ((n + 2) * (n + 3)) as f64
}

/// Composite-basis value and first two derivatives of mode n at x.
fn shen_value(kind: BasisKind, n: usize, x: f64) -> (f64, f64, f64) {
    let vals = legendre_values(n + 2, x);
    let ders = legendre_derivatives(n + 2, x);
    let der2 = legendre_second_derivatives(n + 2, x);
    match kind {
        BasisKind::LegendreDirichlet => {
            let c = 1.0 / ((4 * n + 6) as f64).sqrt();
            (
                c * (vals[n] - vals[n + 2]),
                c * (ders[n] - ders[n + 2]),
                c * (der2[n] - der2[n + 2]),
            )
        }
        BasisKind::LegendreNeumann => {
            if n == 0 {
                // Constant mode kept unnormalized; see module docs.
                (1.0, 0.0, 0.0)
            } else {
                let b = neumann_b(n);
                let c = 1.0 / (b * (4 * n + 6) as f64).sqrt();
                (
                    c * (vals[n] - b * vals[n + 2]),
                    c * (ders[n] - b * ders[n + 2]),
                    c * (der2[n] - b * der2[n + 2]),
                )
            }
        }
        BasisKind::Fourier => unreachable!("Fourier axes have no Shen tables"),
    }
}

/// Precomputed per-axis node values, derivatives, and quadrature.
///
/// Legendre kinds carry `values[mode][node]` and `derivatives[mode][node]`
/// on the GLL grid. Fourier axes carry the equispaced grid x_j = 2 pi j / N
/// and the forward/backward phase matrices used by the transforms.
#[derive(Debug, Clone)]
pub struct BasisTables {
    pub spec: BasisSpec,
    /// psi_n(x_j), modes x nodes (Legendre kinds; empty for Fourier).
    pub values: Array2<f64>,
    /// psi'_n(x_j), modes x nodes (Legendre kinds; empty for Fourier).
    pub derivatives: Array2<f64>,
    /// psi''_n(x_j), modes x nodes (Legendre kinds; empty for Fourier).
    pub second_derivatives: Array2<f64>,
    pub quadrature: QuadratureRule,
    /// h * e^{-i xi_l x_j}, modes x nodes (Fourier only).
    forward: Option<Array2<Complex64>>,
    /// e^{i xi_l x_j} / (2 pi), nodes x modes (Fourier only).
    backward: Option<Array2<Complex64>>,
}

impl BasisTables {
    pub fn point_count(&self) -> usize {
        self.quadrature.point_count()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.quadrature.nodes
    }

    fn forward(&self) -> &Array2<Complex64> {
        self.forward.as_ref().expect("Fourier axis expected")
    }

    fn backward(&self) -> &Array2<Complex64> {
        self.backward.as_ref().expect("Fourier axis expected")
    }
}

/// Builds the per-axis tables.
///
/// For Legendre kinds `quad_points` must be at least `n_modes + 2`, the
/// resolution used throughout this crate. Fourier axes default to the N
/// equispaced nodes; passing `quad_points > n_modes` builds an oversampled
/// grid for dealiased products (analysis is then exact on band-limited
/// data rather than an inverse of synthesis).
pub fn build_tables(spec: BasisSpec, quad_points: usize) -> Result<BasisTables, Error> {
    match spec.kind {
        BasisKind::Fourier => {
            let n = spec.n_modes;
            let points = quad_points.max(n);
            let h = std::f64::consts::TAU / points as f64;
            let nodes: Vec<f64> = (0..points).map(|j| h * j as f64).collect();
            let weights = vec![h; points];
            let mut forward = Array2::zeros((n, points));
            let mut backward = Array2::zeros((points, n));
            for l in 0..n {
                let xi = spec.wave_number(l) as f64;
                for (j, &x) in nodes.iter().enumerate() {
                    let phase = Complex64::new(0.0, xi * x);
                    forward[[l, j]] = h * (-phase).exp();
                    backward[[j, l]] = phase.exp() / std::f64::consts::TAU;
                }
            }
            Ok(BasisTables {
                spec,
                values: Array2::zeros((0, 0)),
                derivatives: Array2::zeros((0, 0)),
                second_derivatives: Array2::zeros((0, 0)),
                quadrature: QuadratureRule { nodes, weights },
                forward: Some(forward),
                backward: Some(backward),
            })
        }
        _ => {
            assert!(
                quad_points >= spec.n_modes + 2,
                "need at least n_modes + 2 quadrature points, got {quad_points} for N = {}",
                spec.n_modes
            );
            let quadrature = gll_rule(quad_points)?;
            let n = spec.n_modes;
            let mut values = Array2::zeros((n, quad_points));
            let mut derivatives = Array2::zeros((n, quad_points));
            let mut second_derivatives = Array2::zeros((n, quad_points));
            for (j, &x) in quadrature.nodes.iter().enumerate() {
                for m in 0..n {
                    let (v, d, dd) = shen_value(spec.kind, m, x);
                    values[[m, j]] = v;
                    derivatives[[m, j]] = d;
                    second_derivatives[[m, j]] = dd;
                }
            }
            Ok(BasisTables {
                spec,
                values,
                derivatives,
                second_derivatives,
                quadrature,
                forward: None,
                backward: None,
            })
        }
    }
}

/// Coefficient storage of one scalar field: real for Legendre bases,
/// complex for Fourier.
#[derive(Debug, Clone)]
pub enum Coeffs {
    Real(ArrayD<f64>),
    Complex(ArrayD<Complex64>),
}

impl Coeffs {
    pub fn zeros_like_axes(axes: &[BasisSpec]) -> Self {
        let shape: Vec<usize> = axes.iter().map(|a| a.n_modes).collect();
        if axes[0].kind == BasisKind::Fourier {
            Coeffs::Complex(ArrayD::zeros(IxDyn(&shape)))
        } else {
            Coeffs::Real(ArrayD::zeros(IxDyn(&shape)))
        }
    }

    pub fn as_real(&self) -> &ArrayD<f64> {
        match self {
            Coeffs::Real(a) => a,
            Coeffs::Complex(_) => panic!("expected real coefficients"),
        }
    }

    pub fn as_complex(&self) -> &ArrayD<Complex64> {
        match self {
            Coeffs::Complex(a) => a,
            Coeffs::Real(_) => panic!("expected complex coefficients"),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Coeffs::Real(a) => a.shape(),
            Coeffs::Complex(a) => a.shape(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        match self {
            Coeffs::Real(a) => Coeffs::Real(a * s),
            Coeffs::Complex(a) => Coeffs::Complex(a.mapv(|z| z * s)),
        }
    }

    pub fn add_scaled(&mut self, other: &Coeffs, s: f64) {
        match (self, other) {
            (Coeffs::Real(a), Coeffs::Real(b)) => *a += &(b * s),
            (Coeffs::Complex(a), Coeffs::Complex(b)) => *a += &b.mapv(|z| z * s),
            _ => panic!("mixed real/complex coefficients"),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        match self {
            Coeffs::Real(a) => a.iter().map(|v| v * v).sum(),
            Coeffs::Complex(a) => a.iter().map(|z| z.norm_sqr()).sum(),
        }
    }
}

/// A scalar or vector field in spectral form, tagged with its per-axis bases.
#[derive(Debug, Clone)]
pub struct SpectralField {
    pub axes: Vec<BasisSpec>,
    /// One entry per component (1 for scalars, dim for velocity fields).
    pub components: Vec<Coeffs>,
}

impl SpectralField {
    pub fn zeros(axes: Vec<BasisSpec>, components: usize) -> Self {
        let comps = (0..components).map(|_| Coeffs::zeros_like_axes(&axes)).collect();
        Self { axes, components: comps }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            axes: self.axes.clone(),
            components: self.components.iter().map(|c| c.scaled(s)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &SpectralField, s: f64) {
        assert_eq!(self.axes, other.axes, "axis mismatch");
        for (a, b) in self.components.iter_mut().zip(&other.components) {
            a.add_scaled(b, s);
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.components.iter().map(Coeffs::norm_sq).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|c| match c {
            Coeffs::Real(a) => a.iter().all(|v| v.is_finite()),
            Coeffs::Complex(a) => a.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        })
    }
}

/// Applies `m` (rows_out x len_axis) along one axis of a real array.
pub fn apply_axis_real(a: &ArrayD<f64>, m: &Array2<f64>, axis: usize) -> ArrayD<f64> {
    assert_eq!(a.len_of(Axis(axis)), m.ncols(), "axis/coefficient shape mismatch");
    let mut shape = a.shape().to_vec();
    shape[axis] = m.nrows();
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (mut ol, il) in out
        .lanes_mut(Axis(axis))
        .into_iter()
        .zip(a.lanes(Axis(axis)).into_iter())
    {
        for r in 0..m.nrows() {
            let mut s = 0.0;
            for c in 0..m.ncols() {
                s += m[[r, c]] * il[c];
            }
            ol[r] = s;
        }
    }
    out
}

/// Applies `m` (rows_out x len_axis) along one axis of a complex array.
pub fn apply_axis_complex(
    a: &ArrayD<Complex64>,
    m: &Array2<Complex64>,
    axis: usize,
) -> ArrayD<Complex64> {
    assert_eq!(a.len_of(Axis(axis)), m.ncols(), "axis/coefficient shape mismatch");
    let mut shape = a.shape().to_vec();
    shape[axis] = m.nrows();
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (mut ol, il) in out
        .lanes_mut(Axis(axis))
        .into_iter()
        .zip(a.lanes(Axis(axis)).into_iter())
    {
        for r in 0..m.nrows() {
            let mut s = Complex64::new(0.0, 0.0);
            for c in 0..m.ncols() {
                s += m[[r, c]] * il[c];
            }
            ol[r] = s;
        }
    }
    out
}

fn to_complex(a: &ArrayD<f64>) -> ArrayD<Complex64> {
    a.mapv(|v| Complex64::new(v, 0.0))
}

/// Synthesizes one coefficient array to nodal values.
///
/// `derivative_axis` requests the first derivative along that axis instead
/// of plain evaluation. Legendre synthesis contracts the value/derivative
/// tables per axis; Fourier synthesis is the inverse DFT with the
/// 1/(2 pi)^dim normalization (derivatives multiply by i xi, with the
/// unpaired top mode zeroed so real fields stay real).
pub fn synthesize_scalar(
    coeffs: &Coeffs,
    tables: &[BasisTables],
    derivative_axis: Option<usize>,
) -> ArrayD<f64> {
    let mut orders = vec![0u8; tables.len()];
    if let Some(ax) = derivative_axis {
        orders[ax] = 1;
    }
    synthesize_scalar_orders(coeffs, tables, &orders)
}

/// Synthesis with a per-axis derivative order (0, 1, or 2).
pub fn synthesize_scalar_orders(
    coeffs: &Coeffs,
    tables: &[BasisTables],
    orders: &[u8],
) -> ArrayD<f64> {
    assert_eq!(orders.len(), tables.len());
    match coeffs {
        Coeffs::Real(a) => {
            let mut cur = a.clone();
            for (ax, t) in tables.iter().enumerate() {
                let m = match orders[ax] {
                    0 => t.values.t().to_owned(),
                    1 => t.derivatives.t().to_owned(),
                    2 => t.second_derivatives.t().to_owned(),
                    o => panic!("unsupported derivative order {o}"),
                };
                cur = apply_axis_real(&cur, &m, ax);
            }
            cur
        }
        Coeffs::Complex(a) => {
            let mut cur = a.clone();
            for (ax, t) in tables.iter().enumerate() {
                for _ in 0..orders[ax] {
                    cur = fourier_derivative(&cur, &t.spec, ax);
                }
            }
            for (ax, t) in tables.iter().enumerate() {
                cur = apply_axis_complex(&cur, t.backward(), ax);
            }
            let max_im = cur.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
            let scale = cur.iter().map(|z| z.re.abs()).fold(1.0, f64::max);
            debug_assert!(
                max_im <= 1e-9 * scale,
                "synthesized Fourier field has imaginary part {max_im:e}"
            );
            cur.mapv(|z| z.re)
        }
    }
}

/// Multiplies coefficients by (i xi) along `axis`; the unpaired top mode
/// xi = N/2 is zeroed so differentiation preserves conjugate symmetry.
pub fn fourier_derivative(
    a: &ArrayD<Complex64>,
    spec: &BasisSpec,
    axis: usize,
) -> ArrayD<Complex64> {
    let n = spec.n_modes;
    let mut m = Array2::zeros((n, n));
    for l in 0..n - 1 {
        m[[l, l]] = Complex64::new(0.0, spec.wave_number(l) as f64);
    }
    apply_axis_complex(a, &m, axis)
}

/// Tensor-product evaluation of every component of `field` on the nodal grid.
pub fn synthesize(field: &SpectralField, tables: &[BasisTables]) -> Vec<ArrayD<f64>> {
    assert_eq!(field.axes.len(), tables.len(), "axis/coefficient shape mismatch");
    field
        .components
        .iter()
        .map(|c| synthesize_scalar(c, tables, None))
        .collect()
}

/// Discrete Fourier analysis F_xi(f) = h^dim sum_j f(x_j) e^{-i xi . x_j}.
pub fn analyze_fourier(nodal: &ArrayD<f64>, tables: &[BasisTables]) -> ArrayD<Complex64> {
    for t in tables {
        assert_eq!(t.spec.kind, BasisKind::Fourier, "non-Fourier axis");
    }
    let mut cur = to_complex(nodal);
    for (ax, t) in tables.iter().enumerate() {
        cur = apply_axis_complex(&cur, t.forward(), ax);
    }
    cur
}

/// Enforces alpha_{-xi} = conj(alpha_xi) in place (averaging partners) and
/// makes the self-paired top modes real.
pub fn enforce_conjugate_symmetry(a: &mut ArrayD<Complex64>, axes: &[BasisSpec]) {
    let shape: Vec<usize> = a.shape().to_vec();
    let orig = a.clone();
    for (idx, v) in a.indexed_iter_mut() {
        let mut partner = Vec::with_capacity(shape.len());
        for (ax, spec) in axes.iter().enumerate() {
            partner.push(spec.conjugate_mode(idx[ax]));
        }
        let other = orig[IxDyn(&partner)];
        *v = (*v + other.conj()) * 0.5;
    }
}

/// Quadrature of `nodal_f` against every test function:
/// out_{lm..} = sum_j w_j f(x_j) Psi_{lm..}(x_j) (Legendre axes only;
/// Fourier projection is `analyze_fourier`).
pub fn project_rhs(nodal_f: &ArrayD<f64>, tables: &[BasisTables]) -> ArrayD<f64> {
    let mut cur = nodal_f.clone();
    for (ax, t) in tables.iter().enumerate() {
        assert!(t.spec.kind.is_legendre(), "project_rhs needs Legendre axes");
        assert_eq!(cur.len_of(Axis(ax)), t.point_count(), "grid mismatch");
        // Row l of the projection matrix is w_j psi_l(x_j).
        let mut m = t.values.clone();
        for mut row in m.rows_mut() {
            for (j, w) in t.quadrature.weights.iter().enumerate() {
                row[j] *= w;
            }
        }
        cur = apply_axis_real(&cur, &m, ax);
    }
    cur
}

/// Same as `project_rhs` but tests against the derivative of the test
/// function along `axis` (for weak Laplacian terms).
pub fn project_rhs_derivative(
    nodal_f: &ArrayD<f64>,
    tables: &[BasisTables],
    axis: usize,
) -> ArrayD<f64> {
    let mut cur = nodal_f.clone();
    for (ax, t) in tables.iter().enumerate() {
        assert!(t.spec.kind.is_legendre(), "project_rhs needs Legendre axes");
        let base = if ax == axis { &t.derivatives } else { &t.values };
        let mut m = base.clone();
        for mut row in m.rows_mut() {
            for (j, w) in t.quadrature.weights.iter().enumerate() {
                row[j] *= w;
            }
        }
        cur = apply_axis_real(&cur, &m, ax);
    }
    cur
}
