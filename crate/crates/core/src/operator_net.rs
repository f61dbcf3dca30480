//! Coefficient-predicting operator networks and their weak-form residual
//! losses.
//!
//! Two sub-networks drive the data-free scheme. The intermediate-velocity
//! network maps time-dependent inputs through one shared convolution
//! (valid padding, stride 1) with a Swish activation into per-time-step
//! linear heads; its outputs are the preconditioned-diagonalized unknowns w
//! of the momentum Helmholtz system (Legendre cases) or complex spectral
//! coefficients stored as real/imaginary channel pairs (Fourier cases,
//! Hermitian by construction so synthesized fields are real). The per-step
//! correction networks map the divergence of the predicted intermediate
//! velocity to correction-variable coefficients with the constant mode
//! pinned.
//!
//! Losses are the same preconditioned residuals the classical solver drives
//! to zero; every residual is affine in the head output, so gradients are
//! assembled by the chain rule through the residual matrix, the linear
//! head, the Swish activation, and the convolution. No autodiff framework
//! is involved.

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;

use crate::basis::{BasisSpec, Coeffs, SpectralField};
use crate::error::Error;
use crate::galerkin::{HelmholtzOperator, NeumannPoisson};
use crate::rng::SplitMix64;

/// Swish activation y = x * sigmoid(x) and its derivative.
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Convolution geometry: valid padding, stride 1, cubic kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub input_shape: Vec<usize>,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, input_shape: Vec<usize>) -> Self {
        for &s in &input_shape {
            assert!(kernel <= s, "kernel {kernel} larger than grid extent {s}");
        }
        Self { in_channels, out_channels, kernel, input_shape }
    }

    /// Per-axis output extent: in - kernel + 1.
    pub fn output_shape(&self) -> Vec<usize> {
        self.input_shape.iter().map(|s| s - self.kernel + 1).collect()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Flattened feature length after the convolution.
    pub fn feature_len(&self) -> usize {
        self.out_channels * self.output_len()
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(self.input_shape.len() as u32)
    }

    fn strides(&self) -> Vec<usize> {
        let d = self.input_shape.len();
        let mut s = vec![1usize; d];
        for ax in (0..d.saturating_sub(1)).rev() {
            s[ax] = s[ax + 1] * self.input_shape[ax + 1];
        }
        s
    }

    /// Flat input offsets of every output position's corner and of every
    /// kernel element.
    fn plan(&self) -> (Vec<usize>, Vec<usize>) {
        let d = self.input_shape.len();
        let strides = self.strides();
        let flat_offsets = |extents: &[usize]| -> Vec<usize> {
            let total: usize = extents.iter().product();
            (0..total)
                .map(|flat| {
                    let mut rem = flat;
                    let mut base = 0;
                    for ax in (0..d).rev() {
                        base += (rem % extents[ax]) * strides[ax];
                        rem /= extents[ax];
                    }
                    base
                })
                .collect()
        };
        let positions = flat_offsets(&self.output_shape());
        let offsets = flat_offsets(&vec![self.kernel; d]);
        (positions, offsets)
    }
}

/// One convolution layer's parameters.
#[derive(Debug, Clone)]
pub struct ConvParams {
    /// kernel[oc][ic][element], flattened.
    pub kernel: Vec<f64>,
    /// bias[oc].
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn seeded(spec: &ConvSpec, rng: &mut SplitMix64) -> Self {
        let d = spec.input_shape.len();
        let fan_in = spec.in_channels * spec.kernel.pow(d as u32);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let kernel = (0..spec.kernel_len()).map(|_| rng.uniform(-scale, scale)).collect();
        let bias = vec![0.0; spec.out_channels];
        Self { kernel, bias }
    }

    pub fn zeros(spec: &ConvSpec) -> Self {
        Self { kernel: vec![0.0; spec.kernel_len()], bias: vec![0.0; spec.out_channels] }
    }
}

/// Forward pass of the convolution: returns the pre-activation z
/// (out_channels x output grid, flattened).
pub fn conv_forward(spec: &ConvSpec, params: &ConvParams, input: &[f64]) -> Vec<f64> {
    assert_eq!(input.len(), spec.in_channels * spec.input_len(), "shape mismatch");
    let (positions, offsets) = spec.plan();
    let ker = spec.kernel.pow(spec.input_shape.len() as u32);
    let in_len = spec.input_len();
    let out_len = spec.output_len();
    let mut z = vec![0.0; spec.out_channels * out_len];
    for oc in 0..spec.out_channels {
        let zc = &mut z[oc * out_len..(oc + 1) * out_len];
        zc.fill(params.bias[oc]);
        for ic in 0..spec.in_channels {
            let x = &input[ic * in_len..(ic + 1) * in_len];
            let kbase = (oc * spec.in_channels + ic) * ker;
            for (p, &base) in positions.iter().enumerate() {
                let mut acc = 0.0;
                for (e, &off) in offsets.iter().enumerate() {
                    acc += params.kernel[kbase + e] * x[base + off];
                }
                zc[p] += acc;
            }
        }
    }
    z
}

/// Accumulates kernel/bias gradients from the output gradient dz.
pub fn conv_backward(
    spec: &ConvSpec,
    input: &[f64],
    dz: &[f64],
    dkernel: &mut [f64],
    dbias: &mut [f64],
) {
    let (positions, offsets) = spec.plan();
    let ker = spec.kernel.pow(spec.input_shape.len() as u32);
    let in_len = spec.input_len();
    let out_len = spec.output_len();
    for oc in 0..spec.out_channels {
        let dzc = &dz[oc * out_len..(oc + 1) * out_len];
        dbias[oc] += dzc.iter().sum::<f64>();
        for ic in 0..spec.in_channels {
            let x = &input[ic * in_len..(ic + 1) * in_len];
            let kbase = (oc * spec.in_channels + ic) * ker;
            for (e, &off) in offsets.iter().enumerate() {
                let mut acc = 0.0;
                for (p, &base) in positions.iter().enumerate() {
                    acc += dzc[p] * x[base + off];
                }
                dkernel[kbase + e] += acc;
            }
        }
    }
}

/// Intermediate-velocity network: one shared convolution plus K stacked
/// per-time-step linear heads.
#[derive(Debug, Clone)]
pub struct NetParamsU {
    pub conv_spec: ConvSpec,
    pub conv: ConvParams,
    /// heads[k], row-major [feature_len x out_len].
    pub heads: Vec<Vec<f64>>,
    pub out_len: usize,
}

impl NetParamsU {
    pub fn seeded(conv_spec: ConvSpec, steps: usize, out_len: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let conv = ConvParams::seeded(&conv_spec, &mut rng);
        let feat = conv_spec.feature_len();
        let scale = 1.0 / (feat as f64).sqrt();
        let heads = (0..steps)
            .map(|_| (0..feat * out_len).map(|_| rng.uniform(-scale, scale)).collect())
            .collect();
        Self { conv_spec, conv, heads, out_len }
    }

    pub fn zeros(conv_spec: ConvSpec, steps: usize, out_len: usize) -> Self {
        let conv = ConvParams::zeros(&conv_spec);
        let feat = conv_spec.feature_len();
        let heads = (0..steps).map(|_| vec![0.0; feat * out_len]).collect();
        Self { conv_spec, conv, heads, out_len }
    }
}

/// Per-step correction network: a convolution (per step, or shared when
/// `shared_conv` is set) and one linear head per step.
#[derive(Debug, Clone)]
pub struct NetParamsPhi {
    pub conv_spec: ConvSpec,
    pub shared_conv: bool,
    /// One entry when shared, K entries otherwise.
    pub convs: Vec<ConvParams>,
    pub heads: Vec<Vec<f64>>,
    pub out_len: usize,
}

impl NetParamsPhi {
    pub fn seeded(
        conv_spec: ConvSpec,
        steps: usize,
        out_len: usize,
        shared_conv: bool,
        seed: u64,
    ) -> Self {
        let mut rng = SplitMix64::new(seed);
        let n_convs = if shared_conv { 1 } else { steps };
        let convs = (0..n_convs).map(|_| ConvParams::seeded(&conv_spec, &mut rng)).collect();
        let feat = conv_spec.feature_len();
        let scale = 1.0 / (feat as f64).sqrt();
        let heads = (0..steps)
            .map(|_| (0..feat * out_len).map(|_| rng.uniform(-scale, scale)).collect())
            .collect();
        Self { conv_spec, shared_conv, convs, heads, out_len }
    }

    pub fn conv_index(&self, step: usize) -> usize {
        if self.shared_conv {
            0
        } else {
            step
        }
    }
}

/// Forward pass shared by both networks: conv -> swish -> head k.
/// Returns (head output y, pre-activation z, activation a).
pub fn forward_head(
    conv_spec: &ConvSpec,
    conv: &ConvParams,
    head: &[f64],
    out_len: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let z = conv_forward(conv_spec, conv, input);
    let a: Vec<f64> = z.iter().map(|&v| swish(v)).collect();
    let feat = conv_spec.feature_len();
    assert_eq!(head.len(), feat * out_len, "head shape mismatch");
    let mut y = vec![0.0; out_len];
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &head[i * out_len..(i + 1) * out_len];
        for (j, &w) in row.iter().enumerate() {
            y[j] += ai * w;
        }
    }
    (y, z, a)
}

/// How a head output vector is interpreted, per case.
pub enum OutputMap<'a> {
    /// Preconditioned-diagonalized unknowns w per velocity component;
    /// physical coefficients are E C w.
    LegendreVelocity { op: &'a HelmholtzOperator, components: usize },
    /// Complex spectral coefficients per component as re/im pairs,
    /// symmetrized so nodal fields are real.
    FourierVelocity { axes: Vec<BasisSpec>, components: usize, tau: f64, nu: f64 },
    /// Packed Poisson unknowns with the gauge mode pinned to zero.
    NeumannPhi { poisson: &'a NeumannPoisson },
    /// Complex coefficients, symmetrized, zero mode pinned.
    FourierPhi { axes: Vec<BasisSpec> },
}

impl<'a> OutputMap<'a> {
    pub fn out_len(&self) -> usize {
        match self {
            OutputMap::LegendreVelocity { op, components } => {
                components * op.n_active.pow(op.dim as u32)
            }
            OutputMap::FourierVelocity { axes, components, .. } => {
                let m: usize = axes.iter().map(|a| a.n_modes).product();
                components * 2 * m
            }
            OutputMap::NeumannPhi { poisson } => poisson.w_len(),
            OutputMap::FourierPhi { axes } => 2 * axes.iter().map(|a| a.n_modes).product::<usize>(),
        }
    }

    fn mode_shape(axes: &[BasisSpec]) -> Vec<usize> {
        axes.iter().map(|a| a.n_modes).collect()
    }

    /// Complex array from a re/im slice, Hermitian-symmetrized; optionally
    /// pins the zero mode.
    fn decode_complex(y: &[f64], axes: &[BasisSpec], pin_zero: bool) -> ArrayD<Complex64> {
        let shape = Self::mode_shape(axes);
        let mut raw = ArrayD::zeros(IxDyn(&shape));
        for (flat, v) in raw.iter_mut().enumerate() {
            *v = Complex64::new(y[2 * flat], y[2 * flat + 1]);
        }
        let orig = raw.clone();
        for (idx, v) in raw.indexed_iter_mut() {
            let partner: Vec<usize> =
                axes.iter().enumerate().map(|(ax, a)| a.conjugate_mode(idx[ax])).collect();
            *v = (*v + orig[IxDyn(&partner)].conj()) * 0.5;
        }
        if pin_zero {
            let zero: Vec<usize> = axes.iter().map(|a| a.zero_mode()).collect();
            raw[IxDyn(&zero)] = Complex64::new(0.0, 0.0);
        }
        raw
    }

    /// Transpose of `decode_complex`: maps a gradient with respect to the
    /// symmetrized coefficients back to the raw re/im outputs.
    fn complex_grad_to_y(g: &ArrayD<Complex64>, axes: &[BasisSpec], pin_zero: bool, dy: &mut [f64]) {
        let zero: Vec<usize> = if pin_zero {
            axes.iter().map(|a| a.zero_mode()).collect()
        } else {
            Vec::new()
        };
        for (flat, (idx, _)) in g.indexed_iter().enumerate() {
            if pin_zero && (0..axes.len()).all(|ax| idx[ax] == zero[ax]) {
                dy[2 * flat] = 0.0;
                dy[2 * flat + 1] = 0.0;
                continue;
            }
            let partner: Vec<usize> =
                axes.iter().enumerate().map(|(ax, a)| a.conjugate_mode(idx[ax])).collect();
            let here = g[idx.clone()];
            let there = g[IxDyn(&partner)];
            dy[2 * flat] = (here.re + there.re) * 0.5;
            dy[2 * flat + 1] = (here.im - there.im) * 0.5;
        }
    }

    /// Reconstructs the physical spectral field from one head output.
    pub fn decode_field(&self, y: &[f64]) -> SpectralField {
        assert_eq!(y.len(), self.out_len(), "shape mismatch");
        match self {
            OutputMap::LegendreVelocity { op, components } => {
                let shape = op.active_shape();
                let len: usize = shape.iter().product();
                let comps = (0..*components)
                    .map(|c| {
                        let w = ArrayD::from_shape_vec(
                            IxDyn(&shape),
                            y[c * len..(c + 1) * len].to_vec(),
                        )
                        .unwrap();
                        Coeffs::Real(op.w_to_alpha(&w))
                    })
                    .collect();
                SpectralField { axes: vec![op.basis; op.dim], components: comps }
            }
            OutputMap::FourierVelocity { axes, components, .. } => {
                let m: usize = axes.iter().map(|a| a.n_modes).product();
                let comps = (0..*components)
                    .map(|c| {
                        Coeffs::Complex(Self::decode_complex(
                            &y[c * 2 * m..(c + 1) * 2 * m],
                            axes,
                            false,
                        ))
                    })
                    .collect();
                SpectralField { axes: axes.clone(), components: comps }
            }
            OutputMap::NeumannPhi { poisson } => {
                let alpha = poisson.w_to_coeffs(y);
                SpectralField {
                    axes: vec![poisson.spec; poisson.dim],
                    components: vec![Coeffs::Real(alpha)],
                }
            }
            OutputMap::FourierPhi { axes } => {
                let alpha = Self::decode_complex(y, axes, true);
                SpectralField { axes: axes.clone(), components: vec![Coeffs::Complex(alpha)] }
            }
        }
    }

    /// Residual loss of one head output against one sample's transformed
    /// right-hand side, and the gradient with respect to y.
    fn loss_and_dy(&self, y: &[f64], rhs: &SampleRhs, dy: &mut [f64]) -> f64 {
        match (self, rhs) {
            (OutputMap::LegendreVelocity { op, components }, SampleRhs::Real(h)) => {
                assert_eq!(h.len(), *components, "shape mismatch");
                let shape = op.active_shape();
                let len: usize = shape.iter().product();
                let mut loss = 0.0;
                for c in 0..*components {
                    let w = ArrayD::from_shape_vec(
                        IxDyn(&shape),
                        y[c * len..(c + 1) * len].to_vec(),
                    )
                    .unwrap();
                    let (r, ns) = op.residual(&w, &h[c]);
                    loss += ns;
                    let g = op.apply_precond_systems(&r);
                    for (i, gv) in g.iter().enumerate() {
                        dy[c * len + i] = 2.0 * gv;
                    }
                }
                loss
            }
            (OutputMap::FourierVelocity { axes, components, tau, nu }, SampleRhs::Complex(f)) => {
                assert_eq!(f.len(), *components, "shape mismatch");
                let m: usize = axes.iter().map(|a| a.n_modes).product();
                let mut loss = 0.0;
                for c in 0..*components {
                    let alpha = Self::decode_complex(&y[c * 2 * m..(c + 1) * 2 * m], axes, false);
                    let (r, ns) =
                        crate::galerkin::fourier_residual(*tau, *nu, &alpha, &f[c], axes);
                    loss += ns;
                    let mut g = ArrayD::zeros(r.raw_dim());
                    for (idx, gv) in g.indexed_iter_mut() {
                        let mut xi_sq = 0.0;
                        for (ax, spec) in axes.iter().enumerate() {
                            let xi = spec.wave_number(idx[ax]) as f64;
                            xi_sq += xi * xi;
                        }
                        *gv = r[&idx] * 2.0 * (tau + nu * xi_sq);
                    }
                    Self::complex_grad_to_y(&g, axes, false, &mut dy[c * 2 * m..(c + 1) * 2 * m]);
                }
                loss
            }
            (OutputMap::NeumannPhi { poisson }, SampleRhs::RealFull(f)) => {
                let (r, ns) = poisson.residual(y, f);
                let g = poisson.residual_gradient(&r);
                dy.copy_from_slice(&g);
                ns
            }
            (OutputMap::FourierPhi { axes }, SampleRhs::ComplexFull(f)) => {
                let alpha = Self::decode_complex(y, axes, true);
                let (r, ns) = crate::galerkin::fourier_residual(0.0, 1.0, &alpha, f, axes);
                let mut g = ArrayD::zeros(r.raw_dim());
                for (idx, gv) in g.indexed_iter_mut() {
                    let mut xi_sq = 0.0;
                    for (ax, spec) in axes.iter().enumerate() {
                        let xi = spec.wave_number(idx[ax]) as f64;
                        xi_sq += xi * xi;
                    }
                    *gv = r[&idx] * 2.0 * xi_sq;
                }
                Self::complex_grad_to_y(&g, axes, true, dy);
                ns
            }
            _ => panic!("rhs kind does not match the output map"),
        }
    }
}

/// One sample's transformed right-hand side.
pub enum SampleRhs {
    /// Preconditioned blocks h, one per velocity component (Legendre).
    Real(Vec<ArrayD<f64>>),
    /// Fourier-transformed rhs, one per component.
    Complex(Vec<ArrayD<Complex64>>),
    /// Full-layout projected rhs of the Neumann Poisson loss.
    RealFull(ArrayD<f64>),
    /// Fourier Poisson rhs (zero-mode row is the gauge).
    ComplexFull(ArrayD<Complex64>),
}

/// Gradient of one loss with respect to the active parameter groups.
#[derive(Debug, Clone)]
pub struct NetGrad {
    pub conv_kernel: Vec<f64>,
    pub conv_bias: Vec<f64>,
    pub head: Vec<f64>,
}

impl NetGrad {
    fn zeros(conv_spec: &ConvSpec, head_len: usize) -> Self {
        Self {
            conv_kernel: vec![0.0; conv_spec.kernel_len()],
            conv_bias: vec![0.0; conv_spec.out_channels],
            head: vec![0.0; head_len],
        }
    }
}

/// Shared loss core: conv -> swish -> head -> residual, with gradients for
/// the step head and (optionally) the convolution. Inputs and right-hand
/// sides are frozen history; the residual is affine in the head output.
fn loss_core(
    conv_spec: &ConvSpec,
    conv: &ConvParams,
    head: &[f64],
    inputs: &[Vec<f64>],
    rhs: &[SampleRhs],
    map: &OutputMap,
    want_conv_grad: bool,
) -> Result<(f64, NetGrad), Error> {
    assert_eq!(inputs.len(), rhs.len(), "sample count mismatch");
    let out_len = map.out_len();
    let feat = conv_spec.feature_len();
    let mut grad = NetGrad::zeros(conv_spec, head.len());
    let mut total = 0.0;
    let mut dy = vec![0.0; out_len];
    let mut dz = vec![0.0; feat];
    for (s, (input, sample_rhs)) in inputs.iter().zip(rhs).enumerate() {
        let (y, z, a) = forward_head(conv_spec, conv, head, out_len, input);
        dy.fill(0.0);
        let loss = map.loss_and_dy(&y, sample_rhs, &mut dy);
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at sample {s}")));
        }
        total += loss;
        // dW[i][j] += a[i] dy[j]; da[i] = sum_j W[i][j] dy[j], then through
        // the activation into dz.
        for i in 0..feat {
            let ai = a[i];
            let row = &head[i * out_len..(i + 1) * out_len];
            let grow = &mut grad.head[i * out_len..(i + 1) * out_len];
            let mut da_i = 0.0;
            for j in 0..out_len {
                grow[j] += ai * dy[j];
                da_i += row[j] * dy[j];
            }
            dz[i] = da_i * swish_derivative(z[i]);
        }
        if want_conv_grad {
            conv_backward(conv_spec, input, &dz, &mut grad.conv_kernel, &mut grad.conv_bias);
        }
    }
    Ok((total, grad))
}

/// Loss and exact gradient of the intermediate-velocity network at one
/// time step. `inputs[s]` is the flattened conv input of sample s for this
/// step; `rhs[s]` the transformed right-hand side built from the frozen
/// history.
pub fn loss_u(
    params: &NetParamsU,
    step: usize,
    inputs: &[Vec<f64>],
    rhs: &[SampleRhs],
    map: &OutputMap,
    want_conv_grad: bool,
) -> Result<(f64, NetGrad), Error> {
    assert_eq!(params.out_len, map.out_len(), "head/out map mismatch");
    loss_core(
        &params.conv_spec,
        &params.conv,
        &params.heads[step],
        inputs,
        rhs,
        map,
        want_conv_grad,
    )
}

/// Loss and exact gradient of the correction network at one time step.
pub fn loss_phi(
    params: &NetParamsPhi,
    step: usize,
    inputs: &[Vec<f64>],
    rhs: &[SampleRhs],
    map: &OutputMap,
    want_conv_grad: bool,
) -> Result<(f64, NetGrad), Error> {
    assert_eq!(params.out_len, map.out_len(), "head/out map mismatch");
    loss_core(
        &params.conv_spec,
        &params.convs[params.conv_index(step)],
        &params.heads[step],
        inputs,
        rhs,
        map,
        want_conv_grad,
    )
}

/// Forward pass of the velocity network at one step: physical coefficients.
pub fn forward_u(
    params: &NetParamsU,
    step: usize,
    input: &[f64],
    map: &OutputMap,
) -> SpectralField {
    let (y, _, _) =
        forward_head(&params.conv_spec, &params.conv, &params.heads[step], params.out_len, input);
    map.decode_field(&y)
}

/// Forward pass of the correction network at one step.
pub fn forward_phi(
    params: &NetParamsPhi,
    step: usize,
    input: &[f64],
    map: &OutputMap,
) -> SpectralField {
    let (y, _, _) = forward_head(
        &params.conv_spec,
        &params.convs[params.conv_index(step)],
        &params.heads[step],
        params.out_len,
        input,
    );
    map.decode_field(&y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn swish_fixed_points() {
        assert_eq!(swish(0.0), 0.0);
        assert!((swish(20.0) - 20.0).abs() <= 1e-7);
        // Finite-difference oracle for the derivative at 0 (= 0.5).
        let eps = 1e-6;
        let fd = (swish(eps) - swish(-eps)) / (2.0 * eps);
        assert_abs_diff_eq!(swish_derivative(0.0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fd, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn conv_shape_propagation_matches_presets() {
        // 2D forcing preset: grid 24^2, 2 channels, 10 filters, kernel 9
        // -> features 10 * 16 * 16 = 2560.
        let spec = ConvSpec::new(2, 10, 9, vec![24, 24]);
        assert_eq!(spec.output_shape(), vec![16, 16]);
        assert_eq!(spec.feature_len(), 2560);
        // 3D forcing preset: N = 18 -> grid 20^3, 3 filters, kernel 9.
        let spec3 = ConvSpec::new(3, 3, 9, vec![20, 20, 20]);
        assert_eq!(spec3.output_shape(), vec![12, 12, 12]);
        assert_eq!(spec3.feature_len(), 3 * 12 * 12 * 12);
    }

    #[test]
    fn scalar_one_cell_forward_matches_hand_arithmetic() {
        // 1x1 kernel on a single-cell grid: y = swish(b + k*x) * w.
        let spec = ConvSpec::new(1, 1, 1, vec![1, 1]);
        let conv = ConvParams { kernel: vec![1.7], bias: vec![0.3] };
        let head = vec![2.5];
        let input = vec![0.9];
        let (y, z, a) = forward_head(&spec, &conv, &head, 1, &input);
        let z_want = 0.3 + 1.7 * 0.9;
        assert_abs_diff_eq!(z[0], z_want, epsilon = 1e-15);
        assert_abs_diff_eq!(a[0], swish(z_want), epsilon = 1e-15);
        assert_abs_diff_eq!(y[0], swish(z_want) * 2.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let spec = ConvSpec::new(2, 3, 3, vec![8, 8]);
        let params = NetParamsU::zeros(spec, 2, 10);
        let input = vec![0.5; 2 * 64];
        let (y, _, _) = forward_head(
            &params.conv_spec,
            &params.conv,
            &params.heads[0],
            params.out_len,
            &input,
        );
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_forward_matches_direct_summation_2d() {
        let spec = ConvSpec::new(1, 1, 2, vec![3, 3]);
        let conv = ConvParams { kernel: vec![1.0, 2.0, 3.0, 4.0], bias: vec![0.1] };
        let input: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let z = conv_forward(&spec, &conv, &input);
        // Output (2x2), entry (0,0): 0.1 + 1*0 + 2*1 + 3*3 + 4*4 = 27.1.
        assert_abs_diff_eq!(z[0], 27.1, epsilon = 1e-12);
        // Entry (1,1): corner at input (1,1)=4: 0.1 + 4 + 2*5 + 3*7 + 4*8 = 67.1.
        assert_abs_diff_eq!(z[3], 67.1, epsilon = 1e-12);
    }

    #[test]
    fn seeded_initialization_is_reproducible() {
        let spec = ConvSpec::new(2, 3, 3, vec![6, 6]);
        let a = NetParamsU::seeded(spec.clone(), 2, 8, 77);
        let b = NetParamsU::seeded(spec, 2, 8, 77);
        assert_eq!(a.conv.kernel, b.conv.kernel);
        assert_eq!(a.heads, b.heads);
        assert!(a.conv.bias.iter().all(|v| *v == 0.0));
    }

    /// Evaluates loss_u as a function of all active parameters, for the
    /// finite-difference oracle.
    fn eval_u(
        params: &NetParamsU,
        step: usize,
        inputs: &[Vec<f64>],
        rhs: &[SampleRhs],
        map: &OutputMap,
    ) -> f64 {
        loss_u(params, step, inputs, rhs, map, true).unwrap().0
    }

    fn perturb_u(params: &mut NetParamsU, step: usize, idx: usize, delta: f64) {
        let nk = params.conv.kernel.len();
        let nb = params.conv.bias.len();
        if idx < nk {
            params.conv.kernel[idx] += delta;
        } else if idx < nk + nb {
            params.conv.bias[idx - nk] += delta;
        } else {
            params.heads[step][idx - nk - nb] += delta;
        }
    }

    fn grad_u_flat(g: &NetGrad) -> Vec<f64> {
        let mut out = g.conv_kernel.clone();
        out.extend_from_slice(&g.conv_bias);
        out.extend_from_slice(&g.head);
        out
    }

    fn max_rel_grad_error(analytic: &[f64], fd: &[f64]) -> f64 {
        let scale = analytic.iter().fold(1e-12f64, |a, v| a.max(v.abs()));
        analytic
            .iter()
            .zip(fd)
            .map(|(a, f)| (a - f).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn loss_u_gradient_matches_finite_differences_legendre() {
        let n = 6;
        let op = HelmholtzOperator::build(2.0, 0.3, BasisSpec::legendre_dirichlet(n), 2).unwrap();
        let map = OutputMap::LegendreVelocity { op: &op, components: 2 };
        let grid = n + 2;
        let conv_spec = ConvSpec::new(2, 2, 3, vec![grid, grid]);
        let mut params = NetParamsU::seeded(conv_spec, 2, map.out_len(), 321);
        let mut rng = SplitMix64::new(11);
        let inputs: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2 * grid * grid).map(|_| rng.normal()).collect())
            .collect();
        let rhs: Vec<SampleRhs> = (0..2)
            .map(|_| {
                let h = (0..2)
                    .map(|_| {
                        let f = ArrayD::from_shape_fn(IxDyn(&[n, n]), |_| rng.normal());
                        op.transform_rhs(&f)
                    })
                    .collect();
                SampleRhs::Real(h)
            })
            .collect();
        let step = 1;
        let (_, g) = loss_u(&params, step, &inputs, &rhs, &map, true).unwrap();
        let analytic = grad_u_flat(&g);
        let eps = 1e-6;
        let fd: Vec<f64> = (0..analytic.len())
            .map(|i| {
                perturb_u(&mut params, step, i, eps);
                let hi = eval_u(&params, step, &inputs, &rhs, &map);
                perturb_u(&mut params, step, i, -2.0 * eps);
                let lo = eval_u(&params, step, &inputs, &rhs, &map);
                perturb_u(&mut params, step, i, eps);
                (hi - lo) / (2.0 * eps)
            })
            .collect();
        let err = max_rel_grad_error(&analytic, &fd);
        assert!(err <= 1e-5, "max relative gradient error {err:e}");
    }

    #[test]
    fn loss_phi_gradient_matches_finite_differences_fourier() {
        let n = 6;
        let axes = vec![BasisSpec::fourier(n); 2];
        let tables: Vec<_> =
            axes.iter().map(|a| crate::basis::build_tables(*a, 0).unwrap()).collect();
        let map = OutputMap::FourierPhi { axes: axes.clone() };
        let conv_spec = ConvSpec::new(1, 2, 3, vec![n, n]);
        let mut params = NetParamsPhi::seeded(conv_spec, 2, map.out_len(), false, 55);
        let mut rng = SplitMix64::new(13);
        let inputs: Vec<Vec<f64>> =
            (0..2).map(|_| (0..n * n).map(|_| rng.normal()).collect()).collect();
        let rhs: Vec<SampleRhs> = (0..2)
            .map(|_| {
                // Compatible rhs: zero-mean nodal divergence.
                let mut nodal = ArrayD::from_shape_fn(IxDyn(&[n, n]), |_| rng.normal());
                let mean = nodal.iter().sum::<f64>() / (n * n) as f64;
                nodal.mapv_inplace(|v| v - mean);
                SampleRhs::ComplexFull(crate::basis::analyze_fourier(&nodal, &tables))
            })
            .collect();
        let step = 0;
        let (_, g) = loss_phi(&params, step, &inputs, &rhs, &map, true).unwrap();
        let mut analytic = g.conv_kernel.clone();
        analytic.extend_from_slice(&g.conv_bias);
        analytic.extend_from_slice(&g.head);
        let eps = 1e-6;
        let nk = params.convs[0].kernel.len();
        let nb = params.convs[0].bias.len();
        let mut fd = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let bump = |p: &mut NetParamsPhi, d: f64| {
                if i < nk {
                    p.convs[0].kernel[i] += d;
                } else if i < nk + nb {
                    p.convs[0].bias[i - nk] += d;
                } else {
                    p.heads[step][i - nk - nb] += d;
                }
            };
            bump(&mut params, eps);
            let hi = loss_phi(&params, step, &inputs, &rhs, &map, true).unwrap().0;
            bump(&mut params, -2.0 * eps);
            let lo = loss_phi(&params, step, &inputs, &rhs, &map, true).unwrap().0;
            bump(&mut params, eps);
            fd.push((hi - lo) / (2.0 * eps));
        }
        let err = max_rel_grad_error(&analytic, &fd);
        assert!(err <= 1e-5, "max relative gradient error {err:e}");
    }

    #[test]
    fn doubling_rhs_quadruples_loss_at_zero_output() {
        let n = 6;
        let op = HelmholtzOperator::build(1.0, 0.5, BasisSpec::legendre_dirichlet(n), 2).unwrap();
        let map = OutputMap::LegendreVelocity { op: &op, components: 1 };
        let conv_spec = ConvSpec::new(1, 1, 3, vec![n + 2, n + 2]);
        let params = NetParamsU::zeros(conv_spec, 1, map.out_len());
        let mut rng = SplitMix64::new(17);
        let f = ArrayD::from_shape_fn(IxDyn(&[n, n]), |_| rng.normal());
        let input = vec![vec![0.0; (n + 2) * (n + 2)]];
        let one = vec![SampleRhs::Real(vec![op.transform_rhs(&f)])];
        let two = vec![SampleRhs::Real(vec![op.transform_rhs(&f.mapv(|v| 2.0 * v))])];
        let l1 = loss_u(&params, 0, &input, &one, &map, false).unwrap().0;
        let l2 = loss_u(&params, 0, &input, &two, &map, false).unwrap().0;
        assert!((l2 - 4.0 * l1).abs() <= 1e-10 * l1.max(1.0));
    }

    #[test]
    fn exact_solution_coefficients_zero_the_losses() {
        // Head outputs equal to the direct solves make both losses vanish.
        let n = 5;
        let op = HelmholtzOperator::build(3.0, 0.7, BasisSpec::legendre_dirichlet(n), 2).unwrap();
        let mut rng = SplitMix64::new(23);
        let f = ArrayD::from_shape_fn(IxDyn(&[n, n]), |_| rng.normal());
        let h = op.transform_rhs(&f);
        let w_star = op.solve_w(&h);
        let map = OutputMap::LegendreVelocity { op: &op, components: 1 };
        let mut dy = vec![0.0; map.out_len()];
        let loss = map.loss_and_dy(
            w_star.as_slice().unwrap(),
            &SampleRhs::Real(vec![h]),
            &mut dy,
        );
        assert!(loss <= 1e-9, "loss at exact solution {loss:e}");
        assert!(dy.iter().all(|v| v.abs() <= 1e-7));
    }

    #[test]
    fn fourier_decode_yields_real_nodal_fields() {
        let axes = vec![BasisSpec::fourier(8); 2];
        let tables: Vec<_> =
            axes.iter().map(|a| crate::basis::build_tables(*a, 0).unwrap()).collect();
        let map = OutputMap::FourierVelocity { axes: axes.clone(), components: 1, tau: 1.0, nu: 1.0 };
        let mut rng = SplitMix64::new(5);
        let y: Vec<f64> = (0..map.out_len()).map(|_| rng.normal()).collect();
        let field = map.decode_field(&y);
        // Synthesize and check the imaginary part is negligible.
        let nodal = crate::basis::synthesize(&field, &tables);
        assert!(nodal[0].iter().all(|v| v.is_finite()));
        // The decoded coefficients are exactly Hermitian.
        let c = field.components[0].as_complex();
        for (idx, v) in c.indexed_iter() {
            let partner = [axes[0].conjugate_mode(idx[0]), axes[1].conjugate_mode(idx[1])];
            let other = c[IxDyn(&partner)];
            assert!((v - other.conj()).norm() <= 1e-14);
        }
    }
}
