//! Actor and critic MLPs with a state-independent Gaussian action head.
//!
//! Parameters live in one flat vector so the optimizer, gradient checks and
//! checkpoints all see the same layout:
//! `[actor layers | action log-std | critic layers]`, each layer stored as
//! a row-major `in × out` weight matrix followed by its bias.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::ACTION_DIM;
use crate::env::{OBS_DIM, PRIV_DIM};

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 1.0;
pub const LOG_STD_INIT: f64 = -0.5;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("input has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("parameter vector has {got} entries, expected {expected}")]
    ParamCount { expected: usize, got: usize },
}

/// Floating-point type the networks run in. Training uses `f32`; gradient
/// checks use `f64`.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;

    /// `C = alpha·A·B + beta·C` with arbitrary strides.
    ///
    /// # Safety
    /// Strides and dimensions must address memory inside the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix view for [`matmul`].
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// Use the transpose of the stored matrix.
    pub trans: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, trans: false }
    }

    pub fn t(self) -> Self {
        Self { trans: !self.trans, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c`, with `c` row-major `m × n`.
pub fn matmul<T: Scalar>(a: MatRef<T>, b: MatRef<T>, beta: T, c: &mut [T]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: shapes and strides were checked against the slice lengths above.
    unsafe {
        T::gemm_raw(m, k, n, T::ONE, a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Elu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Elu => {
                if z > T::ZERO {
                    z
                } else {
                    z.exp() - T::ONE
                }
            }
            Activation::Tanh => {
                let e = (z + z).exp();
                (e - T::ONE) / (e + T::ONE)
            }
        }
    }

    /// Derivative given the pre-activation `z` and output `h`.
    fn grad<T: Scalar>(self, z: T, h: T) -> T {
        match self {
            Activation::Elu => {
                if z > T::ZERO {
                    T::ONE
                } else {
                    h + T::ONE
                }
            }
            Activation::Tanh => T::ONE - h * h,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn actor() -> Self {
        Self { input_dim: OBS_DIM, hidden_dims: vec![512, 256, 128], output_dim: ACTION_DIM, activation: Activation::Elu }
    }

    pub fn critic() -> Self {
        Self { input_dim: PRIV_DIM, hidden_dims: vec![768, 256, 128], output_dim: 1, activation: Activation::Elu }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.dims().contains(&0) {
            return Err(PolicyError::Spec(format!("all dims must be >= 1: {:?}", self.dims())));
        }
        Ok(())
    }
}

/// Layer offsets of one MLP inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    /// `(in, out, weight offset, bias offset)` per layer, relative to the MLP's slice.
    layers: Vec<(usize, usize, usize, usize)>,
    len: usize,
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache<T> {
    batch: usize,
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<T>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<T>>,
}

impl<T: Scalar> MlpCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self, PolicyError> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut off = 0;
        for w in spec.dims().windows(2) {
            layers.push((w[0], w[1], off, off + w[0] * w[1]));
            off += w[0] * w[1] + w[1];
        }
        Ok(Self { spec, layers, len: off })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.len
    }

    /// Batched forward pass over `x` (`batch × input_dim`, row-major).
    pub fn forward<T: Scalar>(&self, params: &[T], x: &[T], batch: usize, cache: &mut MlpCache<T>) {
        assert_eq!(params.len(), self.len);
        assert_eq!(x.len(), batch * self.spec.input_dim);
        let n_layers = self.layers.len();
        cache.batch = batch;
        cache.acts.resize_with(n_layers + 1, Vec::new);
        cache.pre.resize_with(n_layers.saturating_sub(1), Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        for (l, &(fi, fo, wo, bo)) in self.layers.iter().enumerate() {
            let (head, tail) = cache.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            out.clear();
            out.resize(batch * fo, T::ZERO);
            let bias = &params[bo..bo + fo];
            for row in out.chunks_exact_mut(fo) {
                row.copy_from_slice(bias);
            }
            matmul(MatRef::new(input, batch, fi), MatRef::new(&params[wo..wo + fi * fo], fi, fo), T::ONE, out);
            if l + 1 < n_layers {
                let pre = &mut cache.pre[l];
                pre.clear();
                pre.extend_from_slice(out);
                let act = self.spec.activation;
                for v in out.iter_mut() {
                    *v = act.apply(*v);
                }
            }
        }
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂output` (`batch × output_dim`).
    pub fn backward<T: Scalar>(&self, params: &[T], cache: &MlpCache<T>, d_out: &[T], grad: &mut [T]) {
        assert_eq!(params.len(), self.len);
        assert_eq!(grad.len(), self.len);
        let batch = cache.batch;
        assert_eq!(d_out.len(), batch * self.spec.output_dim);
        let mut delta = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let (fi, fo, wo, bo) = self.layers[l];
            let input = &cache.acts[l];
            // dW += inputᵀ · delta
            matmul(
                MatRef::new(input, batch, fi).t(),
                MatRef::new(&delta, batch, fo),
                T::ONE,
                &mut grad[wo..wo + fi * fo],
            );
            let gb = &mut grad[bo..bo + fo];
            for row in delta.chunks_exact(fo) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += *d;
                }
            }
            if l == 0 {
                break;
            }
            let mut d_in = vec![T::ZERO; batch * fi];
            matmul(
                MatRef::new(&delta, batch, fo),
                MatRef::new(&params[wo..wo + fi * fo], fi, fo).t(),
                T::ZERO,
                &mut d_in,
            );
            let act = self.spec.activation;
            for ((d, z), h) in d_in.iter_mut().zip(&cache.pre[l - 1]).zip(input) {
                *d *= act.grad(*z, *h);
            }
            delta = d_in;
        }
    }

    /// Orthogonal weights (`hidden_gain` for hidden layers, `head_gain` for
    /// the output layer) and zero biases.
    pub fn init_orthogonal<T: Scalar, R: Rng + ?Sized>(&self, params: &mut [T], hidden_gain: f64, head_gain: f64, rng: &mut R) {
        assert_eq!(params.len(), self.len);
        let last = self.layers.len() - 1;
        for (l, &(fi, fo, wo, bo)) in self.layers.iter().enumerate() {
            let gain = if l == last { head_gain } else { hidden_gain };
            let q = orthogonal(fi, fo, rng);
            for r in 0..fi {
                for c in 0..fo {
                    params[wo + r * fo + c] = T::from_f64(gain * q[(r, c)]);
                }
            }
            params[bo..bo + fo].fill(T::ZERO);
        }
    }
}

/// `rows × cols` matrix with orthonormal columns (or rows, if wider than tall).
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let (tall, wide) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, wide, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix so the distribution is uniform over orthogonal matrices.
    for j in 0..wide {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

/// Diagonal Gaussian over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl ActionDistribution {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn logprob_of(&self, action: &[f64]) -> f64 {
        gaussian_logprob(&self.mean, &self.log_std, action)
    }

    pub fn sample_and_logprob<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let action: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = self.logprob_of(&action);
        (action, lp)
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.log_std)
    }
}

/// `Σ_d −(a−μ)²/(2σ²) − log σ − ½ log 2π`.
pub fn gaussian_logprob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    assert_eq!(mean.len(), action.len());
    let mut lp = 0.0;
    for ((m, l), a) in mean.iter().zip(log_std).zip(action) {
        let z = (a - m) / l.exp();
        lp += -0.5 * z * z - l - HALF_LN_2PI;
    }
    lp
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|l| l + 0.5 + HALF_LN_2PI).sum()
}

/// Actor, critic and log-std in one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy<T> {
    actor: Mlp,
    critic: Mlp,
    params: Vec<T>,
}

impl<T: Scalar> Policy<T> {
    /// All-zero parameters (log-std 0).
    pub fn zeros(actor: MlpSpec, critic: MlpSpec) -> Result<Self, PolicyError> {
        let actor = Mlp::new(actor)?;
        let critic = Mlp::new(critic)?;
        let n = actor.param_count() + actor.spec.output_dim + critic.param_count();
        Ok(Self { actor, critic, params: vec![T::ZERO; n] })
    }

    pub fn from_params(actor: MlpSpec, critic: MlpSpec, params: Vec<T>) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(actor, critic)?;
        if params.len() != p.params.len() {
            return Err(PolicyError::ParamCount { expected: p.params.len(), got: params.len() });
        }
        p.params = params;
        Ok(p)
    }

    /// Orthogonal init with gain √2 (hidden) and 0.01 (actor head), 1.0 for the
    /// critic head, log-std −0.5.
    pub fn init<R: Rng + ?Sized>(actor: MlpSpec, critic: MlpSpec, rng: &mut R) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(actor, critic)?;
        let (actor_mlp, critic_mlp) = (p.actor.clone(), p.critic.clone());
        let (a, l, c) = p.split_mut();
        actor_mlp.init_orthogonal(a, std::f64::consts::SQRT_2, 0.01, rng);
        l.fill(T::from_f64(LOG_STD_INIT));
        critic_mlp.init_orthogonal(c, std::f64::consts::SQRT_2, 1.0, rng);
        Ok(p)
    }

    pub fn actor_spec(&self) -> &MlpSpec {
        &self.actor.spec
    }

    pub fn critic_spec(&self) -> &MlpSpec {
        &self.critic.spec
    }

    pub fn actor_mlp(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic_mlp(&self) -> &Mlp {
        &self.critic
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Actor weights plus log-std.
    pub fn actor_param_count(&self) -> usize {
        self.actor.param_count() + self.actor.spec.output_dim
    }

    fn bounds(&self) -> (usize, usize) {
        let a = self.actor.param_count();
        (a, a + self.actor.spec.output_dim)
    }

    pub fn actor_params(&self) -> &[T] {
        &self.params[..self.bounds().0]
    }

    pub fn log_std(&self) -> &[T] {
        let (a, l) = self.bounds();
        &self.params[a..l]
    }

    pub fn critic_params(&self) -> &[T] {
        &self.params[self.bounds().1..]
    }

    /// `(actor, log_std, critic)` views.
    pub fn split_mut(&mut self) -> (&mut [T], &mut [T], &mut [T]) {
        let (a, l) = self.bounds();
        let (actor, rest) = self.params.split_at_mut(a);
        let (log_std, critic) = rest.split_at_mut(l - a);
        (actor, log_std, critic)
    }

    /// Same split for a gradient vector of this policy's shape.
    pub fn split_grad<'g>(&self, grad: &'g mut [T]) -> (&'g mut [T], &'g mut [T], &'g mut [T]) {
        assert_eq!(grad.len(), self.params.len());
        let (a, l) = self.bounds();
        let (actor, rest) = grad.split_at_mut(a);
        let (log_std, critic) = rest.split_at_mut(l - a);
        (actor, log_std, critic)
    }

    /// Projects log-std back into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn clamp_log_std(&mut self) {
        let (lo, hi) = (T::from_f64(LOG_STD_MIN), T::from_f64(LOG_STD_MAX));
        for v in self.split_mut().1 {
            if *v < lo {
                *v = lo;
            } else if *v > hi {
                *v = hi;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.to_f64().is_finite())
    }

    fn check_dim(expected: usize, got: usize) -> Result<(), PolicyError> {
        if expected == got {
            Ok(())
        } else {
            Err(PolicyError::Dimension { expected, got })
        }
    }

    pub fn forward_actor(&self, obs: &[T]) -> Result<ActionDistribution, PolicyError> {
        Self::check_dim(self.actor.spec.input_dim, obs.len())?;
        let mut cache = MlpCache::default();
        self.actor.forward(self.actor_params(), obs, 1, &mut cache);
        Ok(ActionDistribution {
            mean: cache.output().iter().map(|v| v.to_f64()).collect(),
            log_std: self.log_std().iter().map(|v| v.to_f64()).collect(),
        })
    }

    pub fn forward_critic(&self, privileged: &[T]) -> Result<f64, PolicyError> {
        Self::check_dim(self.critic.spec.input_dim, privileged.len())?;
        let mut cache = MlpCache::default();
        self.critic.forward(self.critic_params(), privileged, 1, &mut cache);
        Ok(cache.output()[0].to_f64())
    }

    /// Batched actor means; the result is in `cache.output()`.
    pub fn actor_batch(&self, obs: &[T], batch: usize, cache: &mut MlpCache<T>) -> Result<(), PolicyError> {
        Self::check_dim(batch * self.actor.spec.input_dim, obs.len())?;
        self.actor.forward(self.actor_params(), obs, batch, cache);
        Ok(())
    }

    /// Batched critic values; the result is in `cache.output()`.
    pub fn critic_batch(&self, privileged: &[T], batch: usize, cache: &mut MlpCache<T>) -> Result<(), PolicyError> {
        Self::check_dim(batch * self.critic.spec.input_dim, privileged.len())?;
        self.critic.forward(self.critic_params(), privileged, batch, cache);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Policy<U> {
        Policy {
            actor: self.actor.clone(),
            critic: self.critic.clone(),
            params: self.params.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![T::ZERO; n], v: vec![T::ZERO; n] }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        for i in 0..params.len() {
            let g = grad[i].to_f64();
            let m = b1 * self.m[i].to_f64() + (1.0 - b1) * g;
            let v = b2 * self.v[i].to_f64() + (1.0 - b2) * g * g;
            self.m[i] = T::from_f64(m);
            self.v[i] = T::from_f64(v);
            let update = lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            params[i] = T::from_f64(params[i].to_f64() - update);
        }
    }
}

/// L2 norm of a gradient, accumulated in f64.
pub fn grad_norm<T: Scalar>(grad: &[T]) -> f64 {
    grad.iter().map(|g| g.to_f64() * g.to_f64()).sum::<f64>().sqrt()
}

/// Rescales `grad` to norm at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grad: &mut [T], max_norm: f64) -> f64 {
    let n = grad_norm(grad);
    if n > max_norm && n > 0.0 {
        let k = T::from_f64(max_norm / n);
        for g in grad.iter_mut() {
            *g *= k;
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny(input: usize, hidden: &[usize], output: usize) -> MlpSpec {
        MlpSpec { input_dim: input, hidden_dims: hidden.to_vec(), output_dim: output, activation: Activation::Elu }
    }

    #[test]
    fn actor_parameter_count() {
        let expected = (23 * 512 + 512) + (512 * 256 + 256) + (256 * 128 + 128) + (128 * 6 + 6) + 6;
        assert_eq!(expected, 177_292);
        let p = Policy::<f32>::zeros(MlpSpec::actor(), MlpSpec::critic()).unwrap();
        assert_eq!(p.actor_param_count(), 177_292);
        let critic = (32 * 768 + 768) + (768 * 256 + 256) + (256 * 128 + 128) + (128 + 1);
        assert_eq!(p.param_count(), 177_292 + critic);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = Policy::<f32>::zeros(MlpSpec::actor(), MlpSpec::critic()).unwrap();
        let d = p.forward_actor(&[0.3; OBS_DIM]).unwrap();
        assert_eq!(d.mean, vec![0.0; ACTION_DIM]);
        assert_eq!(p.forward_critic(&[0.7; PRIV_DIM]).unwrap(), 0.0);
        assert_eq!(
            p.forward_actor(&[0.0; 5]).unwrap_err(),
            PolicyError::Dimension { expected: OBS_DIM, got: 5 }
        );
    }

    #[test]
    fn tiny_network_matches_hand_computation() {
        // 2 -> 1 (elu) -> 1: W1 = [0.5, -1.0], b1 = 0.2, W2 = 1.5, b2 = -0.1.
        let spec = tiny(2, &[1], 1);
        let mlp = Mlp::new(spec).unwrap();
        let params = [0.5, -1.0, 0.2, 1.5, -0.1];
        let mut cache = MlpCache::default();
        mlp.forward(&params, &[1.0f64, 2.0], 1, &mut cache);
        let z: f64 = 0.5 - 2.0 + 0.2;
        let expected = 1.5 * (z.exp() - 1.0) - 0.1;
        assert!((cache.output()[0] - expected).abs() < 1e-6);

        // Positive branch passes through unchanged.
        mlp.forward(&params, &[2.0f64, 0.5], 1, &mut cache);
        let z = 1.0 - 0.5 + 0.2;
        assert!((cache.output()[0] - (1.5 * z - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn tiny_critic_matches_hand_computation() {
        // 3 -> 2 (elu) -> 1 in f32.
        let mlp = Mlp::new(tiny(3, &[2], 1)).unwrap();
        #[rustfmt::skip]
        let params: [f32; 11] = [
            0.1, -0.2,
            0.3, 0.4,
            -0.5, 0.6,
            0.05, -0.05,
            2.0, -1.0,
            0.25,
        ];
        let x = [1.0f32, -1.0, 0.5];
        let z0 = 0.1 * 1.0 + 0.3 * -1.0 + -0.5 * 0.5 + 0.05f64;
        let z1 = -0.2 * 1.0 + 0.4 * -1.0 + 0.6 * 0.5 - 0.05f64;
        let elu = |z: f64| if z > 0.0 { z } else { z.exp() - 1.0 };
        let expected = 2.0 * elu(z0) - 1.0 * elu(z1) + 0.25;
        let mut cache = MlpCache::default();
        mlp.forward(&params, &x, 1, &mut cache);
        assert!((cache.output()[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn critic_reads_privileged_suffix() {
        let p = Policy::<f32>::init(MlpSpec::actor(), MlpSpec::critic(), &mut rng(3)).unwrap();
        let mut x = [0.1f32; PRIV_DIM];
        let v0 = p.forward_critic(&x).unwrap();
        x[PRIV_DIM - 1] = 2.0;
        let v1 = p.forward_critic(&x).unwrap();
        assert_ne!(v0, v1);
    }

    #[test]
    fn init_is_orthogonal_with_small_head() {
        let mut r = rng(1);
        for (rows, cols) in [(23, 512), (512, 256), (128, 6), (5, 5)] {
            let q = orthogonal(rows, cols, &mut r);
            let g = if rows >= cols { q.transpose() * &q } else { &q * q.transpose() };
            let eye = DMatrix::<f64>::identity(g.nrows(), g.ncols());
            assert!((g - eye).amax() < 1e-10);
        }
        let p = Policy::<f32>::init(MlpSpec::actor(), MlpSpec::critic(), &mut r).unwrap();
        assert!(p.log_std().iter().all(|&l| l == -0.5));
        let (_, _, wo, _) = p.actor_mlp().layers[3];
        let head = &p.actor_params()[wo..wo + 128 * 6];
        assert!(head.iter().all(|w| w.abs() <= 0.01 + 1e-7));
        assert!(p.is_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let p = Policy::<f32>::init(MlpSpec::actor(), MlpSpec::critic(), &mut rng(8)).unwrap();
        let obs: Vec<f32> = (0..OBS_DIM).map(|i| (i as f32 * 0.37).sin()).collect();
        let a = p.forward_actor(&obs).unwrap();
        let b = p.forward_actor(&obs).unwrap();
        assert_eq!(a.mean.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.mean.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn batched_forward_matches_single() {
        let p = Policy::<f32>::init(MlpSpec::actor(), MlpSpec::critic(), &mut rng(9)).unwrap();
        let batch = 5;
        let obs: Vec<f32> = (0..batch * OBS_DIM).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut cache = MlpCache::default();
        p.actor_batch(&obs, batch, &mut cache).unwrap();
        for b in 0..batch {
            let single = p.forward_actor(&obs[b * OBS_DIM..(b + 1) * OBS_DIM]).unwrap();
            for d in 0..ACTION_DIM {
                assert!((single.mean[d] - cache.output()[b * ACTION_DIM + d] as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gaussian_sampling_and_density() {
        let dist = ActionDistribution { mean: vec![0.3, -0.2, 0.0, 0.5, 0.1, -0.9], log_std: vec![-4.0; 6] };
        let mut r = rng(2);
        let std = (-4.0f64).exp();
        for _ in 0..10_000 {
            let (a, lp) = dist.sample_and_logprob(&mut r);
            for (x, m) in a.iter().zip(&dist.mean) {
                assert!((x - m).abs() <= 5.0 * std);
            }
            assert_eq!(dist.logprob_of(&a), lp);
        }
        let dist = ActionDistribution { mean: vec![0.1; 6], log_std: vec![-0.5, 0.0, 0.3, -1.0, -2.0, 1.0] };
        let at_mode: f64 = dist.std().iter().map(|s| -(s * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
        assert!((dist.logprob_of(&dist.mean) - at_mode).abs() < 1e-12);
    }

    /// Loss `Σ c ⊙ MLP(x)` over a batch, for gradient checks.
    fn probe_loss(mlp: &Mlp, params: &[f64], x: &[f64], batch: usize, c: &[f64]) -> f64 {
        let mut cache = MlpCache::default();
        mlp.forward(params, x, batch, &mut cache);
        cache.output().iter().zip(c).map(|(y, c)| y * c).sum()
    }

    fn probe_grad(mlp: &Mlp, params: &[f64], x: &[f64], batch: usize, c: &[f64]) -> Vec<f64> {
        let mut cache = MlpCache::default();
        mlp.forward(params, x, batch, &mut cache);
        let mut g = vec![0.0; params.len()];
        mlp.backward(params, &cache, c, &mut g);
        g
    }

    fn random_vec(n: usize, scale: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-scale..scale)).collect()
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut r = rng(4);
        for activation in [Activation::Elu, Activation::Tanh] {
            let spec = MlpSpec { activation, ..tiny(4, &[8, 6], 3) };
            let mlp = Mlp::new(spec).unwrap();
            let params = random_vec(mlp.param_count(), 0.8, &mut r);
            let batch = 3;
            let x = random_vec(batch * 4, 1.0, &mut r);
            let c = random_vec(batch * 3, 1.0, &mut r);
            let g = probe_grad(&mlp, &params, &x, batch, &c);
            let eps = 1e-4;
            assert!(mlp.param_count() >= 100);
            let mut worst: f64 = 0.0;
            for i in 0..mlp.param_count() {
                let mut p = params.clone();
                p[i] += eps;
                let up = probe_loss(&mlp, &p, &x, batch, &c);
                p[i] -= 2.0 * eps;
                let down = probe_loss(&mlp, &p, &x, batch, &c);
                let fd = (up - down) / (2.0 * eps);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "{activation:?}: worst relative error {worst}");
        }
    }

    #[test]
    fn backward_is_linear_and_zero_for_zero_loss() {
        let mut r = rng(5);
        let mlp = Mlp::new(tiny(3, &[4], 2)).unwrap();
        let params = random_vec(mlp.param_count(), 1.0, &mut r);
        let x = random_vec(2 * 3, 1.0, &mut r);
        let c1 = random_vec(4, 1.0, &mut r);
        let c2 = random_vec(4, 1.0, &mut r);
        let (a, b) = (0.7, -1.3);
        let combined: Vec<f64> = c1.iter().zip(&c2).map(|(x, y)| a * x + b * y).collect();
        let g = probe_grad(&mlp, &params, &x, 2, &combined);
        let g1 = probe_grad(&mlp, &params, &x, 2, &c1);
        let g2 = probe_grad(&mlp, &params, &x, 2, &c2);
        for i in 0..g.len() {
            assert!((g[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
        assert!(probe_grad(&mlp, &params, &x, 2, &[0.0; 4]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = vec![1.0f64, -2.0, 0.5];
        let mut opt = Adam::new(3);
        opt.step(&mut params, &[0.3, -4.0, 0.0], 0.01);
        assert!((params[0] - 0.99).abs() < 1e-6);
        assert!((params[1] + 1.99).abs() < 1e-6);
        assert_eq!(params[2], 0.5);
    }

    #[test]
    fn grad_clipping() {
        let mut g = vec![3.0f32, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-6);
        let mut g = vec![0.3f32, 0.4];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn log_std_is_clamped() {
        let mut p = Policy::<f32>::zeros(tiny(2, &[2], 2), tiny(3, &[2], 1)).unwrap();
        p.split_mut().1.copy_from_slice(&[-9.0, 3.0]);
        p.clamp_log_std();
        assert_eq!(p.log_std(), &[-4.0, 1.0]);
    }
}
