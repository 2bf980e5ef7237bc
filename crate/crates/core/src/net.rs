//! Dense feed-forward networks with analytic gradients and Adam.
//!
//! Everything here runs in `f64`. Batched passes go through `matrixmultiply`
//! so that 256-wide layers stay affordable on a single core; single-vector
//! calls are batches of one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("network needs at least two layer dimensions, got {0}")]
    TooFewDims(usize),
    #[error("layer dimension {index} must be positive")]
    ZeroDim { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("layer {index} does not chain: input {input} after output {previous}")]
    BrokenChain {
        index: usize,
        input: usize,
        previous: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("forward cache does not belong to this network")]
    CacheMismatch,
    #[error("gradient shape does not match parameters")]
    ShapeMismatch,
}

/// Row-major dense matrix; rows are batch elements.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NetError> {
        if data.len() != rows * cols {
            return Err(NetError::DimMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NetError> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NetError::DimMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix, NetError> {
        if self.rows != other.rows {
            return Err(NetError::DimMismatch {
                expected: self.rows,
                got: other.rows,
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Columns `[start, start + len)` as a new matrix.
    pub fn columns(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols);
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Matrix {
            rows: self.rows,
            cols: len,
            data,
        }
    }
}

/// c = a · bᵀ where a is m×k and b is n×k, all row-major.
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: slice lengths checked above cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = aᵀ · b where a is k×m and b is k×n.
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == k * m && b.len() == k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = a · b where a is m×k and b is k×n.
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Identity => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `output_dim × input_dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Layer {
            weights: vec![0.0; input_dim * output_dim],
            bias: vec![0.0; output_dim],
            input_dim,
            output_dim,
            activation,
        }
    }

    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.input_dim + inp]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// A multilayer perceptron: rectifier hidden layers, identity output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations retained by a forward pass; `values[0]` is the input and
/// `values[i + 1]` is the post-activation output of layer `i`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    values: Vec<Matrix>,
}

impl ForwardCache {
    pub fn input(&self) -> &Matrix {
        &self.values[0]
    }

    pub fn output(&self) -> &Matrix {
        self.values.last().expect("cache holds the input at least")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for every parameter of an [`Mlp`] plus the gradient with
/// respect to the batch input.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Matrix,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            input: Matrix::zeros(0, net.input_dim()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&g| g == 0.0)
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<(), NetError> {
        if self.layers.len() != other.layers.len() {
            return Err(NetError::ShapeMismatch);
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weights.len() != b.weights.len() || a.bias.len() != b.bias.len() {
                return Err(NetError::ShapeMismatch);
            }
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0f64, |m, g| m.max(g.abs()))
    }
}

impl Mlp {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self, NetError> {
        if dims.len() < 2 {
            return Err(NetError::TooFewDims(dims.len()));
        }
        if let Some(index) = dims.iter().position(|&d| d == 0) {
            return Err(NetError::ZeroDim { index });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let activation = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                let mut layer = Layer::zeros(w[0], w[1], activation);
                let bound = 1.0 / (w[0] as f64).sqrt();
                for x in layer.weights.iter_mut() {
                    *x = rng.random_range(-bound..=bound);
                }
                layer
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::TooFewDims(0));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.input_dim == 0 || l.output_dim == 0 {
                return Err(NetError::ZeroDim { index: i });
            }
            if l.weights.len() != l.input_dim * l.output_dim || l.bias.len() != l.output_dim {
                return Err(NetError::ShapeMismatch);
            }
            if i > 0 && layers[i - 1].output_dim != l.input_dim {
                return Err(NetError::BrokenChain {
                    index: i,
                    input: l.input_dim,
                    previous: layers[i - 1].output_dim,
                });
            }
            if !l.weights.iter().chain(&l.bias).all(|x| x.is_finite()) {
                return Err(NetError::NonFinite("layer parameters"));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.output_dim));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.input_dim == b.input_dim
                    && a.output_dim == b.output_dim
                    && a.activation == b.activation
            })
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), NetError> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        let cache = self.forward_batch(&x)?;
        Ok((cache.output().as_slice().to_vec(), cache))
    }

    /// Output only, without keeping intermediate activations.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix, NetError> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer_forward(layer, &x);
        }
        Ok(x)
    }

    pub fn forward_batch(&self, input: &Matrix) -> Result<ForwardCache, NetError> {
        self.check_input(input)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.clone());
        for layer in &self.layers {
            let next = layer_forward(layer, values.last().unwrap());
            values.push(next);
        }
        Ok(ForwardCache { values })
    }

    fn check_input(&self, input: &Matrix) -> Result<(), NetError> {
        if input.cols() != self.input_dim() {
            return Err(NetError::DimMismatch {
                expected: self.input_dim(),
                got: input.cols(),
            });
        }
        Ok(())
    }

    fn check_cache(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<(), NetError> {
        if cache.values.len() != self.layers.len() + 1
            || cache
                .values
                .iter()
                .skip(1)
                .zip(&self.layers)
                .any(|(v, l)| v.cols() != l.output_dim)
        {
            return Err(NetError::CacheMismatch);
        }
        let out = cache.output();
        if output_grad.rows() != out.rows() || output_grad.cols() != out.cols() {
            return Err(NetError::DimMismatch {
                expected: out.rows() * out.cols(),
                got: output_grad.rows() * output_grad.cols(),
            });
        }
        Ok(())
    }

    /// Gradients of `sum(output ⊙ output_grad)` with respect to every
    /// parameter and the input. Batch reductions are sums; callers fold any
    /// `1/B` into `output_grad`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &Matrix,
    ) -> Result<Gradients, NetError> {
        self.backprop(cache, output_grad, true)
    }

    /// Input gradient only; skips the weight-gradient products.
    pub fn backward_input(
        &self,
        cache: &ForwardCache,
        output_grad: &Matrix,
    ) -> Result<Matrix, NetError> {
        Ok(self.backprop(cache, output_grad, false)?.input)
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        output_grad: &Matrix,
        with_params: bool,
    ) -> Result<Gradients, NetError> {
        self.check_cache(cache, output_grad)?;
        let batch = output_grad.rows();
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        let mut delta = output_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                let out = &cache.values[i + 1];
                for (d, &o) in delta.data.iter_mut().zip(&out.data) {
                    *d = if o <= 0.0 { 0.0 } else { *d };
                }
            }
            let input = &cache.values[i];
            if with_params {
                let mut gw = vec![0.0; layer.weights.len()];
                gemm_tn(
                    &delta.data,
                    &input.data,
                    &mut gw,
                    layer.output_dim,
                    batch,
                    layer.input_dim,
                );
                let mut gb = vec![0.0; layer.output_dim];
                for r in 0..batch {
                    for (g, d) in gb.iter_mut().zip(delta.row(r)) {
                        *g += d;
                    }
                }
                grads.push(LayerGrad {
                    weights: gw,
                    bias: gb,
                });
            }
            let mut prev = Matrix::zeros(batch, layer.input_dim);
            gemm_nn(
                &delta.data,
                &layer.weights,
                &mut prev.data,
                batch,
                layer.output_dim,
                layer.input_dim,
            );
            delta = prev;
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            input: delta,
        })
    }

    /// `self ← tau·source + (1 − tau)·self`, elementwise.
    pub fn polyak_from(&mut self, source: &Mlp, tau: f64) -> Result<(), NetError> {
        if !self.same_shape(source) {
            return Err(NetError::ShapeMismatch);
        }
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            for (x, y) in t.weights.iter_mut().zip(&s.weights) {
                *x = tau * y + (1.0 - tau) * *x;
            }
            for (x, y) in t.bias.iter_mut().zip(&s.bias) {
                *x = tau * y + (1.0 - tau) * *x;
            }
        }
        Ok(())
    }
}

fn layer_forward(layer: &Layer, x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), layer.output_dim);
    gemm_nt(
        &x.data,
        &layer.weights,
        &mut out.data,
        x.rows(),
        layer.input_dim,
        layer.output_dim,
    );
    let relu = layer.activation == Activation::Relu;
    for row in out.data.chunks_exact_mut(layer.output_dim.max(1)) {
        for (v, b) in row.iter_mut().zip(&layer.bias) {
            *v += b;
        }
        if relu {
            // Select rather than branch: signs are close to random.
            for v in row.iter_mut() {
                *v = if *v < 0.0 { 0.0 } else { *v };
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam moments over a flat parameter vector.
///
/// An update whose gradient is zero everywhere decays the moments and
/// advances the step counter but leaves the parameters untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }

    pub fn for_network(net: &Mlp, config: AdamConfig) -> Self {
        Self::new(net.param_count(), config)
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One Adam update of `params` given `grads`, both flattened in the same
    /// order.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NetError> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(NetError::ShapeMismatch);
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(NetError::NonFinite("gradient"));
        }
        let apply = grads.iter().any(|&g| g != 0.0);
        self.step += 1;
        self.advance(0, params, grads, apply);
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<(), NetError> {
        if self.len() != net.param_count()
            || grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len())
        {
            return Err(NetError::ShapeMismatch);
        }
        if !grads.is_finite() {
            return Err(NetError::NonFinite("gradient"));
        }
        let apply = !grads.is_zero();
        self.step += 1;
        let mut offset = 0;
        for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
            for (p, g) in [(&mut layer.weights, &g.weights), (&mut layer.bias, &g.bias)] {
                let n = p.len();
                self.advance(offset, p, g, apply);
                offset += n;
            }
        }
        Ok(())
    }

    /// Updates moments (and, when `apply`, parameters) for the slice of the
    /// flattened parameter vector starting at `offset`. The caller bumps
    /// `step` first.
    fn advance(&mut self, offset: usize, params: &mut [f64], grads: &[f64], apply: bool) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let n = params.len();
        let m = &mut self.first_moment[offset..offset + n];
        let v = &mut self.second_moment[offset..offset + n];
        for i in 0..n {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            if apply {
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}
