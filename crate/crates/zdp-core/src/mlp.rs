//! Small dense networks with reverse-mode gradients, including gradients of
//! losses that read the network's input Jacobian.
//!
//! The map is `a_0 = x`, `s_l = W_l a_l + b_l`, `a_{l+1} = act(s_l)` on
//! hidden layers and identity on the last. Besides plain backprop, the
//! gradient routine handles loss terms seeded on `d f / d x`: each input
//! direction carries a forward tangent stream, and its reverse sweep couples
//! back into the primal adjoint through the activation curvature.

use nalgebra::{DMatrix, DVector};
use rand::RngExt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn act(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    // At the relu kink the subgradient 0 is used throughout.
    fn act_d(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh() * x.tanh(),
        }
    }

    fn act_dd(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

/// Fully connected network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activation: Activation,
}

/// Per-parameter gradient (or any other per-parameter direction).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: mlp.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    /// self += c * other.
    pub fn axpy(&mut self, other: &MlpGradients, c: f64) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            *w += o * c;
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            *b += o * c;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for w in &mut self.weights {
            *w *= c;
        }
        for b in &mut self.biases {
            *b *= c;
        }
    }

    pub fn norm(&self) -> f64 {
        let ws: f64 = self.weights.iter().map(|w| w.norm_squared()).sum();
        let bs: f64 = self.biases.iter().map(|b| b.norm_squared()).sum();
        (ws + bs).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

struct ForwardCache {
    /// a[l] is the input to layer l; a[L] is the output.
    a: Vec<DVector<f64>>,
    /// s[l] is the preactivation of layer l.
    s: Vec<DVector<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes` runs input to output.
    pub fn new<R: rand::Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                rng.random_range(-bound..bound)
            }));
            biases.push(DVector::zeros(fan_out));
        }
        Self {
            weights,
            biases,
            activation,
        }
    }

    /// Rebuild from stored parameters, checking the shapes chain together.
    pub fn from_parts(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::ModelFormat {
                line: 0,
                reason: "weight and bias layer counts differ or are empty".into(),
            });
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != b.len() {
                return Err(Error::ModelFormat {
                    line: 0,
                    reason: format!("layer {l}: bias length does not match weight rows"),
                });
            }
            if l > 0 && weights[l - 1].nrows() != w.ncols() {
                return Err(Error::ModelFormat {
                    line: 0,
                    reason: format!("layer {l}: input width does not match previous layer"),
                });
            }
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("nonempty").nrows()
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// self += scale * direction, layer by layer.
    pub fn apply_scaled(&mut self, direction: &MlpGradients, scale: f64) {
        assert_eq!(direction.weights.len(), self.weights.len());
        for (w, d) in self.weights.iter_mut().zip(&direction.weights) {
            *w += d * scale;
        }
        for (b, d) in self.biases.iter_mut().zip(&direction.biases) {
            *b += d * scale;
        }
    }

    fn forward_cache(&self, x: &DVector<f64>) -> ForwardCache {
        assert_eq!(x.len(), self.input_dim());
        let last = self.layer_count() - 1;
        let mut a = Vec::with_capacity(self.layer_count() + 1);
        let mut s = Vec::with_capacity(self.layer_count());
        a.push(x.clone());
        for l in 0..self.layer_count() {
            let pre = &self.weights[l] * &a[l] + &self.biases[l];
            let post = if l < last {
                pre.map(|v| self.activation.act(v))
            } else {
                pre.clone()
            };
            s.push(pre);
            a.push(post);
        }
        ForwardCache { a, s }
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        self.forward_cache(x)
            .a
            .pop()
            .expect("network has at least one layer")
    }

    /// d f / d x as an output_dim x input_dim matrix, by one forward tangent
    /// sweep per input direction.
    pub fn input_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let cache = self.forward_cache(x);
        let mut jac = DMatrix::zeros(self.output_dim(), self.input_dim());
        let last = self.layer_count() - 1;
        for j in 0..self.input_dim() {
            let mut t = DVector::zeros(self.input_dim());
            t[j] = 1.0;
            for l in 0..self.layer_count() {
                let mut pre = &self.weights[l] * &t;
                if l < last {
                    pre.zip_apply(&cache.s[l], |tv, sv| *tv *= self.activation.act_d(sv));
                }
                t = pre;
            }
            jac.set_column(j, &t);
        }
        jac
    }

    /// Parameter gradient of the scalar
    /// `out_seed . f(x) + sum_j jac_seed[:, j] . (d f / d x_j)`.
    ///
    /// Each input direction j runs a forward tangent stream and a reverse
    /// tangent-adjoint stream; the curvature of the activation couples those
    /// into the preactivation adjoints, which the final primal reverse sweep
    /// then carries down with the ordinary seeded backprop.
    pub fn loss_gradients(
        &self,
        x: &DVector<f64>,
        out_seed: &DVector<f64>,
        jac_seed: &DMatrix<f64>,
    ) -> MlpGradients {
        let nl = self.layer_count();
        let last = nl - 1;
        assert_eq!(out_seed.len(), self.output_dim());
        assert_eq!(jac_seed.nrows(), self.output_dim());
        assert_eq!(jac_seed.ncols(), self.input_dim());

        let cache = self.forward_cache(x);
        let mut grads = MlpGradients::zeros_like(self);
        // Accumulated preactivation adjoints sourced by the tangent sweeps.
        let mut sigma: Vec<DVector<f64>> = self.s_shapes().map(DVector::zeros).collect();

        for j in 0..self.input_dim() {
            // Forward tangents: t_in[l] enters layer l, t_pre[l] leaves its
            // weight product.
            let mut t_in: Vec<DVector<f64>> = Vec::with_capacity(nl);
            let mut t_pre: Vec<DVector<f64>> = Vec::with_capacity(nl);
            let mut t = DVector::zeros(self.input_dim());
            t[j] = 1.0;
            for l in 0..nl {
                t_in.push(t.clone());
                let pre = &self.weights[l] * &t;
                t = if l < last {
                    DVector::from_fn(pre.len(), |i, _| {
                        pre[i] * self.activation.act_d(cache.s[l][i])
                    })
                } else {
                    pre.clone()
                };
                t_pre.push(pre);
            }

            // Reverse tangent adjoint.
            let mut beta = jac_seed.column(j).into_owned();
            for l in (0..nl).rev() {
                grads.weights[l] += &beta * t_in[l].transpose();
                if l == 0 {
                    break;
                }
                let alpha = self.weights[l].transpose() * &beta;
                for i in 0..alpha.len() {
                    let sv = cache.s[l - 1][i];
                    sigma[l - 1][i] += self.activation.act_dd(sv) * t_pre[l - 1][i] * alpha[i];
                }
                beta = DVector::from_fn(alpha.len(), |i, _| {
                    alpha[i] * self.activation.act_d(cache.s[l - 1][i])
                });
            }
        }

        // Primal reverse sweep carrying both the output seed and the
        // curvature sources collected above.
        let mut gamma = out_seed.clone();
        for l in (0..nl).rev() {
            grads.weights[l] += &gamma * cache.a[l].transpose();
            grads.biases[l] += &gamma;
            if l == 0 {
                break;
            }
            let pi = self.weights[l].transpose() * &gamma;
            gamma = DVector::from_fn(pi.len(), |i, _| {
                sigma[l - 1][i] + pi[i] * self.activation.act_d(cache.s[l - 1][i])
            });
        }
        // sigma[last] is unused on purpose: the output layer is linear.
        grads
    }

    fn s_shapes(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights.iter().map(|w| w.nrows())
    }
}
