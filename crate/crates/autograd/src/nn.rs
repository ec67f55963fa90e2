use ndarray::Axis;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Dense layer `y = x W + b`; `W` is `in × out`, `b` is `1 × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Uniform Glorot initialisation, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let weight = Matrix::from_shape_fn((inputs, outputs), |_| dist.sample(rng));
        Self {
            weight,
            bias: Matrix::zeros((1, outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

/// Multi-layer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every width including input and output, e.g. `[in, 64, 64, out]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers, activation }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    /// Scales the output layer, e.g. to start a head near zero.
    pub fn scale_output(&mut self, factor: f64) {
        let last = self.layers.last_mut().unwrap();
        last.weight *= factor;
        last.bias *= factor;
    }

    /// Forward pass without recording a graph.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight);
            h += &layer.bias;
            if i < last {
                match self.activation {
                    Activation::Relu => h.mapv_inplace(|v| v.max(0.0)),
                    Activation::Tanh => h.mapv_inplace(f64::tanh),
                }
            }
        }
        h
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Registers the parameters on `tape` as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        self.bind_with(tape, true)
    }

    /// Registers the parameters as constants (gradients stop here).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let params = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.var(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundMlp {
            params,
            activation: self.activation,
        }
    }

    /// `self ← (1 - tau) self + tau other`.
    pub fn polyak_from(&mut self, other: &Mlp, tau: f64) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.zip_mut_with(src, |d, &s| *d = (1.0 - tau) * *d + tau * s);
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp<'t> {
    pub params: Vec<Var<'t>>,
    activation: Activation,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        let n_layers = self.params.len() / 2;
        let mut h = x;
        for i in 0..n_layers {
            h = h.matmul(self.params[2 * i]) + self.params[2 * i + 1];
            if i + 1 < n_layers {
                h = match self.activation {
                    Activation::Relu => h.relu(),
                    Activation::Tanh => h.tanh(),
                };
            }
        }
        h
    }

    pub fn grads(&self, grads: &Gradients) -> Vec<Matrix> {
        self.params.iter().map(|&p| grads.wrt_or_zero(p)).collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Global L2 norm over a gradient list.
pub fn grad_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Stacks row vectors into a matrix.
pub fn stack_rows(rows: &[Vec<f64>]) -> Matrix {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut m = Matrix::zeros((rows.len(), cols));
    for (mut dst, src) in m.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(src.as_slice()));
    }
    m
}
