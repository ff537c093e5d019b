//! Minimal neural-network plumbing shared by the encoder and generator:
//! parameter registry, dense layers, leaky-ReLU, and the Adam optimizer.

use ndarray::{Array1, Array2, ArrayViewMut};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Negative slope of every leaky-ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Mutable reference to one named parameter tensor and its gradient buffer.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

impl<'a> ParamRef<'a> {
    pub fn new<D: ndarray::Dimension>(
        name: &str,
        value: &'a mut ndarray::Array<f64, D>,
        grad: &'a mut ndarray::Array<f64, D>,
    ) -> Self {
        let shape = value.shape().to_vec();
        debug_assert_eq!(shape, grad.shape());
        ParamRef {
            name: name.to_string(),
            shape,
            value: value.as_slice_mut().expect("standard layout"),
            grad: grad.as_slice_mut().expect("standard layout"),
        }
    }
}

/// Anything holding trainable parameters.
pub trait Parameterized {
    fn params(&mut self) -> Vec<ParamRef<'_>>;
}

/// Prefixes every parameter name with `prefix.`.
pub fn with_prefix<'a>(prefix: &str, mut params: Vec<ParamRef<'a>>) -> Vec<ParamRef<'a>> {
    for p in &mut params {
        p.name = format!("{prefix}.{}", p.name);
    }
    params
}

pub fn zero_grads(params: Vec<ParamRef<'_>>) {
    for p in params {
        p.grad.fill(0.0);
    }
}

/// Samples N(0, std) into a mutable view.
pub fn fill_normal<R: Rng + ?Sized>(mut view: ArrayViewMut<'_, f64, ndarray::IxDyn>, std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("positive std");
    for v in view.iter_mut() {
        *v = dist.sample(rng);
    }
}

/// He-style init standard deviation for leaky-ReLU fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / fan_in as f64).sqrt()
}

pub fn leaky_relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| if v < 0.0 { v * LEAKY_SLOPE } else { v });
}

/// Backward of leaky-ReLU given the layer *output*; valid because the
/// activation preserves sign.
pub fn leaky_relu_backward_from_output<D: ndarray::Dimension>(
    output: &ndarray::Array<f64, D>,
    grad: &mut ndarray::Array<f64, D>,
) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &y| {
        if y < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    });
}

/// Copies into standard (row-major contiguous) layout only when needed;
/// matrix products with transposed operands can come back in other layouts.
pub fn to_standard<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(n_in: usize, n_out: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Linear {
            w: Array2::from_shape_fn((n_in, n_out), |_| dist.sample(rng)),
            b: Array1::zeros(n_out),
            gw: Array2::zeros((n_in, n_out)),
            gb: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f64>, grad_y: &Array2<f64>) -> Array2<f64> {
        self.gw += &x.t().dot(grad_y);
        self.gb += &grad_y.sum_axis(ndarray::Axis(0));
        grad_y.dot(&self.w.t())
    }

    /// Input gradient without touching parameter gradients.
    pub fn backward_input_only(&self, grad_y: &Array2<f64>) -> Array2<f64> {
        grad_y.dot(&self.w.t())
    }
}

impl Parameterized for Linear {
    fn params(&mut self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef::new("weight", &mut self.w, &mut self.gw),
            ParamRef::new("bias", &mut self.b, &mut self.gb),
        ]
    }
}

/// Adam with bias correction; state is keyed by parameter name so it survives
/// interleaved visits as long as names are stable.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: Vec<ParamRef<'_>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_forward_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = Linear::new(2, 3, 0.5, &mut rng);
        l.b = array![0.1, -0.2, 0.3];
        let x = array![[1.0, 2.0]];
        let y = l.forward(&x);
        for j in 0..3 {
            let expect = l.w[[0, j]] + 2.0 * l.w[[1, j]] + l.b[j];
            assert!((y[[0, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut l = Linear::new(3, 2, 0.8, &mut rng);
        let x = array![[0.2, -0.4, 1.1], [0.9, 0.3, -0.5]];
        // loss = sum(y * coeff)
        let coeff = array![[1.0, -2.0], [0.5, 0.25]];
        let y = l.forward(&x);
        let _ = y;
        let gx = l.backward(&x, &coeff);

        let loss = |l: &Linear, x: &Array2<f64>| -> f64 {
            l.forward(x).iter().zip(coeff.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        // weight grads
        for i in 0..3 {
            for j in 0..2 {
                let mut lp = l.clone();
                lp.w[[i, j]] += h;
                let mut lm = l.clone();
                lm.w[[i, j]] -= h;
                let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
                assert!((l.gw[[i, j]] - fd).abs() < 1e-6);
            }
        }
        // input grads
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&l, &xp) - loss(&l, &xm)) / (2.0 * h);
                assert!((gx[[i, j]] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut w = Array1::from_elem(4, 5.0);
        let mut g = Array1::zeros(4);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            for i in 0..4 {
                g[i] = 2.0 * w[i];
            }
            opt.step(vec![ParamRef::new("w", &mut w, &mut g)]);
        }
        for &v in w.iter() {
            assert!(v.abs() < 1e-3, "did not converge: {v}");
        }
    }

    #[test]
    fn leaky_relu_backward_uses_output_sign() {
        let mut x = Array1::from_vec(vec![1.5, -2.0, 0.0]);
        leaky_relu_inplace(&mut x);
        assert_eq!(x, Array1::from_vec(vec![1.5, -0.02, 0.0]));
        let mut g = Array1::from_elem(3, 1.0);
        leaky_relu_backward_from_output(&x, &mut g);
        assert_eq!(g, Array1::from_vec(vec![1.0, LEAKY_SLOPE, 1.0]));
    }
}
