//! Dense row-major `f64` storage and the handful of kernels the model needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform samples in `[-half_width, half_width)`.
    pub fn uniform<R: Rng>(shape: &[usize], half_width: f64, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| rng.gen_range(-1.0..1.0) * half_width)
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// `out += self · x` for a 2-D tensor.
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        let cols = self.cols();
        debug_assert_eq!(x.len(), cols);
        debug_assert_eq!(out.len(), self.rows());
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(cols)) {
            *o += dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        self.matvec_acc(x, &mut out);
        out
    }

    /// `out += selfᵀ · g`.
    pub fn matvec_t_acc(&self, g: &[f64], out: &mut [f64]) {
        let cols = self.cols();
        debug_assert_eq!(g.len(), self.rows());
        debug_assert_eq!(out.len(), cols);
        for (&gi, row) in g.iter().zip(self.data.chunks_exact(cols)) {
            if gi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += gi * w;
            }
        }
    }

    /// `self += g ⊗ x` (outer product), the weight gradient of a matvec.
    pub fn outer_acc(&mut self, g: &[f64], x: &[f64]) {
        let cols = self.cols();
        debug_assert_eq!(g.len(), self.rows());
        debug_assert_eq!(x.len(), cols);
        for (&gi, row) in g.iter().zip(self.data.chunks_exact_mut(cols)) {
            if gi == 0.0 {
                continue;
            }
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += gi * xi;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|&x| x - lse).collect()
}

/// Gradient of `softmax` given the upstream gradient on its output.
pub fn softmax_backward(probs: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let inner = dot(probs, grad_out);
    probs
        .iter()
        .zip(grad_out)
        .map(|(&p, &g)| p * (g - inner))
        .collect()
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_matches_hand_values() {
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_agrees_with_softmax() {
        let xs = [0.3, -1.2, 4.0, 2.5];
        let p = softmax(&xs);
        let lp = log_softmax(&xs);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn matvec_transpose_is_adjoint() {
        let m = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = [0.5, -1.0, 2.0];
        let g = [3.0, -0.25];
        let mx = m.matvec(&x);
        let mut mtg = vec![0.0; 3];
        m.matvec_t_acc(&g, &mut mtg);
        assert!((dot(&mx, &g) - dot(&x, &mtg)).abs() < 1e-12);
    }
}
