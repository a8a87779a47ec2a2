//! Learnable VLAD aggregation.
//!
//! A convolutional GRU runs over a sequence of `H×W×D` feature maps and its
//! `H×W×K` hidden state is used directly as the soft assignment of every
//! spatial location to `K` learnable cluster centers. Each timestep yields a
//! `K×D` residual descriptor, flattened k-major for the decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softmax, softmax_backward, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major `(h, w, c)`.
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "feature map of shape {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn at(&self, h: usize, w: usize, c: usize) -> f64 {
        self.values[(h * self.width + w) * self.channels + c]
    }

    /// Per-channel mean over all spatial positions.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.channels];
        for px in self.values.chunks_exact(self.channels) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v;
            }
        }
        let n = (self.height * self.width) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Same-padded 2-D convolution without bias. Kernel layout `[out, in, ks, ks]`,
/// activations `(h, w, c)`.
pub fn conv2d_same(kernel: &Tensor, input: &[f64], height: usize, width: usize) -> Vec<f64> {
    let (out_ch, in_ch, ks) = (kernel.shape[0], kernel.shape[1], kernel.shape[2]);
    let pad = ks / 2;
    let mut out = vec![0.0; height * width * out_ch];
    for y in 0..height {
        for x in 0..width {
            let o_base = (y * width + x) * out_ch;
            for ky in 0..ks {
                let sy = y as isize + ky as isize - pad as isize;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..ks {
                    let sx = x as isize + kx as isize - pad as isize;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    let i_base = (sy as usize * width + sx as usize) * in_ch;
                    let src = &input[i_base..i_base + in_ch];
                    for o in 0..out_ch {
                        let k_base = ((o * in_ch) * ks + ky) * ks + kx;
                        let mut acc = 0.0;
                        for (i, &s) in src.iter().enumerate() {
                            acc += kernel.data[k_base + i * ks * ks] * s;
                        }
                        out[o_base + o] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel and (optionally) input gradients of [`conv2d_same`].
pub fn conv2d_same_backward(
    kernel: &Tensor,
    input: &[f64],
    height: usize,
    width: usize,
    grad_out: &[f64],
    grad_kernel: &mut Tensor,
    mut grad_input: Option<&mut [f64]>,
) {
    let (out_ch, in_ch, ks) = (kernel.shape[0], kernel.shape[1], kernel.shape[2]);
    let pad = ks / 2;
    for y in 0..height {
        for x in 0..width {
            let g = &grad_out[(y * width + x) * out_ch..(y * width + x + 1) * out_ch];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..ks {
                let sy = y as isize + ky as isize - pad as isize;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..ks {
                    let sx = x as isize + kx as isize - pad as isize;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    let i_base = (sy as usize * width + sx as usize) * in_ch;
                    for (o, &go) in g.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        let k_base = ((o * in_ch) * ks + ky) * ks + kx;
                        for i in 0..in_ch {
                            grad_kernel.data[k_base + i * ks * ks] += go * input[i_base + i];
                        }
                        if let Some(gi) = grad_input.as_deref_mut() {
                            for i in 0..in_ch {
                                gi[i_base + i] += go * kernel.data[k_base + i * ks * ks];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// The six convolution kernels of the assignment network.
#[derive(Debug, Clone, PartialEq)]
pub struct CGruParameters {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_a: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_a: Tensor,
}

impl CGruParameters {
    pub fn zeros(channels: usize, clusters: usize, kernel_size: usize) -> Self {
        let input = [clusters, channels, kernel_size, kernel_size];
        let hidden = [clusters, clusters, kernel_size, kernel_size];
        CGruParameters {
            w_z: Tensor::zeros(&input),
            w_r: Tensor::zeros(&input),
            w_a: Tensor::zeros(&input),
            u_z: Tensor::zeros(&hidden),
            u_r: Tensor::zeros(&hidden),
            u_a: Tensor::zeros(&hidden),
        }
    }

    /// Uniform init with half-width `1/sqrt(fan_in)`.
    pub fn random<R: Rng>(channels: usize, clusters: usize, kernel_size: usize, rng: &mut R) -> Self {
        let input = [clusters, channels, kernel_size, kernel_size];
        let hidden = [clusters, clusters, kernel_size, kernel_size];
        let in_scale = 1.0 / ((channels * kernel_size * kernel_size) as f64).sqrt();
        let hid_scale = 1.0 / ((clusters * kernel_size * kernel_size) as f64).sqrt();
        CGruParameters {
            w_z: Tensor::uniform(&input, in_scale, rng),
            w_r: Tensor::uniform(&input, in_scale, rng),
            w_a: Tensor::uniform(&input, in_scale, rng),
            u_z: Tensor::uniform(&hidden, hid_scale, rng),
            u_r: Tensor::uniform(&hidden, hid_scale, rng),
            u_a: Tensor::uniform(&hidden, hid_scale, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_z.shape[1]
    }

    pub fn clusters(&self) -> usize {
        self.w_z.shape[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.w_z.shape[2]
    }

    fn named(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_a", &self.w_a),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_a", &self.u_a),
        ]
    }

    fn named_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_a,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_a,
        ]
    }
}

/// `H×W×K` hidden state of the C-GRU.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMap {
    pub height: usize,
    pub width: usize,
    pub clusters: usize,
    pub values: Vec<f64>,
}

impl AssignmentMap {
    pub fn zeros(height: usize, width: usize, clusters: usize) -> Self {
        AssignmentMap {
            height,
            width,
            clusters,
            values: vec![0.0; height * width * clusters],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCodebook {
    /// `[K, D]`.
    pub centers: Tensor,
}

impl ClusterCodebook {
    pub fn random<R: Rng>(clusters: usize, channels: usize, rng: &mut R) -> Self {
        ClusterCodebook {
            centers: Tensor::uniform(&[clusters, channels], 1.0 / (channels as f64).sqrt(), rng),
        }
    }

    pub fn clusters(&self) -> usize {
        self.centers.rows()
    }
}

fn check_input(params: &CGruParameters, x: &FeatureMap) -> Result<()> {
    if x.channels != params.channels() {
        return Err(Error::invalid(format!(
            "feature map has {} channels, model expects {}",
            x.channels,
            params.channels()
        )));
    }
    Ok(())
}

struct StepCache {
    a_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    gated: Vec<f64>,
    candidate: Vec<f64>,
}

fn cgru_forward(params: &CGruParameters, x: &FeatureMap, a_prev: &[f64]) -> (Vec<f64>, StepCache) {
    let (h, w) = (x.height, x.width);
    let conv = |k: &Tensor, v: &[f64]| conv2d_same(k, v, h, w);
    let add = |a: Vec<f64>, b: Vec<f64>| a.into_iter().zip(b).map(|(p, q)| p + q).collect::<Vec<_>>();

    let z: Vec<f64> = add(conv(&params.w_z, &x.values), conv(&params.u_z, a_prev))
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = add(conv(&params.w_r, &x.values), conv(&params.u_r, a_prev))
        .into_iter()
        .map(sigmoid)
        .collect();
    let gated: Vec<f64> = r.iter().zip(a_prev).map(|(r, a)| r * a).collect();
    let candidate: Vec<f64> = add(conv(&params.w_a, &x.values), conv(&params.u_a, &gated))
        .into_iter()
        .map(f64::tanh)
        .collect();
    let a: Vec<f64> = (0..a_prev.len())
        .map(|i| (1.0 - z[i]) * a_prev[i] + z[i] * candidate[i])
        .collect();
    (
        a,
        StepCache {
            a_prev: a_prev.to_vec(),
            z,
            r,
            gated,
            candidate,
        },
    )
}

/// One C-GRU update of the assignment map.
pub fn cgru_step(
    params: &CGruParameters,
    x: &FeatureMap,
    a_prev: &AssignmentMap,
) -> Result<AssignmentMap> {
    check_input(params, x)?;
    if (a_prev.height, a_prev.width, a_prev.clusters) != (x.height, x.width, params.clusters()) {
        return Err(Error::invalid("assignment map shape does not match input"));
    }
    let (values, _) = cgru_forward(params, x, &a_prev.values);
    Ok(AssignmentMap {
        height: x.height,
        width: x.width,
        clusters: params.clusters(),
        values,
    })
}

/// Runs the C-GRU over a sequence from a zero initial state.
pub fn assign_sequence(params: &CGruParameters, xs: &[&FeatureMap]) -> Result<Vec<AssignmentMap>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("cannot assign an empty sequence"))?;
    let mut a = AssignmentMap::zeros(first.height, first.width, params.clusters());
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        if x.shape() != first.shape() {
            return Err(Error::invalid("feature map shape changes within a sequence"));
        }
        a = cgru_step(params, x, &a)?;
        out.push(a.clone());
    }
    Ok(out)
}

/// Soft-assignment VLAD: `vl[k,:] = Σ_hw a(h,w,k) (x(h,w,:) - c_k)`, flattened k-major.
pub fn vlad_encode_step(
    x: &FeatureMap,
    a: &AssignmentMap,
    codebook: &ClusterCodebook,
) -> Result<Vec<f64>> {
    let (k_n, d_n) = (codebook.centers.rows(), codebook.centers.cols());
    if x.channels != d_n || a.clusters != k_n || (a.height, a.width) != (x.height, x.width) {
        return Err(Error::invalid(format!(
            "vlad shapes disagree: x {:?}, a ({},{},{}), codebook {k_n}x{d_n}",
            x.shape(),
            a.height,
            a.width,
            a.clusters
        )));
    }
    Ok(vlad_raw(&x.values, &a.values, &codebook.centers))
}

/// VLAD descriptor at every step of a trajectory, raw assignments.
pub fn encode_trajectory(
    features: &[&FeatureMap],
    params: &CGruParameters,
    codebook: &ClusterCodebook,
) -> Result<Vec<Vec<f64>>> {
    let assignments = assign_sequence(params, features)?;
    features
        .iter()
        .zip(&assignments)
        .map(|(x, a)| vlad_encode_step(x, a, codebook))
        .collect()
}

fn vlad_raw(x: &[f64], a: &[f64], centers: &Tensor) -> Vec<f64> {
    let (k_n, d_n) = (centers.rows(), centers.cols());
    let mut out = vec![0.0; k_n * d_n];
    let mut mass = vec![0.0; k_n];
    for (px, assign) in x.chunks_exact(d_n).zip(a.chunks_exact(k_n)) {
        for k in 0..k_n {
            let weight = assign[k];
            mass[k] += weight;
            let row = &mut out[k * d_n..(k + 1) * d_n];
            for (o, v) in row.iter_mut().zip(px) {
                *o += weight * v;
            }
        }
    }
    for k in 0..k_n {
        for d in 0..d_n {
            out[k * d_n + d] -= mass[k] * centers.data[k * d_n + d];
        }
    }
    out
}

/// How the C-GRU hidden state becomes VLAD weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMode {
    /// Hidden state used as-is.
    #[default]
    Raw,
    /// Softmax over the K clusters at each location.
    Softmax,
}

/// One learnable VLAD model: assignment network plus codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct VladModel {
    pub cgru: CGruParameters,
    pub codebook: ClusterCodebook,
    pub mode: AssignmentMode,
}

/// Intermediate values of [`VladModel::encode`] needed for backprop.
pub struct VladTape {
    height: usize,
    width: usize,
    steps: Vec<StepCache>,
    weights: Vec<Vec<f64>>,
}

impl VladModel {
    pub fn random<R: Rng>(
        channels: usize,
        clusters: usize,
        kernel_size: usize,
        mode: AssignmentMode,
        rng: &mut R,
    ) -> Self {
        let cgru = CGruParameters::random(channels, clusters, kernel_size, rng);
        let codebook = ClusterCodebook::random(clusters, channels, rng);
        VladModel { cgru, codebook, mode }
    }

    pub fn zeros_like(&self) -> Self {
        VladModel {
            cgru: CGruParameters::zeros(self.cgru.channels(), self.cgru.clusters(), self.cgru.kernel_size()),
            codebook: ClusterCodebook {
                centers: self.codebook.centers.zeros_like(),
            },
            mode: self.mode,
        }
    }

    /// Descriptor length `K·D`.
    pub fn descriptor_len(&self) -> usize {
        self.codebook.centers.len()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<_> = self.cgru.named().into();
        out.push(("codebook", &self.codebook.centers));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<_> = self.cgru.named_mut().into();
        out.push(&mut self.codebook.centers);
        out
    }

    fn weights_for(&self, a: &[f64]) -> Vec<f64> {
        match self.mode {
            AssignmentMode::Raw => a.to_vec(),
            AssignmentMode::Softmax => a
                .chunks_exact(self.cgru.clusters())
                .flat_map(softmax)
                .collect(),
        }
    }

    /// Per-timestep flattened VLAD descriptors for one sequence.
    pub fn encode(&self, xs: &[&FeatureMap]) -> Result<Vec<Vec<f64>>> {
        self.encode_with_tape(xs).map(|(out, _)| out)
    }

    pub fn encode_with_tape(&self, xs: &[&FeatureMap]) -> Result<(Vec<Vec<f64>>, VladTape)> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("cannot encode an empty sequence"))?;
        let (height, width) = (first.height, first.width);
        let k_n = self.cgru.clusters();
        let mut a = vec![0.0; height * width * k_n];
        let mut steps = Vec::with_capacity(xs.len());
        let mut weights = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            check_input(&self.cgru, x)?;
            if x.shape() != first.shape() {
                return Err(Error::invalid("feature map shape changes within a sequence"));
            }
            let (next, cache) = cgru_forward(&self.cgru, x, &a);
            let wts = self.weights_for(&next);
            out.push(vlad_raw(&x.values, &wts, &self.codebook.centers));
            weights.push(wts);
            steps.push(cache);
            a = next;
        }
        Ok((
            out,
            VladTape {
                height,
                width,
                steps,
                weights,
            },
        ))
    }

    /// Backprop through [`VladModel::encode_with_tape`]. `grad_out[t]` is the
    /// loss gradient on descriptor `t`; parameter gradients accumulate into
    /// `grads`, input gradients into `grad_inputs` when given.
    pub fn backward(
        &self,
        xs: &[&FeatureMap],
        tape: &VladTape,
        grad_out: &[Vec<f64>],
        grads: &mut VladModel,
        mut grad_inputs: Option<&mut [Vec<f64>]>,
    ) {
        let (h, w) = (tape.height, tape.width);
        let k_n = self.cgru.clusters();
        let d_n = self.cgru.channels();
        let hw = h * w;
        let centers = &self.codebook.centers;
        let mut grad_a_next = vec![0.0; hw * k_n];

        for t in (0..xs.len()).rev() {
            let x = &xs[t].values;
            let g = &grad_out[t];
            let weights = &tape.weights[t];
            let cache = &tape.steps[t];

            // VLAD residual accumulation.
            let mut grad_weights = vec![0.0; hw * k_n];
            let mut grad_x = vec![0.0; hw * d_n];
            for p in 0..hw {
                let px = &x[p * d_n..(p + 1) * d_n];
                for k in 0..k_n {
                    let gk = &g[k * d_n..(k + 1) * d_n];
                    let ck = &centers.data[k * d_n..(k + 1) * d_n];
                    let wt = weights[p * k_n + k];
                    let mut acc = 0.0;
                    for d in 0..d_n {
                        acc += gk[d] * (px[d] - ck[d]);
                        grad_x[p * d_n + d] += wt * gk[d];
                        grads.codebook.centers.data[k * d_n + d] -= wt * gk[d];
                    }
                    grad_weights[p * k_n + k] = acc;
                }
            }

            let mut grad_a = grad_a_next.clone();
            match self.mode {
                AssignmentMode::Raw => {
                    for (ga, gw) in grad_a.iter_mut().zip(&grad_weights) {
                        *ga += gw;
                    }
                }
                AssignmentMode::Softmax => {
                    for p in 0..hw {
                        let s = &weights[p * k_n..(p + 1) * k_n];
                        let back = softmax_backward(s, &grad_weights[p * k_n..(p + 1) * k_n]);
                        for (ga, b) in grad_a[p * k_n..(p + 1) * k_n].iter_mut().zip(back) {
                            *ga += b;
                        }
                    }
                }
            }

            // Gate algebra.
            let n = grad_a.len();
            let mut grad_prev = vec![0.0; n];
            let mut grad_pre_z = vec![0.0; n];
            let mut grad_pre_a = vec![0.0; n];
            for i in 0..n {
                let z = cache.z[i];
                let cand = cache.candidate[i];
                grad_prev[i] = grad_a[i] * (1.0 - z);
                grad_pre_z[i] = grad_a[i] * (cand - cache.a_prev[i]) * z * (1.0 - z);
                grad_pre_a[i] = grad_a[i] * z * (1.0 - cand * cand);
            }

            conv2d_same_backward(&self.cgru.w_a, x, h, w, &grad_pre_a, &mut grads.cgru.w_a, Some(&mut grad_x));
            let mut grad_gated = vec![0.0; n];
            conv2d_same_backward(
                &self.cgru.u_a,
                &cache.gated,
                h,
                w,
                &grad_pre_a,
                &mut grads.cgru.u_a,
                Some(&mut grad_gated),
            );
            let mut grad_pre_r = vec![0.0; n];
            for i in 0..n {
                let r = cache.r[i];
                grad_prev[i] += grad_gated[i] * r;
                grad_pre_r[i] = grad_gated[i] * cache.a_prev[i] * r * (1.0 - r);
            }
            conv2d_same_backward(&self.cgru.w_r, x, h, w, &grad_pre_r, &mut grads.cgru.w_r, Some(&mut grad_x));
            conv2d_same_backward(
                &self.cgru.u_r,
                &cache.a_prev,
                h,
                w,
                &grad_pre_r,
                &mut grads.cgru.u_r,
                Some(&mut grad_prev),
            );
            conv2d_same_backward(&self.cgru.w_z, x, h, w, &grad_pre_z, &mut grads.cgru.w_z, Some(&mut grad_x));
            conv2d_same_backward(
                &self.cgru.u_z,
                &cache.a_prev,
                h,
                w,
                &grad_pre_z,
                &mut grads.cgru.u_z,
                Some(&mut grad_prev),
            );

            if let Some(gi) = grad_inputs.as_deref_mut() {
                for (acc, v) in gi[t].iter_mut().zip(&grad_x) {
                    *acc += v;
                }
            }
            grad_a_next = grad_prev;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn filled(shape: &[usize], v: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.fill(v);
        t
    }

    fn unit_params(ks: usize) -> CGruParameters {
        CGruParameters {
            w_z: filled(&[1, 1, ks, ks], 1.0),
            w_r: filled(&[1, 1, ks, ks], 1.0),
            w_a: filled(&[1, 1, ks, ks], 1.0),
            u_z: filled(&[1, 1, ks, ks], 1.0),
            u_r: filled(&[1, 1, ks, ks], 1.0),
            u_a: filled(&[1, 1, ks, ks], 1.0),
        }
    }

    #[test]
    fn scalar_step_matches_hand_evaluation() {
        for ks in [1, 3] {
            let x = FeatureMap::new(1, 1, 1, vec![1.0]).unwrap();
            let a = cgru_step(&unit_params(ks), &x, &AssignmentMap::zeros(1, 1, 1)).unwrap();
            let z = 1.0 / (1.0 + (-1f64).exp());
            assert!((z - 0.731059).abs() < 1e-6);
            assert!((a.values[0] - z * 1f64.tanh()).abs() < 1e-12);
            assert!((a.values[0] - 0.556770).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_kernels_halve_the_state() {
        let params = CGruParameters::zeros(2, 3, 3);
        let x = FeatureMap::new(1, 2, 2, vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let prev = AssignmentMap {
            height: 1,
            width: 2,
            clusters: 3,
            values: vec![0.2, -0.4, 0.9, 0.0, 0.6, -0.8],
        };
        let next = cgru_step(&params, &x, &prev).unwrap();
        for (n, p) in next.values.iter().zip(&prev.values) {
            assert_eq!(*n, 0.5 * p);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let params = CGruParameters::zeros(1, 1, 3);
        assert!(assign_sequence(&params, &[]).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let params = CGruParameters::zeros(2, 1, 3);
        let x = FeatureMap::zeros(1, 1, 3);
        assert!(cgru_step(&params, &x, &AssignmentMap::zeros(1, 1, 1)).is_err());
    }

    #[test]
    fn one_hot_assignment_gives_single_residual() {
        let x = FeatureMap::new(1, 1, 2, vec![3.0, -1.0]).unwrap();
        let codebook = ClusterCodebook {
            centers: Tensor::from_vec(&[3, 2], vec![1.0, 1.0, 0.5, 0.25, -2.0, 2.0]),
        };
        let a = AssignmentMap {
            height: 1,
            width: 1,
            clusters: 3,
            values: vec![0.0, 1.0, 0.0],
        };
        let vl = vlad_encode_step(&x, &a, &codebook).unwrap();
        assert_eq!(vl, vec![0.0, 0.0, 2.5, -1.25, 0.0, 0.0]);
    }

    #[test]
    fn conv_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kernel = Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
        let (h, w) = (3, 4);
        let x: Vec<f64> = (0..h * w * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = conv2d_same(&kernel, &x, h, w);
        let mut gk = kernel.zeros_like();
        let mut gx = vec![0.0; x.len()];
        conv2d_same_backward(&kernel, &x, h, w, &g, &mut gk, Some(&mut gx));
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // The convolution is linear in the kernel as well.
        let rhs_k: f64 = kernel.data.iter().zip(&gk.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_k).abs() < 1e-10);
    }

    #[test]
    fn softmax_mode_weights_sum_to_one_per_location() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = VladModel::random(2, 3, 3, AssignmentMode::Softmax, &mut rng);
        let w = model.weights_for(&[0.1, -0.3, 0.7, 0.0, 0.0, 0.0]);
        assert!((w[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
