//! A small fully connected time-score network.
//!
//! The input is `[x; t]`, hidden layers use ELU, the output layer is linear.
//! Three differentiation modes are provided, and nothing more:
//!
//! * reverse-mode gradients with respect to the parameters,
//! * forward-mode derivative with respect to the time input, whose value can
//!   itself be differentiated with respect to the parameters (the
//!   integration-by-parts objective needs `d/dtheta d/dt s`),
//! * the Jacobian with respect to `x`.
//!
//! Batches are rows of an `ndarray` matrix so every layer is a single GEMM.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::ConditionalGaussianPath;
use crate::weighting::time_score_variance_per_dim;

/// Hidden widths used by the toy experiments.
pub const TOY_HIDDEN: [usize; 3] = [256, 256, 256];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNet {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    seed: u64,
    /// When set, the network predicts the time score divided by the
    /// conditional time-score standard deviation of this path (with `c = 1`).
    target_scale: Option<ConditionalGaussianPath>,
}

#[inline]
fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

#[inline]
fn elu_d(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

#[inline]
fn elu_dd(z: f64) -> f64 {
    if z > 0.0 {
        0.0
    } else {
        z.exp()
    }
}

struct Cache {
    /// Layer inputs; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Array2<f64>>,
    /// Time tangents of the layer inputs and pre-activations.
    input_tangents: Vec<Array2<f64>>,
    pre_tangents: Vec<Array2<f64>>,
}

impl ScoreNet {
    /// Builds a network `[dim + 1, hidden..., n_out]` with fan-in scaled
    /// uniform initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(dim: usize, hidden: &[usize], n_out: usize, seed: u64) -> Result<Self> {
        if dim == 0 || n_out == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidParameter("layer sizes must be positive".into()));
        }
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(dim + 1);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(n_out);
        let n_params = count_params(&layer_sizes);
        let mut params = Vec::with_capacity(n_params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Self { layer_sizes, params, seed, target_scale: None })
    }

    /// The `[D+1, 256, 256, 256, n_out]` architecture.
    pub fn toy(dim: usize, n_out: usize, seed: u64) -> Result<Self> {
        Self::new(dim, &TOY_HIDDEN, n_out, seed)
    }

    pub fn with_target_scale(mut self, path: Option<ConditionalGaussianPath>) -> Self {
        self.target_scale = path;
        self
    }

    pub fn target_scale(&self) -> Option<&ConditionalGaussianPath> {
        self.target_scale.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.layer_sizes[0] - 1
    }

    pub fn n_out(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.layer_sizes
            .windows(2)
            .take(layer)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn weights(&self, layer: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let (fan_in, fan_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        let off = self.layer_offset(layer);
        let w = ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_in * fan_out]).unwrap();
        let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        (w, b)
    }

    /// Assembles the `B x (D+1)` input matrix `[x; t]`.
    pub fn input_matrix(&self, xs: ArrayView2<'_, f64>, ts: &[f64]) -> Result<Array2<f64>> {
        let d = self.dim();
        if xs.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: xs.ncols() });
        }
        if ts.len() != xs.nrows() {
            return Err(Error::DimensionMismatch { expected: xs.nrows(), got: ts.len() });
        }
        let mut input = Array2::zeros((xs.nrows(), d + 1));
        input.slice_mut(s![.., ..d]).assign(&xs);
        input.column_mut(d).assign(&Array1::from(ts.to_vec()));
        Ok(input)
    }

    fn run_forward(&self, input: Array2<f64>, with_tangent: bool) -> (Cache, Array2<f64>, Option<Array2<f64>>) {
        let n = self.n_layers();
        let mut cache = Cache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            input_tangents: Vec::new(),
            pre_tangents: Vec::new(),
        };
        let mut h = input;
        let mut hd = if with_tangent {
            let mut e = Array2::zeros(h.raw_dim());
            e.column_mut(self.dim()).fill(1.0);
            Some(e)
        } else {
            None
        };
        for layer in 0..n {
            let (w, b) = self.weights(layer);
            let mut z = h.dot(&w.t());
            z += &ArrayView2::from_shape((1, b.len()), b).unwrap();
            let zd = hd.as_ref().map(|hd| hd.dot(&w.t()));
            let last = layer + 1 == n;
            let (h_next, hd_next) = if last {
                (z.clone(), zd.clone())
            } else {
                let h_next = z.mapv(elu);
                let hd_next = zd.as_ref().map(|zd| {
                    let mut out = zd.clone();
                    Zip::from(&mut out).and(&z).for_each(|o, &zz| *o *= elu_d(zz));
                    out
                });
                (h_next, hd_next)
            };
            cache.inputs.push(h);
            cache.pre.push(z);
            if let (Some(hd), Some(zd)) = (hd.take(), zd) {
                cache.input_tangents.push(hd);
                cache.pre_tangents.push(zd);
            }
            h = h_next;
            hd = hd_next;
        }
        (cache, h, hd)
    }

    /// Reverse sweep; returns the parameter gradient and the input gradient.
    fn run_backward(&self, cache: &Cache, up: Array2<f64>, up_tangent: Option<Array2<f64>>) -> (Vec<f64>, Array2<f64>) {
        let n = self.n_layers();
        let mut grad = vec![0.0; self.params.len()];
        let mut g = up;
        let mut gd = up_tangent;
        for layer in (0..n).rev() {
            let last = layer + 1 == n;
            let z = &cache.pre[layer];
            let (dz, dzd) = if last {
                (g, gd)
            } else {
                match gd {
                    Some(gd) => {
                        let zd = &cache.pre_tangents[layer];
                        let mut dz = g;
                        let mut dzd = gd;
                        Zip::from(&mut dz).and(&mut dzd).and(z).and(zd).for_each(|a, b, &zz, &zzd| {
                            let d1 = elu_d(zz);
                            *a = *a * d1 + *b * elu_dd(zz) * zzd;
                            *b *= d1;
                        });
                        (dz, Some(dzd))
                    }
                    None => {
                        let mut dz = g;
                        Zip::from(&mut dz).and(z).for_each(|a, &zz| *a *= elu_d(zz));
                        (dz, None)
                    }
                }
            };
            let (fan_in, fan_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
            let off = self.layer_offset(layer);
            {
                let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                let mut gw = ArrayViewMut2::from_shape((fan_out, fan_in), gw).unwrap();
                general_mat_mul(1.0, &dz.t(), &cache.inputs[layer], 0.0, &mut gw);
                if let Some(dzd) = &dzd {
                    general_mat_mul(1.0, &dzd.t(), &cache.input_tangents[layer], 1.0, &mut gw);
                }
                for (gbi, col) in gb.iter_mut().zip(dz.axis_iter(Axis(1))) {
                    *gbi = col.sum();
                }
            }
            let (w, _) = self.weights(layer);
            g = dz.dot(&w);
            gd = dzd.map(|dzd| dzd.dot(&w));
        }
        (grad, g)
    }

    /// Network outputs for a batch, shape `B x n_out`.
    pub fn forward_batch(&self, xs: ArrayView2<'_, f64>, ts: &[f64]) -> Result<Array2<f64>> {
        let input = self.input_matrix(xs, ts)?;
        Ok(self.run_forward(input, false).1)
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward_batch(xs, &[t])?.into_raw_vec_and_offset().0)
    }

    /// Outputs and the gradient of `sum_b upstream[b] . out[b]` w.r.t. the parameters.
    pub fn backward_batch(&self, xs: ArrayView2<'_, f64>, ts: &[f64], upstream: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_upstream(xs.nrows(), upstream)?;
        let input = self.input_matrix(xs, ts)?;
        let (cache, _, _) = self.run_forward(input, false);
        Ok(self.run_backward(&cache, upstream.to_owned(), None).0)
    }

    /// Forward pass followed by a reverse sweep whose upstream is computed
    /// from the outputs by `upstream_fn`.
    pub fn forward_backward<F>(&self, xs: ArrayView2<'_, f64>, ts: &[f64], upstream_fn: F) -> Result<(Array2<f64>, Vec<f64>)>
    where
        F: FnOnce(&Array2<f64>) -> Array2<f64>,
    {
        let input = self.input_matrix(xs, ts)?;
        let (cache, out, _) = self.run_forward(input, false);
        let up = upstream_fn(&out);
        self.check_upstream(xs.nrows(), up.view())?;
        let grad = self.run_backward(&cache, up, None).0;
        Ok((out, grad))
    }

    fn check_upstream(&self, rows: usize, upstream: ArrayView2<'_, f64>) -> Result<()> {
        if upstream.nrows() != rows || upstream.ncols() != self.n_out() {
            return Err(Error::DimensionMismatch { expected: self.n_out(), got: upstream.ncols() });
        }
        Ok(())
    }

    /// Reverse-mode gradient of `upstream . forward(x, t)` w.r.t. the parameters.
    pub fn grad_params(&self, x: &[f64], t: f64, upstream: &[f64]) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let up = ArrayView2::from_shape((1, upstream.len()), upstream)
            .map_err(|_| Error::DimensionMismatch { expected: self.n_out(), got: upstream.len() })?;
        self.backward_batch(xs, &[t], up)
    }

    /// Outputs and their exact derivative with respect to the time input.
    pub fn dt_forward_batch(&self, xs: ArrayView2<'_, f64>, ts: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        let input = self.input_matrix(xs, ts)?;
        let (_, out, outd) = self.run_forward(input, true);
        Ok((out, outd.unwrap()))
    }

    pub fn dt_forward(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let xs = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let (v, d) = self.dt_forward_batch(xs, &[t])?;
        Ok((v.into_raw_vec_and_offset().0, d.into_raw_vec_and_offset().0))
    }

    /// Parameter gradient of a loss that depends on both the outputs and
    /// their time derivatives. `upstream_fn` receives `(values, dvalues_dt)`
    /// and returns `(dL/dvalues, dL/d(dvalues_dt))`.
    pub fn dt_forward_backward<F>(
        &self,
        xs: ArrayView2<'_, f64>,
        ts: &[f64],
        upstream_fn: F,
    ) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)>
    where
        F: FnOnce(&Array2<f64>, &Array2<f64>) -> (Array2<f64>, Array2<f64>),
    {
        let input = self.input_matrix(xs, ts)?;
        let (cache, out, outd) = self.run_forward(input, true);
        let outd = outd.unwrap();
        let (up, up_t) = upstream_fn(&out, &outd);
        self.check_upstream(xs.nrows(), up.view())?;
        self.check_upstream(xs.nrows(), up_t.view())?;
        let grad = self.run_backward(&cache, up, Some(up_t)).0;
        Ok((out, outd, grad))
    }

    /// Gradient w.r.t. `x` of `sum_b upstream[b] . out[b]`, one row per sample.
    pub fn input_gradient_batch(&self, xs: ArrayView2<'_, f64>, ts: &[f64], upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_upstream(xs.nrows(), upstream)?;
        let input = self.input_matrix(xs, ts)?;
        let (cache, _, _) = self.run_forward(input, false);
        let g = self.run_backward(&cache, upstream.to_owned(), None).1;
        Ok(g.slice(s![.., ..self.dim()]).to_owned())
    }

    /// Jacobian of the outputs w.r.t. `x`, shape `n_out x D`.
    pub fn grad_x(&self, x: &[f64], t: f64) -> Result<Array2<f64>> {
        let n_out = self.n_out();
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        let xs = Array2::from_shape_fn((n_out, d), |(_, j)| x[j]);
        let ts = vec![t; n_out];
        let up = Array2::eye(n_out);
        self.input_gradient_batch(xs.view(), &ts, up.view())
    }

    /// Per-output factor that maps raw network outputs back to time-score
    /// units. Ones unless a target scale is configured.
    pub fn output_scale(&self, t: f64) -> f64 {
        match &self.target_scale {
            None => 1.0,
            Some(path) => {
                let per_dim = time_score_variance_per_dim(path, t, 1.0);
                if self.n_out() == 1 {
                    (per_dim * path.dim() as f64).sqrt()
                } else {
                    per_dim.sqrt()
                }
            }
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            layer_sizes: self.layer_sizes.clone(),
            n_out: self.n_out(),
            seed: self.seed,
            n_params: self.params.len(),
            target_scale: self.target_scale,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        for p in &self.params {
            f.write_all(&p.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        if header.layer_sizes.len() < 2
            || header.n_out != *header.layer_sizes.last().unwrap()
            || header.n_params != count_params(&header.layer_sizes)
        {
            return Err(Error::Checkpoint("header is inconsistent".into()));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != header.n_params * 8 {
            return Err(Error::Checkpoint(format!("expected {} parameter bytes, found {}", header.n_params * 8, bytes.len())));
        }
        let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { layer_sizes: header.layer_sizes, params, seed: header.seed, target_scale: header.target_scale })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layer_sizes: Vec<usize>,
    n_out: usize,
    seed: u64,
    n_params: usize,
    target_scale: Option<ConditionalGaussianPath>,
}

fn count_params(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Adam state with bias correction.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// One bias-corrected Adam update. Parameters are left untouched if any
    /// gradient entry is non-finite.
    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch { expected: self.m.len(), got: grads.len() });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NanGradient { index });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn random_input(net: &ScoreNet, seed: u64) -> (Vec<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..net.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        (x, rng.random_range(0.05..0.95))
    }

    #[test]
    fn zero_params_give_zero_output_and_jacobian() {
        let mut net = ScoreNet::new(3, &[5, 4], 2, 0).unwrap();
        net.params_mut().fill(0.0);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0], 0.4).unwrap(), vec![0.0, 0.0]);
        assert!(net.grad_x(&[1.0, 2.0, 3.0], 0.4).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reseeding_reproduces_parameters_and_outputs() {
        let a = ScoreNet::toy(2, 1, 9).unwrap();
        let b = ScoreNet::toy(2, 1, 9).unwrap();
        assert_eq!(a.params(), b.params());
        let ya = a.forward(&[0.3, -0.2], 0.5).unwrap();
        let yb = b.forward(&[0.3, -0.2], 0.5).unwrap();
        assert_eq!(ya[0].to_bits(), yb[0].to_bits());
        assert_ne!(ScoreNet::toy(2, 1, 10).unwrap().params(), a.params());
    }

    #[test]
    fn init_is_fan_in_bounded() {
        let net = ScoreNet::new(3, &[64], 1, 1).unwrap();
        let (w, _) = net.weights(0);
        assert!(w.iter().all(|v| v.abs() <= 0.5));
        let (w1, _) = net.weights(1);
        assert!(w1.iter().all(|v| v.abs() <= 0.125));
    }

    #[test]
    fn elu_is_continuous_at_zero() {
        let v = elu(1e-9) - elu(-1e-9);
        assert!(v.abs() < 1e-6);
        // one hidden unit with bias b and unit input weight; probe pre-activation +-1e-9
        let mut net = ScoreNet::new(1, &[1], 1, 0).unwrap();
        let p = net.params_mut();
        // layer 0: W = [1, 0], b = 0; layer 1: W = [1], b = 0
        p.copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0]);
        let hi = net.forward(&[1e-9], 0.0).unwrap()[0];
        let lo = net.forward(&[-1e-9], 0.0).unwrap()[0];
        assert!((hi - lo).abs() < 1e-6);
    }

    #[test]
    fn linear_net_time_derivative_and_jacobian() {
        // no hidden layer: s(x, t) = w_x . x + w_t t + b
        let mut net = ScoreNet::new(1, &[], 1, 0).unwrap();
        net.params_mut().copy_from_slice(&[0.7, -1.3, 0.2]);
        let (v, d) = net.dt_forward(&[2.0], 0.5).unwrap();
        assert!((v[0] - (1.4 - 0.65 + 0.2)).abs() < 1e-15);
        assert_eq!(d[0], -1.3);
        let j = net.grad_x(&[2.0], 0.5).unwrap();
        assert_eq!(j[[0, 0]], 0.7);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = ScoreNet::new(2, &[8, 8], 3, 4).unwrap();
        let g = net.grad_params(&[0.1, 0.2], 0.3, &[0.0, 0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let net = ScoreNet::new(2, &[16, 16], 2, 5).unwrap();
        let xs = Array2::from_shape_vec((3, 2), vec![0.1, 0.2, -1.0, 0.5, 2.0, -0.3]).unwrap();
        let ts = [0.1, 0.5, 0.9];
        let up = Array2::from_shape_vec((3, 2), vec![1.0, -0.5, 0.3, 2.0, -1.0, 0.7]).unwrap();
        let total = net.backward_batch(xs.view(), &ts, up.view()).unwrap();
        let mut sum = vec![0.0; net.n_params()];
        for b in 0..3 {
            let g = net.grad_params(xs.row(b).as_slice().unwrap(), ts[b], up.row(b).as_slice().unwrap()).unwrap();
            for (s, v) in sum.iter_mut().zip(g) {
                *s += v;
            }
        }
        for (a, b) in total.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn grad_params_matches_finite_differences() {
        let net = ScoreNet::new(3, &[12, 12], 2, 6).unwrap();
        let (x, t) = random_input(&net, 1);
        let up = [0.8, -1.1];
        let g = net.grad_params(&x, t, &up).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = |n: &ScoreNet| -> f64 { n.forward(&x, t).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum() };
        for _ in 0..50 {
            let i = rng.random_range(0..net.n_params());
            let h = 1e-6;
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn dt_forward_matches_finite_difference() {
        let net = ScoreNet::new(2, &[16, 16], 3, 7).unwrap();
        let (x, t) = random_input(&net, 3);
        let (_, d) = net.dt_forward(&x, t).unwrap();
        let h = 1e-5;
        let p = net.forward(&x, t + h).unwrap();
        let m = net.forward(&x, t - h).unwrap();
        for k in 0..3 {
            assert!((d[k] - (p[k] - m[k]) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn nested_gradient_matches_finite_differences() {
        let net = ScoreNet::new(2, &[10, 10], 1, 8).unwrap();
        let (x, t) = random_input(&net, 4);
        let xs = Array2::from_shape_vec((1, 2), x.clone()).unwrap();
        let (_, _, g) = net
            .dt_forward_backward(xs.view(), &[t], |v, _| (Array2::zeros(v.raw_dim()), Array2::ones(v.raw_dim())))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let i = rng.random_range(0..net.n_params());
            let h = 1e-6;
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (p.dt_forward(&x, t).unwrap().1[0] - m.dt_forward(&x, t).unwrap().1[0]) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn grad_x_matches_finite_differences() {
        let net = ScoreNet::new(3, &[16, 16], 2, 10).unwrap();
        let (x, t) = random_input(&net, 5);
        let j = net.grad_x(&x, t).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let p = net.forward(&xp, t).unwrap();
            let m = net.forward(&xm, t).unwrap();
            for k in 0..2 {
                assert!((j[[k, i]] - (p[k] - m[k]) / (2.0 * h)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = ScoreNet::new(2, &[4], 1, 0).unwrap();
        assert!(matches!(net.forward(&[1.0], 0.1), Err(Error::DimensionMismatch { .. })));
        assert!(net.grad_params(&[1.0, 2.0], 0.1, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = vec![1.0, -2.0];
        let mut opt = OptimState::new(2, 0.1);
        opt.adam_step(&mut params, &[0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut params = vec![0.0; 4];
        let mut opt = OptimState::new(4, 0.01);
        let g = [3.0, -0.2, 1e-2, -50.0];
        opt.adam_step(&mut params, &g).unwrap();
        for (p, gi) in params.iter().zip(g) {
            assert!((p + 0.01 * gi.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_rejects_nan() {
        let mut params = vec![0.0; 2];
        let mut opt = OptimState::new(2, 0.01);
        assert!(matches!(opt.adam_step(&mut params, &[0.0, f64::NAN]), Err(Error::NanGradient { index: 1 })));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("net.ckpt");
        let net = ScoreNet::new(2, &[6, 5], 2, 3).unwrap().with_target_scale(Some(ConditionalGaussianPath::vp_linear(2)));
        net.save_checkpoint(&file).unwrap();
        let back = ScoreNet::load_checkpoint(&file).unwrap();
        assert_eq!(net, back);
        let bytes = std::fs::read(&file).unwrap();
        let header_end = bytes.iter().position(|b| *b == b'\n').unwrap();
        assert_eq!(bytes.len() - header_end - 1, net.n_params() * 8);
    }
}
