//! Minimal feed-forward layers with hand-written backward passes.
//!
//! All trainable values live in one flat `Vec<f64>`; layers hold index ranges
//! into it. Gradients accumulate into an equally-shaped flat buffer. The flat
//! layout keeps finite-difference checks, optimizers, and per-parameter-group
//! queries (encoder of view v, decoder of view v, predictor) trivial.

use rand::Rng;
use rand_distr::StandardNormal;

pub type ParamRange = std::ops::Range<usize>;

/// Hands out disjoint ranges of the flat parameter vector.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    next: usize,
}

impl ParamAlloc {
    pub fn take(&mut self, len: usize) -> ParamRange {
        let start = self.next;
        self.next += len;
        start..self.next
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamRange,
    pub b: ParamRange,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn alloc(a: &mut ParamAlloc, in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: a.take(in_dim * out_dim),
            b: a.take(out_dim),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        let std = 1.0 / (self.in_dim as f64).sqrt();
        for v in &mut params[self.w.clone()] {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
        for v in &mut params[self.b.clone()] {
            *v = 0.0;
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let w = &params[self.w.clone()];
        let b = &params[self.b.clone()];
        let mut y = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            y.push(acc);
        }
        y
    }

    /// Accumulates parameter gradients into `dp` and input gradients into `dx`.
    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], dp: &mut [f64], dx: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.out_dim);
        debug_assert_eq!(dx.len(), self.in_dim);
        let w = &params[self.w.clone()];
        for o in 0..self.out_dim {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let drow = &mut dp[self.w.start + o * self.in_dim..self.w.start + (o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                drow[i] += g * x[i];
                dx[i] += g * row[i];
            }
            dp[self.b.start + o] += g;
        }
    }
}

/// 2-D convolution over a `(channels, height, width)` tensor stored flat.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamRange,
    pub b: ParamRange,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2d {
    pub fn alloc(
        a: &mut ParamAlloc,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    ) -> Self {
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        Self {
            w: a.take(out_ch * in_ch * kernel * kernel),
            b: a.take(out_ch),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            in_h,
            in_w,
            out_h,
            out_w,
        }
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        let fan_in = (self.in_ch * self.kernel * self.kernel) as f64;
        let std = 1.0 / fan_in.sqrt();
        for v in &mut params[self.w.clone()] {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
        for v in &mut params[self.b.clone()] {
            *v = 0.0;
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_len());
        let w = &params[self.w.clone()];
        let b = &params[self.b.clone()];
        let mut y = vec![0.0; self.out_len()];
        let k = self.kernel;
        for oc in 0..self.out_ch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let mut acc = b[oc];
                    for ic in 0..self.in_ch {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.in_w as isize {
                                    continue;
                                }
                                let xv = x[(ic * self.in_h + iy as usize) * self.in_w + ix as usize];
                                let wv = w[((oc * self.in_ch + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[(oc * self.out_h + oy) * self.out_w + ox] = acc;
                }
            }
        }
        y
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], dp: &mut [f64], dx: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.out_len());
        debug_assert_eq!(dx.len(), self.in_len());
        let w = &params[self.w.clone()];
        let k = self.kernel;
        for oc in 0..self.out_ch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let g = dy[(oc * self.out_h + oy) * self.out_w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    dp[self.b.start + oc] += g;
                    for ic in 0..self.in_ch {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.in_w as isize {
                                    continue;
                                }
                                let xi = (ic * self.in_h + iy as usize) * self.in_w + ix as usize;
                                let wi = ((oc * self.in_ch + ic) * k + ky) * k + kx;
                                dp[self.w.start + wi] += g * x[xi];
                                dx[xi] += g * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Multi-layer perceptron: linear layers with tanh between them (none after
/// the last layer).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Intermediate activations needed by `Mlp::backward`.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `inputs[k]` is the input fed to layer `k`; `inputs[0]` is the MLP input.
    pub inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`.
    pub fn alloc(a: &mut ParamAlloc, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "MLP needs input and output dimensions");
        let layers = dims
            .windows(2)
            .map(|w| Linear::alloc(a, w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().unwrap().in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(params, rng);
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(params, &cur);
            inputs.push(cur);
            if k + 1 < self.layers.len() {
                for v in &mut y {
                    *v = v.tanh();
                }
            }
            cur = y;
        }
        MlpCache {
            inputs,
            output: cur,
        }
    }

    /// Backward from `dout` (gradient w.r.t. the MLP output); returns the
    /// gradient w.r.t. the MLP input and accumulates parameter grads into `dp`.
    pub fn backward(&self, params: &[f64], cache: &MlpCache, dout: &[f64], dp: &mut [f64]) -> Vec<f64> {
        let mut d = dout.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let mut dx = vec![0.0; layer.in_dim];
            layer.backward(params, &cache.inputs[k], &d, dp, &mut dx);
            if k > 0 {
                // cache.inputs[k] is tanh(pre-activation of layer k-1)
                for (g, &t) in dx.iter_mut().zip(&cache.inputs[k]) {
                    *g *= 1.0 - t * t;
                }
            }
            d = dx;
        }
        d
    }
}

/// Numerically stable helpers shared by losses and heads.
pub mod ops {
    /// log(1 + exp(x)) without overflow.
    pub fn softplus(x: f64) -> f64 {
        if x > 30.0 {
            x
        } else if x < -30.0 {
            x.exp()
        } else {
            x.exp().ln_1p()
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

    /// In-place softmax.
    pub fn softmax(logits: &mut [f64]) {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in logits.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in logits.iter_mut() {
            *v /= sum;
        }
    }

    /// log(sum(exp(xs))).
    pub fn log_sum_exp(xs: &[f64]) -> f64 {
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    /// Central finite differences of `f` over `point`.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
        let mut p = point.to_vec();
        (0..p.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + eps;
                let hi = f(&p);
                p[i] = orig - eps;
                let lo = f(&p);
                p[i] = orig;
                (hi - lo) / (2.0 * eps)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut alloc = ParamAlloc::default();
        let mlp = Mlp::alloc(&mut alloc, &[3, 5, 2]);
        let mut params = vec![0.0; alloc.total()];
        let mut rng = stream(3, Domain::ParamInit, 0);
        mlp.init(&mut params, &mut rng);
        let x = [0.3, -0.8, 1.2];

        // Scalar objective: weighted sum of outputs (weights break symmetry).
        let loss = |p: &[f64]| {
            let out = mlp.forward(p, &x).output;
            out[0] * 1.3 - 0.7 * out[1] + 0.5 * out[0] * out[0]
        };

        let cache = mlp.forward(&params, &x);
        let dout = [1.3 + cache.output[0], -0.7];
        let mut dp = vec![0.0; params.len()];
        mlp.backward(&params, &cache, &dout, &mut dp);

        let fd = fd_grad(loss, &params, 1e-5);
        assert!(rel_err(&dp, &fd) < 1e-7, "rel err {}", rel_err(&dp, &fd));
    }

    #[test]
    fn mlp_input_gradient_matches_finite_differences() {
        let mut alloc = ParamAlloc::default();
        let mlp = Mlp::alloc(&mut alloc, &[4, 6, 3]);
        let mut params = vec![0.0; alloc.total()];
        mlp.init(&mut params, &mut stream(4, Domain::ParamInit, 0));
        let x = [0.1, 0.5, -0.4, 0.9];

        let loss = |xp: &[f64]| mlp.forward(&params, xp).output.iter().sum::<f64>();
        let cache = mlp.forward(&params, &x);
        let mut dp = vec![0.0; params.len()];
        let dx = mlp.backward(&params, &cache, &[1.0, 1.0, 1.0], &mut dp);

        let fd = fd_grad(loss, &x, 1e-6);
        assert!(rel_err(&dx, &fd) < 1e-8);
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut alloc = ParamAlloc::default();
        let conv = Conv2d::alloc(&mut alloc, 2, 3, 3, 2, 1, 6, 6);
        assert_eq!((conv.out_h, conv.out_w), (3, 3));
        let mut params = vec![0.0; alloc.total()];
        conv.init(&mut params, &mut stream(5, Domain::ParamInit, 0));
        let mut rng = stream(6, Domain::Eval, 0);
        let x = crate::rng::standard_normal_vec(&mut rng, conv.in_len());
        let weights = crate::rng::standard_normal_vec(&mut rng, conv.out_len());

        let loss = |p: &[f64]| {
            conv.forward(p, &x)
                .iter()
                .zip(&weights)
                .map(|(y, w)| y * w)
                .sum::<f64>()
        };

        let mut dp = vec![0.0; params.len()];
        let mut dx = vec![0.0; conv.in_len()];
        conv.backward(&params, &x, &weights, &mut dp, &mut dx);

        let fd = fd_grad(loss, &params, 1e-5);
        assert!(rel_err(&dp, &fd) < 1e-7);

        let loss_x = |xp: &[f64]| {
            conv.forward(&params, xp)
                .iter()
                .zip(&weights)
                .map(|(y, w)| y * w)
                .sum::<f64>()
        };
        let fdx = fd_grad(loss_x, &x, 1e-5);
        assert!(rel_err(&dx, &fdx) < 1e-7);
    }

    #[test]
    fn softmax_sums_to_one_and_shifts() {
        let mut a = vec![1.0, 2.0, 3.0];
        let mut b = vec![101.0, 102.0, 103.0];
        ops::softmax(&mut a);
        ops::softmax(&mut b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
