//! Layer primitives with explicit backward passes.
//!
//! Sequences are `L x C` matrices (time-major rows). Every layer's `backward`
//! accumulates parameter gradients into a gradient struct of the same type as
//! the layer and returns the gradient with respect to its input.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng as _;

use crate::rng::Rng;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; checkpointed but never optimized or regularized.
    Buffer,
}

/// Hierarchically named parameter traversal.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayView2<'_, f64>, ParamKind));
    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMut2<'_, f64>, ParamKind),
    );
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Array2<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayView2<'_, f64>, ParamKind)) {
        f(prefix, self.view(), ParamKind::Trainable);
    }
    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMut2<'_, f64>, ParamKind),
    ) {
        f(prefix, self.view_mut(), ParamKind::Trainable);
    }
}

impl Params for Array1<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayView2<'_, f64>, ParamKind)) {
        f(
            prefix,
            self.view().insert_axis(Axis(0)),
            ParamKind::Trainable,
        );
    }
    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMut2<'_, f64>, ParamKind),
    ) {
        f(
            prefix,
            self.view_mut().insert_axis(Axis(0)),
            ParamKind::Trainable,
        );
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayView2<'_, f64>, ParamKind)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMut2<'_, f64>, ParamKind),
    ) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Implements [`Params`] for a struct by visiting the listed fields in order.
macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Params for $ty {
            fn visit(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, ndarray::ArrayView2<'_, f64>, $crate::nn::ParamKind),
            ) {
                $( self.$field.visit(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, ndarray::ArrayViewMut2<'_, f64>, $crate::nn::ParamKind),
            ) {
                $( self.$field.visit_mut(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_params;

/// Flattened views used by the optimizer, regularizer and gradient checks.
pub trait ParamsExt: Params + Clone {
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, mut v, _| v.fill(0.0));
        z
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v, k| {
            if k == ParamKind::Trainable {
                n += v.len();
            }
        });
        n
    }

    fn flat_trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, v, k| {
            if k == ParamKind::Trainable {
                out.extend(v.iter().copied());
            }
        });
        out
    }

    fn set_flat_trainable(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut("", &mut |_, mut v, k| {
            if k == ParamKind::Trainable {
                for x in v.iter_mut() {
                    *x = flat[pos];
                    pos += 1;
                }
            }
        });
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    /// Sum of squares of all trainable values.
    fn sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit("", &mut |_, v, k| {
            if k == ParamKind::Trainable {
                acc += v.iter().map(|x| x * x).sum::<f64>();
            }
        });
        acc
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _, _| out.push(n.to_string()));
        out
    }
}

impl<T: Params + Clone> ParamsExt for T {}

fn uniform_fill(m: &mut Mat, bound: f64, rng: &mut Rng) {
    m.mapv_inplace(|_| rng.random_range(-bound..=bound));
}

/// A pointwise (width-1) convolution, i.e. an affine map applied per snippet.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `out x in`
    pub weight: Mat,
    pub bias: Array1<f64>,
}

impl_params!(Linear { weight, bias });

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let mut l = Self::zeros(input, output);
        uniform_fill(&mut l.weight, 1.0 / (input as f64).sqrt(), rng);
        l
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight)
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn backward_params(&self, x: &Mat, dy: &Mat, grad: &mut Linear) {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

/// Zero-padded stride-1 temporal convolution of odd width `k`, computed as
/// an unfold followed by a [`Linear`] over `k * in` columns. Column block `t`
/// of the unfolded input holds row `j + t - (k-1)/2`.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    pub width: usize,
    pub linear: Linear,
}

impl_params!(TemporalConv { linear });

pub fn unfold(x: &Mat, width: usize) -> Mat {
    let (len, ch) = x.dim();
    let pad = (width - 1) / 2;
    let mut cols = Mat::zeros((len, width * ch));
    for t in 0..width {
        // Output row j reads input row j + t - pad.
        let lo = pad.saturating_sub(t);
        let hi = (len + pad).saturating_sub(t).min(len);
        if lo >= hi {
            continue;
        }
        let src_lo = lo + t - pad;
        let src_hi = hi + t - pad;
        cols.slice_mut(s![lo..hi, t * ch..(t + 1) * ch])
            .assign(&x.slice(s![src_lo..src_hi, ..]));
    }
    cols
}

pub fn fold(cols: &Mat, width: usize, ch: usize) -> Mat {
    let len = cols.nrows();
    let pad = (width - 1) / 2;
    let mut x = Mat::zeros((len, ch));
    for t in 0..width {
        let lo = pad.saturating_sub(t);
        let hi = (len + pad).saturating_sub(t).min(len);
        if lo >= hi {
            continue;
        }
        let src_lo = lo + t - pad;
        let src_hi = hi + t - pad;
        let mut dst = x.slice_mut(s![src_lo..src_hi, ..]);
        dst += &cols.slice(s![lo..hi, t * ch..(t + 1) * ch]);
    }
    x
}

impl TemporalConv {
    pub fn init(input: usize, output: usize, width: usize, rng: &mut Rng) -> Self {
        assert!(width % 2 == 1, "temporal convolution width must be odd");
        Self {
            width,
            linear: Linear::init(width * input, output, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.linear.input_dim() / self.width
    }

    /// Weight of tap `t` from input channel `c` to output channel `o`.
    pub fn tap(&self, o: usize, t: usize, c: usize) -> f64 {
        self.linear.weight[[o, t * self.input_dim() + c]]
    }

    pub fn forward(&self, x: &Mat) -> (Mat, Mat) {
        let cols = unfold(x, self.width);
        let y = self.linear.forward(&cols);
        (y, cols)
    }

    pub fn backward(&self, cols: &Mat, dy: &Mat, grad: &mut TemporalConv) -> Mat {
        let dcols = self.linear.backward(cols, dy, &mut grad.linear);
        fold(&dcols, self.width, self.input_dim())
    }
}

pub fn relu(x: &Mat) -> Mat {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Mat, dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Running statistics wrapper so they are tagged as buffers.
#[derive(Debug, Clone)]
pub struct Buffer(pub Array1<f64>);

impl Params for Buffer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayView2<'_, f64>, ParamKind)) {
        f(
            prefix,
            self.0.view().insert_axis(Axis(0)),
            ParamKind::Buffer,
        );
    }
    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, ArrayViewMut2<'_, f64>, ParamKind),
    ) {
        f(
            prefix,
            self.0.view_mut().insert_axis(Axis(0)),
            ParamKind::Buffer,
        );
    }
}

/// Per-channel normalization over all rows of all samples in a batch.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Buffer,
    pub running_var: Buffer,
}

impl_params!(BatchNorm {
    gamma,
    beta,
    running_mean,
    running_var
});

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BatchNormCache {
    xhat: Vec<Mat>,
    inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    /// Unbiased batch variance, folded into the running estimate.
    pub batch_var_unbiased: Array1<f64>,
}

impl BatchNorm {
    pub fn new(ch: usize) -> Self {
        Self {
            gamma: Array1::ones(ch),
            beta: Array1::zeros(ch),
            running_mean: Buffer(Array1::zeros(ch)),
            running_var: Buffer(Array1::ones(ch)),
        }
    }

    pub fn forward_train(&self, xs: &[Mat]) -> (Vec<Mat>, BatchNormCache) {
        let ch = self.gamma.len();
        let n: usize = xs.iter().map(|x| x.nrows()).sum();
        let mut mean = Array1::<f64>::zeros(ch);
        for x in xs {
            mean += &x.sum_axis(Axis(0));
        }
        mean /= n as f64;
        let mut var = Array1::<f64>::zeros(ch);
        for x in xs {
            let centered = x - &mean;
            var += &(&centered * &centered).sum_axis(Axis(0));
        }
        let biased = &var / n as f64;
        let unbiased = if n > 1 {
            &var / (n - 1) as f64
        } else {
            biased.clone()
        };
        let inv_std = biased.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat: Vec<Mat> = xs.iter().map(|x| (x - &mean) * &inv_std).collect();
        let ys = xhat.iter().map(|h| h * &self.gamma + &self.beta).collect();
        (
            ys,
            BatchNormCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: unbiased,
            },
        )
    }

    pub fn forward_eval(&self, x: &Mat) -> Mat {
        let inv_std = self.running_var.0.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        (x - &self.running_mean.0) * &(inv_std * &self.gamma) + &self.beta
    }

    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let m = BN_MOMENTUM;
        self.running_mean.0 = &self.running_mean.0 * (1.0 - m) + &cache.batch_mean * m;
        self.running_var.0 = &self.running_var.0 * (1.0 - m) + &cache.batch_var_unbiased * m;
    }

    pub fn backward_train(
        &self,
        cache: &BatchNormCache,
        dys: &[Mat],
        grad: &mut BatchNorm,
    ) -> Vec<Mat> {
        let ch = self.gamma.len();
        let n: usize = dys.iter().map(|d| d.nrows()).sum();
        let mut sum_dxhat = Array1::<f64>::zeros(ch);
        let mut sum_dxhat_xhat = Array1::<f64>::zeros(ch);
        let dxhats: Vec<Mat> = dys.iter().map(|dy| dy * &self.gamma).collect();
        for ((dy, h), dh) in dys.iter().zip(&cache.xhat).zip(&dxhats) {
            grad.beta += &dy.sum_axis(Axis(0));
            grad.gamma += &(dy * h).sum_axis(Axis(0));
            sum_dxhat += &dh.sum_axis(Axis(0));
            sum_dxhat_xhat += &(dh * h).sum_axis(Axis(0));
        }
        let nf = n as f64;
        dxhats
            .iter()
            .zip(&cache.xhat)
            .map(|(dh, h)| {
                let inner = dh * nf - &sum_dxhat - &(h * &sum_dxhat_xhat);
                inner * &(&cache.inv_std / nf)
            })
            .collect()
    }

    /// Backward through the eval-mode (frozen statistics) transform.
    pub fn backward_eval(&self, x: &Mat, dy: &Mat, grad: &mut BatchNorm) -> Mat {
        let inv_std = self.running_var.0.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = (x - &self.running_mean.0) * &inv_std;
        grad.beta += &dy.sum_axis(Axis(0));
        grad.gamma += &(dy * &xhat).sum_axis(Axis(0));
        dy * &(inv_std * &self.gamma)
    }
}

/// Fixed sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(pos, c)| {
        let i = (c / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn rand_mat(r: usize, c: usize, rng: &mut Rng) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x` for every entry.
    fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        let mut g = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn temporal_conv_matches_direct_sum() {
        let mut rng = substream(1, "t");
        let conv = TemporalConv::init(3, 2, 5, &mut rng);
        let x = rand_mat(7, 3, &mut rng);
        let (y, _) = conv.forward(&x);
        for j in 0..7 {
            for o in 0..2 {
                let mut acc = conv.linear.bias[o];
                for t in 0..5 {
                    let src = j as isize + t as isize - 2;
                    if (0..7).contains(&src) {
                        for c in 0..3 {
                            acc += conv.tap(o, t, c) * x[[src as usize, c]];
                        }
                    }
                }
                assert!((acc - y[[j, o]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_conv_input_gradient() {
        let mut rng = substream(2, "t");
        let conv = TemporalConv::init(2, 3, 3, &mut rng);
        let x = rand_mat(5, 2, &mut rng);
        let w = rand_mat(5, 3, &mut rng);
        let loss = |x: &Mat| (conv.forward(x).0 * &w).sum();
        let (_, cols) = conv.forward(&x);
        let mut g = TemporalConv {
            width: 3,
            linear: Linear::zeros(6, 3),
        };
        let dx = conv.backward(&cols, &w, &mut g);
        assert!(close(&dx, &numeric_grad(&x, loss), 1e-6));
    }

    #[test]
    fn width_wider_than_sequence() {
        let mut rng = substream(3, "t");
        let x = rand_mat(2, 1, &mut rng);
        let cols = unfold(&x, 9);
        // Only taps that land on rows 0 and 1 are non-zero.
        assert_eq!(cols.iter().filter(|v| **v != 0.0).count(), 4);
        let back = fold(&Mat::ones((2, 9)), 9, 1);
        assert_eq!(back, Mat::from_elem((2, 1), 2.0));
    }

    #[test]
    fn batchnorm_train_gradient() {
        let mut rng = substream(4, "bn");
        let mut bn = BatchNorm::new(3);
        bn.gamma = Array1::from(vec![0.5, 1.5, -1.0]);
        bn.beta = Array1::from(vec![0.1, 0.0, 0.3]);
        let xs = vec![rand_mat(4, 3, &mut rng), rand_mat(4, 3, &mut rng)];
        let ws = vec![rand_mat(4, 3, &mut rng), rand_mat(4, 3, &mut rng)];
        let loss = |x0: &Mat| {
            let (ys, _) = bn.forward_train(&[x0.clone(), xs[1].clone()]);
            ys.iter().zip(&ws).map(|(y, w)| (y * w).sum()).sum::<f64>()
        };
        let (_, cache) = bn.forward_train(&xs);
        let mut g = bn.zeros_like();
        let dxs = bn.backward_train(&cache, &ws, &mut g);
        assert!(close(&dxs[0], &numeric_grad(&xs[0], loss), 1e-6));
    }

    #[test]
    fn batchnorm_normalizes() {
        let mut rng = substream(5, "bn");
        let bn = BatchNorm::new(2);
        let xs = vec![rand_mat(6, 2, &mut rng) * 3.0 + 1.0];
        let (ys, _) = bn.forward_train(&xs);
        let mean = ys[0].mean_axis(Axis(0)).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = substream(6, "p");
        let lin = Linear::init(3, 2, &mut rng);
        let flat = lin.flat_trainable();
        assert_eq!(flat.len(), 8);
        let mut z = lin.zeros_like();
        z.set_flat_trainable(&flat);
        assert_eq!(z.weight, lin.weight);
        assert_eq!(lin.names(), vec!["weight", "bias"]);
    }

    #[test]
    fn positions_table() {
        let pe = sinusoidal_positions(4, 6);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
    }
}
