use rand::Rng;

use super::tensor::{Param, Real, Tensor4};
use crate::error::{Error, Result};

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// 2D convolution with square stride and symmetric zero padding, computed
/// as im2col followed by a matrix product. Weights are stored as a
/// `(kh * kw * cin) x cout` row-major matrix.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    /// He-uniform weights, zero bias.
    pub fn new(k: usize, cin: usize, cout: usize, stride: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = (k * k * cin) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = (0..k * k * cin * cout).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
        Self::from_weights(k, cin, cout, stride, w, bias.then(|| vec![T::ZERO; cout]))
    }

    /// Weights drawn from a normal distribution with the given deviation.
    pub fn new_normal(k: usize, cin: usize, cout: usize, std: f64, rng: &mut impl Rng) -> Self {
        let w = (0..k * k * cin * cout)
            .map(|_| {
                // Box-Muller.
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                T::from_f64(std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
            })
            .collect();
        Self::from_weights(k, cin, cout, 1, w, Some(vec![T::ZERO; cout]))
    }

    pub fn from_weights(k: usize, cin: usize, cout: usize, stride: usize, weight: Vec<T>, bias: Option<Vec<T>>) -> Self {
        assert_eq!(weight.len(), k * k * cin * cout);
        Conv2d {
            kh: k,
            kw: k,
            cin,
            cout,
            stride: stride.max(1),
            pad: k / 2,
            weight: Param::new(weight),
            bias: bias.map(Param::new),
            cache: None,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &Tensor4<T>, ho: usize, wo: usize) -> Vec<T> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let kdim = self.kh * self.kw * self.cin;
        let mut cols = vec![T::ZERO; x.n * ho * wo * kdim];
        let (s, p) = (self.stride as isize, self.pad as isize);
        for n in 0..x.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((n * ho + oy) * wo + ox) * kdim;
                    for ky in 0..self.kh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let src = x.idx(n, iy as usize, ix as usize, 0);
                            let dst = row + (ky * self.kw + kx) * self.cin;
                            cols[dst..dst + self.cin].copy_from_slice(&x.data[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], shape: [usize; 4], ho: usize, wo: usize) -> Tensor4<T> {
        let [n_, h, w, c] = shape;
        if self.is_pointwise() {
            return Tensor4::from_vec(n_, h, w, c, dcols.to_vec()).expect("shape");
        }
        let mut dx = Tensor4::zeros(n_, h, w, c);
        let kdim = self.kh * self.kw * self.cin;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for n in 0..n_ {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((n * ho + oy) * wo + ox) * kdim;
                    for ky in 0..self.kh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = dx.idx(n, iy as usize, ix as usize, 0);
                            let src = row + (ky * self.kw + kx) * self.cin;
                            for ch in 0..self.cin {
                                dx.data[dst + ch] += dcols[src + ch];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        if x.c != self.cin {
            return Err(Error::ShapeMismatch(format!("conv expects {} channels, got {}", self.cin, x.c)));
        }
        let (ho, wo) = self.out_size(x.h, x.w);
        let cols = self.im2col(x, ho, wo);
        let rows = x.n * ho * wo;
        let kdim = self.kh * self.kw * self.cin;
        let mut out = vec![T::ZERO; rows * self.cout];
        T::gemm(rows, kdim, self.cout, &cols, false, &self.weight.value, false, T::ZERO, &mut out);
        if let Some(b) = &self.bias {
            for row in out.chunks_mut(self.cout) {
                for (o, &bv) in row.iter_mut().zip(&b.value) {
                    *o += bv;
                }
            }
        }
        self.cache = Some(ConvCache {
            cols,
            in_shape: x.shape(),
            out_hw: (ho, wo),
        });
        Tensor4::from_vec(x.n, ho, wo, self.cout, out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.take().ok_or_else(|| Error::ShapeMismatch("conv backward before forward".into()))?;
        let (ho, wo) = cache.out_hw;
        if dy.shape() != [cache.in_shape[0], ho, wo, self.cout] {
            return Err(Error::ShapeMismatch("conv upstream gradient shape".into()));
        }
        let rows = dy.n * ho * wo;
        let kdim = self.kh * self.kw * self.cin;
        T::gemm(kdim, rows, self.cout, &cache.cols, true, &dy.data, false, T::ONE, &mut self.weight.grad);
        if let Some(b) = &mut self.bias {
            for row in dy.data.chunks(self.cout) {
                for (g, &d) in b.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dcols = vec![T::ZERO; rows * kdim];
        T::gemm(rows, self.cout, kdim, &dy.data, false, &self.weight.value, true, T::ZERO, &mut dcols);
        Ok(self.col2im(&dcols, cache.in_shape, ho, wo))
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        let mut v = vec![("weight", &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias", b));
        }
        v
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel batch normalization over (batch, height, width).
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub c: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            c,
            gamma: Param::new(vec![T::ONE; c]),
            beta: Param::new(vec![T::ZERO; c]),
            running_mean: vec![T::ZERO; c],
            running_var: vec![T::ONE; c],
            cache: None,
        }
    }

    /// Batch statistics in training mode, running statistics otherwise.
    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        if x.c != self.c {
            return Err(Error::ShapeMismatch(format!("batchnorm expects {} channels, got {}", self.c, x.c)));
        }
        let c = self.c;
        let m = x.pixels();
        let eps = T::from_f64(BN_EPS);
        let (mean, var) = if train {
            let mut mean = vec![T::ZERO; c];
            for row in x.data.chunks(c) {
                for (a, &v) in mean.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let inv_m = T::ONE / T::from_f64(m as f64);
            mean.iter_mut().for_each(|a| *a *= inv_m);
            let mut var = vec![T::ZERO; c];
            for row in x.data.chunks(c) {
                for k in 0..c {
                    let d = row[k] - mean[k];
                    var[k] += d * d;
                }
            }
            var.iter_mut().for_each(|a| *a *= inv_m);
            let mom = T::from_f64(BN_MOMENTUM);
            let unbias = if m > 1 { T::from_f64(m as f64 / (m as f64 - 1.0)) } else { T::ONE };
            for k in 0..c {
                self.running_mean[k] = mom * self.running_mean[k] + (T::ONE - mom) * mean[k];
                self.running_var[k] = mom * self.running_var[k] + (T::ONE - mom) * var[k] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let mut x_hat = vec![T::ZERO; x.data.len()];
        let mut y = Tensor4::zeros(x.n, x.h, x.w, c);
        for ((xr, hr), yr) in x.data.chunks(c).zip(x_hat.chunks_mut(c)).zip(y.data.chunks_mut(c)) {
            for k in 0..c {
                hr[k] = (xr[k] - mean[k]) * inv_std[k];
                yr[k] = self.gamma.value[k] * hr[k] + self.beta.value[k];
            }
        }
        self.cache = Some(BnCache { x_hat, inv_std });
        Ok(y)
    }

    /// Backward of the training-mode forward.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.take().ok_or_else(|| Error::ShapeMismatch("batchnorm backward before forward".into()))?;
        let c = self.c;
        if dy.data.len() != cache.x_hat.len() {
            return Err(Error::ShapeMismatch("batchnorm upstream gradient shape".into()));
        }
        let m = T::from_f64(dy.pixels() as f64);
        let mut sum_dy = vec![T::ZERO; c];
        let mut sum_dy_xhat = vec![T::ZERO; c];
        for (dr, hr) in dy.data.chunks(c).zip(cache.x_hat.chunks(c)) {
            for k in 0..c {
                sum_dy[k] += dr[k];
                sum_dy_xhat[k] += dr[k] * hr[k];
            }
        }
        for k in 0..c {
            self.gamma.grad[k] += sum_dy_xhat[k];
            self.beta.grad[k] += sum_dy[k];
        }
        let mut dx = Tensor4::zeros(dy.n, dy.h, dy.w, c);
        for ((dr, hr), xr) in dy.data.chunks(c).zip(cache.x_hat.chunks(c)).zip(dx.data.chunks_mut(c)) {
            for k in 0..c {
                let g = self.gamma.value[k] * cache.inv_std[k] / m;
                xr[k] = g * (m * dr[k] - sum_dy[k] - hr[k] * sum_dy_xhat[k]);
            }
        }
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Gradient of relu given its output.
pub fn relu_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
        if v <= T::ZERO {
            *d = T::ZERO;
        }
    }
    dx
}

pub fn sigmoid_tensor<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid)
}

/// Gradient of sigmoid given its output.
pub fn sigmoid_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, &s) in dx.data.iter_mut().zip(&y.data) {
        *d *= s * (T::ONE - s);
    }
    dx
}

/// Source coordinate and interpolation taps for output index `d` when
/// resampling `len_in` samples to `len_out`: `src = d * len_in / len_out`.
#[inline]
pub fn resample_taps(d: usize, len_in: usize, len_out: usize) -> (usize, usize, f64) {
    let s = d as f64 * len_in as f64 / len_out as f64;
    let i0 = (s.floor() as usize).min(len_in - 1);
    let i1 = (i0 + 1).min(len_in - 1);
    (i0, i1, s - i0 as f64)
}

pub fn bilinear_resize<T: Real>(x: &Tensor4<T>, oh: usize, ow: usize) -> Tensor4<T> {
    let mut y = Tensor4::zeros(x.n, oh, ow, x.c);
    let ys: Vec<_> = (0..oh).map(|i| resample_taps(i, x.h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|j| resample_taps(j, x.w, ow)).collect();
    for n in 0..x.n {
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let w = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let dst = y.idx(n, i, j, 0);
                for (sy, sx, wt) in w {
                    if wt == 0.0 {
                        continue;
                    }
                    let wt = T::from_f64(wt);
                    let src = x.idx(n, sy, sx, 0);
                    for ch in 0..x.c {
                        y.data[dst + ch] += wt * x.data[src + ch];
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward<T: Real>(dy: &Tensor4<T>, ih: usize, iw: usize) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(dy.n, ih, iw, dy.c);
    let ys: Vec<_> = (0..dy.h).map(|i| resample_taps(i, ih, dy.h)).collect();
    let xs: Vec<_> = (0..dy.w).map(|j| resample_taps(j, iw, dy.w)).collect();
    for n in 0..dy.n {
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let w = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let src = dy.idx(n, i, j, 0);
                for (sy, sx, wt) in w {
                    if wt == 0.0 {
                        continue;
                    }
                    let wt = T::from_f64(wt);
                    let dst = dx.idx(n, sy, sx, 0);
                    for ch in 0..dy.c {
                        dx.data[dst + ch] += wt * dy.data[src + ch];
                    }
                }
            }
        }
    }
    dx
}

/// Mean over height and width, shape (n, 1, 1, c).
pub fn global_avg_pool<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = Tensor4::zeros(x.n, 1, 1, x.c);
    let inv = T::ONE / T::from_f64((x.h * x.w) as f64);
    for n in 0..x.n {
        for p in 0..x.h * x.w {
            let src = (n * x.h * x.w + p) * x.c;
            for ch in 0..x.c {
                y.data[n * x.c + ch] += x.data[src + ch] * inv;
            }
        }
    }
    y
}

pub fn global_avg_pool_backward<T: Real>(dy: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(dy.n, h, w, dy.c);
    let inv = T::ONE / T::from_f64((h * w) as f64);
    for n in 0..dy.n {
        for p in 0..h * w {
            let dst = (n * h * w + p) * dy.c;
            for ch in 0..dy.c {
                dx.data[dst + ch] = dy.data[n * dy.c + ch] * inv;
            }
        }
    }
    dx
}
