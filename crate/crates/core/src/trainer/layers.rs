use super::params::{Grads, ParamId, ParamStore};
use super::{Real, Tensor4};

pub fn softsign<T: Real>(x: T) -> T {
    x / (T::one() + x.abs())
}

/// `dy / (1 + |x|)^2`.
pub fn softsign_backward<T: Real>(x: T, dy: T) -> T {
    let d = T::one() + x.abs();
    dy / (d * d)
}

/// Output positions `o` in `lo..hi` whose input index `o*stride + k - pad`
/// falls inside `0..in_len`.
fn valid_range(
    k: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo, hi.max(lo))
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Zero padding before the first row and column.
    pub pad: usize,
    /// Zero padding after the last row and column.
    pub pad_end: usize,
}

impl Conv2d {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + self.pad + self.pad_end - self.kernel) / self.stride + 1,
            (w + self.pad + self.pad_end - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor4<T>) -> Tensor4<T> {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (ho, wo) = self.out_size(x.h, x.w);
        let mut y = Tensor4::zeros(x.n, self.out_c, ho, wo);
        let weight = store.get(self.weight);
        let bias = store.get(self.bias);
        let k = self.kernel;
        for n in 0..x.n {
            for oc in 0..self.out_c {
                let out = y.plane_mut(n, oc);
                out.fill(bias[oc]);
                for ic in 0..self.in_c {
                    let inp = x.plane(n, ic);
                    for ky in 0..k {
                        let (ylo, yhi) = valid_range(ky, self.pad, self.stride, x.h, ho);
                        for kx in 0..k {
                            let (xlo, xhi) = valid_range(kx, self.pad, self.stride, x.w, wo);
                            let wv = weight[((oc * self.in_c + ic) * k + ky) * k + kx];
                            for oy in ylo..yhi {
                                let iy = oy * self.stride + ky - self.pad;
                                let row_in = &inp[iy * x.w..(iy + 1) * x.w];
                                let row_out = &mut out[oy * wo..(oy + 1) * wo];
                                for ox in xlo..xhi {
                                    row_out[ox] += wv * row_in[ox * self.stride + kx - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates weight and bias gradients into `grads` when given and
    /// returns the input gradient when `need_dx`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor4<T>,
        dy: &Tensor4<T>,
        mut grads: Option<&mut Grads<T>>,
        need_dx: bool,
    ) -> Option<Tensor4<T>> {
        let weight = store.get(self.weight);
        let k = self.kernel;
        let (ho, wo) = (dy.h, dy.w);
        let mut dx = need_dx.then(|| Tensor4::zeros_like(x));
        if let Some(g) = grads.as_deref_mut() {
            let db = g.get_mut(self.bias);
            for n in 0..dy.n {
                for oc in 0..self.out_c {
                    db[oc] += dy.plane(n, oc).iter().copied().sum();
                }
            }
        }
        for n in 0..x.n {
            for oc in 0..self.out_c {
                let dout = dy.plane(n, oc);
                for ic in 0..self.in_c {
                    let inp = x.plane(n, ic);
                    for ky in 0..k {
                        let (ylo, yhi) = valid_range(ky, self.pad, self.stride, x.h, ho);
                        for kx in 0..k {
                            let (xlo, xhi) = valid_range(kx, self.pad, self.stride, x.w, wo);
                            let widx = ((oc * self.in_c + ic) * k + ky) * k + kx;
                            if let Some(g) = grads.as_deref_mut() {
                                let mut acc = T::zero();
                                for oy in ylo..yhi {
                                    let iy = oy * self.stride + ky - self.pad;
                                    let row_in = &inp[iy * x.w..(iy + 1) * x.w];
                                    let row_d = &dout[oy * wo..(oy + 1) * wo];
                                    for ox in xlo..xhi {
                                        acc += row_d[ox] * row_in[ox * self.stride + kx - self.pad];
                                    }
                                }
                                g.get_mut(self.weight)[widx] += acc;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let wv = weight[widx];
                                let width = x.w;
                                let dplane = dx.plane_mut(n, ic);
                                for oy in ylo..yhi {
                                    let iy = oy * self.stride + ky - self.pad;
                                    let row_d = &dout[oy * wo..(oy + 1) * wo];
                                    let row_dx = &mut dplane[iy * width..(iy + 1) * width];
                                    for ox in xlo..xhi {
                                        row_dx[ox * self.stride + kx - self.pad] += wv * row_d[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

pub(crate) const BN_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistics update.
pub(crate) const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    training: bool,
}

impl BatchNorm2d {
    /// Training mode normalizes with batch statistics, evaluation mode with
    /// the running statistics.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor4<T>,
        training: bool,
    ) -> (Tensor4<T>, BnCache<T>) {
        let c = self.channels;
        assert_eq!(x.c, c, "batch norm channels");
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let eps = T::of(BN_EPS);
        let count = T::of((x.n * x.plane_len()) as f64);

        let (mean, var) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for n in 0..x.n {
                    s += x.plane(n, ch).iter().copied().sum();
                }
                let m = s / count;
                let mut v = T::zero();
                for n in 0..x.n {
                    for &val in x.plane(n, ch) {
                        let d = val - m;
                        v += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            (mean, var)
        } else {
            (
                store.get(self.running_mean).to_vec(),
                store.get(self.running_var).to_vec(),
            )
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor4::zeros_like(x);
        let mut y = Tensor4::zeros_like(x);
        for n in 0..x.n {
            for ch in 0..c {
                let src = x.plane(n, ch);
                let xh = xhat.plane_mut(n, ch);
                for (o, &v) in xh.iter_mut().zip(src) {
                    *o = (v - mean[ch]) * inv_std[ch];
                }
                let out = y.plane_mut(n, ch);
                for (o, &v) in out.iter_mut().zip(xhat.plane(n, ch)) {
                    *o = gamma[ch] * v + beta[ch];
                }
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                training,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &BnCache<T>,
        dy: &Tensor4<T>,
        grads: Option<&mut Grads<T>>,
        need_dx: bool,
    ) -> Option<Tensor4<T>> {
        let c = self.channels;
        let gamma = store.get(self.gamma);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for n in 0..dy.n {
            for ch in 0..c {
                for (&d, &xh) in dy.plane(n, ch).iter().zip(cache.xhat.plane(n, ch)) {
                    sum_dy[ch] += d;
                    sum_dy_xhat[ch] += d * xh;
                }
            }
        }
        if let Some(g) = grads {
            for ch in 0..c {
                g.get_mut(self.gamma)[ch] += sum_dy_xhat[ch];
                g.get_mut(self.beta)[ch] += sum_dy[ch];
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor4::zeros_like(dy);
        let count = T::of((dy.n * dy.plane_len()) as f64);
        for n in 0..dy.n {
            for ch in 0..c {
                let scale = gamma[ch] * cache.inv_std[ch];
                let d_in = dy.plane(n, ch);
                let xh = cache.xhat.plane(n, ch);
                let out = dx.plane_mut(n, ch);
                if cache.training {
                    let mean_dy = sum_dy[ch] / count;
                    let mean_dy_xhat = sum_dy_xhat[ch] / count;
                    for i in 0..out.len() {
                        out[i] = scale * (d_in[i] - mean_dy - xh[i] * mean_dy_xhat);
                    }
                } else {
                    for i in 0..out.len() {
                        out[i] = scale * d_in[i];
                    }
                }
            }
        }
        Some(dx)
    }

    /// Exponential moving average of the batch statistics of a training-mode
    /// forward pass.
    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, cache: &BnCache<T>) {
        if !cache.training {
            return;
        }
        let m = T::of(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (r, &b) in store
            .get_mut(self.running_mean)
            .iter_mut()
            .zip(&cache.batch_mean)
        {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in store
            .get_mut(self.running_var)
            .iter_mut()
            .zip(&cache.batch_var)
        {
            *r = m * *r + one_m * b;
        }
    }
}

pub(crate) fn relu_forward<T: Real>(x: &mut Tensor4<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through a ReLU given its output.
pub(crate) fn relu_backward<T: Real>(y: &Tensor4<T>, dy: &mut Tensor4<T>) {
    for (d, &out) in dy.data.iter_mut().zip(&y.data) {
        if out <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Mean pooling by integer factors.
pub(crate) fn avg_pool<T: Real>(x: &Tensor4<T>, fh: usize, fw: usize) -> Tensor4<T> {
    let (ho, wo) = (x.h / fh, x.w / fw);
    let mut y = Tensor4::zeros(x.n, x.c, ho, wo);
    let scale = T::of(1.0 / (fh * fw) as f64);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(n, c);
            let out = y.plane_mut(n, c);
            for yy in 0..x.h {
                for xx in 0..x.w {
                    out[(yy / fh) * wo + xx / fw] += src[yy * x.w + xx];
                }
            }
            for v in out.iter_mut() {
                *v *= scale;
            }
        }
    }
    y
}

pub(crate) fn avg_pool_backward<T: Real>(dy: &Tensor4<T>, fh: usize, fw: usize) -> Tensor4<T> {
    let (h, w) = (dy.h * fh, dy.w * fw);
    let mut dx = Tensor4::zeros(dy.n, dy.c, h, w);
    let scale = T::of(1.0 / (fh * fw) as f64);
    for n in 0..dy.n {
        for c in 0..dy.c {
            let src = dy.plane(n, c);
            let out = dx.plane_mut(n, c);
            for yy in 0..h {
                for xx in 0..w {
                    out[yy * w + xx] = src[(yy / fh) * dy.w + xx / fw] * scale;
                }
            }
        }
    }
    dx
}

/// Softmax across channels at every spatial position.
pub(crate) fn softmax_channels<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = Tensor4::zeros_like(x);
    let p = x.plane_len();
    for n in 0..x.n {
        for i in 0..p {
            let base = n * x.c * p + i;
            let max = (0..x.c)
                .map(|c| x.data[base + c * p])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..x.c {
                let e = (x.data[base + c * p] - max).exp();
                y.data[base + c * p] = e;
                sum += e;
            }
            for c in 0..x.c {
                y.data[base + c * p] /= sum;
            }
        }
    }
    y
}
