//! Convolution, normalization, resampling and attention primitives.

use super::{Ctx, Var};
use crate::scalar::Scalar;
use crate::tensor::{
    adaptive_bin, bilinear_taps, col2im, conv_out, im2col, reflect, Tensor, Window,
};

fn window(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Window {
    let oh = conv_out(h, kh, stride, pad)
        .unwrap_or_else(|| panic!("conv window {}x{} does not fit {}x{} (pad {})", kh, kw, h, w, pad));
    let ow = conv_out(w, kw, stride, pad)
        .unwrap_or_else(|| panic!("conv window {}x{} does not fit {}x{} (pad {})", kh, kw, h, w, pad));
    Window { c, h, w, kh, kw, stride, pad, oh, ow }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, o: usize, plane: usize) {
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(o) {
            let base = (b * o + ch) * plane;
            for v in &mut out[base..base + plane] {
                *v += bv;
            }
        }
    }
}

fn bias_grad<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (n, o, h, w) = g.dims4();
    let plane = h * w;
    let mut db = vec![T::zero(); o];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let base = (b * o + ch) * plane;
            *acc += g.data()[base..base + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[o], db)
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `self`: `[N, C, H, W]`, `weight`: `[O, C, kh, kw]`, `bias`: `[O]`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let wv = weight.value();
        let (n, c, h, w) = x.dims4();
        let (o, wc, kh, kw) = wv.dims4();
        assert_eq!(c, wc, "conv2d: input has {} channels, weight expects {}", c, wc);
        let win = window(c, h, w, kh, kw, stride, pad);
        let (rows, cols) = (win.rows(), win.cols());
        let mut out = vec![T::zero(); n * o * cols];
        let mut patches = vec![T::zero(); rows * cols];
        for b in 0..n {
            im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], &win, &mut patches);
            T::gemm(o, rows, cols, T::one(), wv.data(), false, &patches, false, T::zero(), &mut out[b * o * cols..(b + 1) * o * cols]);
        }
        if let Some(bv) = bias {
            add_bias(&mut out, bv.value().data(), n, o, cols);
        }
        let out = Tensor::from_vec(&[n, o, win.oh, win.ow], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.push(out, &parents, move |ctx: &Ctx<'_, T>| {
            let x = &ctx.inputs[0];
            let wv = &ctx.inputs[1];
            let g = ctx.grad.data();
            let mut dx = ctx.needs[0].then(|| Tensor::zeros(x.shape()));
            let mut dw = ctx.needs[1].then(|| Tensor::zeros(wv.shape()));
            let mut patches = vec![T::zero(); rows * cols];
            let mut dpatch = vec![T::zero(); rows * cols];
            for b in 0..n {
                let gb = &g[b * o * cols..(b + 1) * o * cols];
                if let Some(dw) = dw.as_mut() {
                    im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], &win, &mut patches);
                    T::gemm(o, cols, rows, T::one(), gb, false, &patches, true, T::one(), dw.data_mut());
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm(rows, o, cols, T::one(), wv.data(), true, gb, false, T::zero(), &mut dpatch);
                    col2im(&dpatch, &win, &mut dx.data_mut()[b * c * h * w..(b + 1) * c * h * w]);
                }
            }
            let mut res = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| bias_grad(ctx.grad)));
            }
            res
        })
    }

    /// Transposed convolution, the adjoint of [`Var::conv2d`].
    ///
    /// `weight`: `[C_in, C_out, kh, kw]`. Output spatial size is
    /// `(H - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var<'g, T> {
        let x = self.value();
        let wv = weight.value();
        let (n, cin, h, w) = x.dims4();
        let (wcin, cout, kh, kw) = wv.dims4();
        assert_eq!(cin, wcin, "conv_transpose2d: input has {} channels, weight expects {}", cin, wcin);
        assert!(output_pad < stride.max(1), "output_pad must be smaller than stride");
        let oh = (h - 1) * stride + kh + output_pad - 2 * pad;
        let ow = (w - 1) * stride + kw + output_pad - 2 * pad;
        // window over the output, whose patch grid is exactly the input grid
        let win = Window { c: cout, h: oh, w: ow, kh, kw, stride, pad, oh: h, ow: w };
        debug_assert_eq!(conv_out(oh, kh, stride, pad), Some(h));
        let (rows, cols) = (win.rows(), win.cols());
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let mut patches = vec![T::zero(); rows * cols];
        for b in 0..n {
            T::gemm(rows, cin, cols, T::one(), wv.data(), true, &x.data()[b * cin * cols..(b + 1) * cin * cols], false, T::zero(), &mut patches);
            col2im(&patches, &win, &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow]);
        }
        if let Some(bv) = bias {
            add_bias(&mut out, bv.value().data(), n, cout, oh * ow);
        }
        let out = Tensor::from_vec(&[n, cout, oh, ow], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.push(out, &parents, move |ctx: &Ctx<'_, T>| {
            let x = &ctx.inputs[0];
            let wv = &ctx.inputs[1];
            let g = ctx.grad.data();
            let mut dx = ctx.needs[0].then(|| Tensor::zeros(x.shape()));
            let mut dw = ctx.needs[1].then(|| Tensor::zeros(wv.shape()));
            let mut gpatch = vec![T::zero(); rows * cols];
            for b in 0..n {
                im2col(&g[b * cout * oh * ow..(b + 1) * cout * oh * ow], &win, &mut gpatch);
                if let Some(dx) = dx.as_mut() {
                    T::gemm(cin, rows, cols, T::one(), wv.data(), false, &gpatch, false, T::zero(), &mut dx.data_mut()[b * cin * cols..(b + 1) * cin * cols]);
                }
                if let Some(dw) = dw.as_mut() {
                    T::gemm(cin, cols, rows, T::one(), &x.data()[b * cin * cols..(b + 1) * cin * cols], false, &gpatch, true, T::one(), dw.data_mut());
                }
            }
            let mut res = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| bias_grad(ctx.grad)));
            }
            res
        })
    }

    /// Reflection padding of the two spatial axes.
    pub fn reflect_pad2d(self, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(pad < h && pad < w, "reflect pad {} too large for {}x{}", pad, h, w);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let rows: Vec<usize> = (0..ph).map(|i| reflect(i as isize - pad as isize, h)).collect();
        let colsi: Vec<usize> = (0..pw).map(|j| reflect(j as isize - pad as isize, w)).collect();
        let mut out = Vec::with_capacity(n * c * ph * pw);
        for plane in x.data().chunks(h * w) {
            for &r in &rows {
                out.extend(colsi.iter().map(|&cc| plane[r * w + cc]));
            }
        }
        let out = Tensor::from_vec(&[n, c, ph, pw], out);
        self.graph.push(out, &[self], move |ctx: &Ctx<'_, T>| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            for (gp, dp) in ctx.grad.data().chunks(ph * pw).zip(dx.data_mut().chunks_mut(h * w)) {
                for (i, &r) in rows.iter().enumerate() {
                    for (j, &cc) in colsi.iter().enumerate() {
                        dp[r * w + cc] += gp[i * pw + j];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(self, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let (_, _, h, w) = x.dims4();
        let plane = h * w;
        let pn = T::from_usize(plane).unwrap();
        let eps = T::c(eps);
        let mut out = vec![T::zero(); x.numel()];
        let mut inv_std = Vec::with_capacity(x.numel() / plane);
        for (src, dst) in x.data().chunks(plane).zip(out.chunks_mut(plane)) {
            let mean = src.iter().copied().sum::<T>() / pn;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / pn;
            let is = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::from_vec(x.shape(), out);
        self.graph.push(out, &[self], move |ctx: &Ctx<'_, T>| {
            let y = ctx.output.data();
            let mut dx = vec![T::zero(); y.len()];
            for (((gp, yp), dp), &is) in ctx
                .grad
                .data()
                .chunks(plane)
                .zip(y.chunks(plane))
                .zip(dx.chunks_mut(plane))
                .zip(&inv_std)
            {
                let mg = gp.iter().copied().sum::<T>() / pn;
                let mgy = gp.iter().zip(yp).map(|(&g, &y)| g * y).sum::<T>() / pn;
                for ((d, &g), &yv) in dp.iter_mut().zip(gp).zip(yp) {
                    *d = is * (g - mg - yv * mgy);
                }
            }
            vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), dx))]
        })
    }

    /// Adaptive average pooling to an `oh x ow` grid.
    pub fn adaptive_avg_pool2d(self, oh: usize, ow: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(oh >= 1 && ow >= 1 && oh <= h && ow <= w, "adaptive pool {}x{} from {}x{}", oh, ow, h, w);
        let ybins: Vec<_> = (0..oh).map(|i| adaptive_bin(i, h, oh)).collect();
        let xbins: Vec<_> = (0..ow).map(|j| adaptive_bin(j, w, ow)).collect();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for &(y0, y1) in &ybins {
                for &(x0, x1) in &xbins {
                    let mut s = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s += plane[yy * w + xx];
                        }
                    }
                    out.push(s / T::from_usize((y1 - y0) * (x1 - x0)).unwrap());
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out);
        self.graph.push(out, &[self], move |ctx: &Ctx<'_, T>| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            for (gp, dp) in ctx.grad.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
                for (i, &(y0, y1)) in ybins.iter().enumerate() {
                    for (j, &(x0, x1)) in xbins.iter().enumerate() {
                        let share = gp[i * ow + j] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                dp[yy * w + xx] += share;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Bilinear resize (half-pixel centers, edge clamped).
    pub fn upsample_bilinear(self, oh: usize, ow: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let ty: Vec<_> = bilinear_taps(oh, h).into_iter().map(|(a, b, f)| (a, b, T::c(f))).collect();
        let tx: Vec<_> = bilinear_taps(ow, w).into_iter().map(|(a, b, f)| (a, b, T::c(f))).collect();
        let one = T::one();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (one - fy) + bot * fy);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out);
        self.graph.push(out, &[self], move |ctx: &Ctx<'_, T>| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            for (gp, dp) in ctx.grad.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
                for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let g = gp[i * ow + j];
                        dp[y0 * w + x0] += g * (one - fy) * (one - fx);
                        dp[y0 * w + x1] += g * (one - fy) * fx;
                        dp[y1 * w + x0] += g * fy * (one - fx);
                        dp[y1 * w + x1] += g * fy * fx;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Softmax over the last axis, max-shifted for overflow safety.
    pub fn softmax_last(self) -> Var<'g, T> {
        let x = self.value();
        let d = *x.shape().last().expect("softmax on scalar");
        let mut out = vec![T::zero(); x.numel()];
        for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(src, dst);
        }
        let out = Tensor::from_vec(x.shape(), out);
        self.graph.push(out, &[self], move |ctx: &Ctx<'_, T>| {
            let mut dx = vec![T::zero(); ctx.output.numel()];
            for ((gp, yp), dp) in ctx.grad.data().chunks(d).zip(ctx.output.data().chunks(d)).zip(dx.chunks_mut(d)) {
                let dot = gp.iter().zip(yp).map(|(&g, &y)| g * y).sum::<T>();
                for ((o, &g), &y) in dp.iter_mut().zip(gp).zip(yp) {
                    *o = y * (g - dot);
                }
            }
            vec![Some(Tensor::from_vec(ctx.output.shape(), dx))]
        })
    }

    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(self, other: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.rank(), 3, "bmm lhs must be rank 3");
        assert_eq!(b.rank(), 3, "bmm rhs must be rank 3");
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        assert!(bs == bs2 && k == k2, "bmm shape mismatch {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            T::gemm(m, k, n, T::one(), &a.data()[i * m * k..], false, &b.data()[i * k * n..], false, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let out = Tensor::from_vec(&[bs, m, n], out);
        self.graph.push(out, &[self, other], move |ctx: &Ctx<'_, T>| {
            let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
            let g = ctx.grad.data();
            let da = ctx.needs[0].then(|| {
                let mut da = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    T::gemm(m, n, k, T::one(), &g[i * m * n..], false, &b.data()[i * k * n..], true, T::zero(), &mut da[i * m * k..(i + 1) * m * k]);
                }
                Tensor::from_vec(a.shape(), da)
            });
            let db = ctx.needs[1].then(|| {
                let mut db = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    T::gemm(k, m, n, T::one(), &a.data()[i * m * k..], true, &g[i * m * n..], false, T::zero(), &mut db[i * k * n..(i + 1) * k * n]);
                }
                Tensor::from_vec(b.shape(), db)
            });
            vec![da, db]
        })
    }

    /// Binary cross-entropy on probabilities against a constant target.
    ///
    /// Probabilities are clamped to `[eps, 1 - eps]` inside the logarithms, so
    /// a prediction that equals its 0/1 target contributes exactly zero.
    pub fn bce_prob(self, target: &Tensor<T>, eps: f64) -> Var<'g, T> {
        let p = self.value();
        assert_eq!(p.shape(), target.shape(), "bce_prob target shape");
        let eps = T::c(eps);
        let one = T::one();
        let loss = |p: T, t: T| {
            let mut l = T::zero();
            if t != T::zero() {
                l -= t * p.max(eps).ln();
            }
            if t != one {
                l -= (one - t) * (one - p).max(eps).ln();
            }
            l
        };
        let out = p.zip_map(target, loss);
        let target = target.clone();
        self.graph.push(out, &[self], move |ctx: &Ctx<'_, T>| {
            let p = &ctx.inputs[0];
            let data = ctx
                .grad
                .data()
                .iter()
                .zip(p.data().iter().zip(target.data()))
                .map(|(&g, (&p, &t))| {
                    let mut d = T::zero();
                    if t != T::zero() && p > eps {
                        d -= t / p;
                    }
                    if t != one && one - p > eps {
                        d += (one - t) / (one - p);
                    }
                    g * d
                })
                .collect();
            vec![Some(Tensor::from_vec(p.shape(), data))]
        })
    }
}

pub(crate) fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}
