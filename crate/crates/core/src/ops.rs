//! Differentiable operations recorded on a [`Graph`].
//!
//! Convolutions use channels-last layout: activations are `[N, H, W, C]`
//! and kernels are `[kh, kw, C_in, C_out]`.

use crate::autograd::{Graph, Var};
use crate::tensor::{gemm, Tensor};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Split a shape around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    o: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn m(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Calls `f(col_offset, input_offset, len)` for every run of in-bounds
    /// taps that share a kernel row; such runs are contiguous on both sides.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, c) = (self.h as isize, self.c);
        let k = self.k();
        let spans: Vec<(usize, usize, usize)> = (0..self.wo)
            .map(|ox| {
                let x0 = (ox * self.sw) as isize - self.pw as isize;
                let lo = (-x0).max(0) as usize;
                let hi = (self.w as isize - x0).clamp(0, self.kw as isize) as usize;
                (lo, hi.max(lo), (x0 + lo as isize).max(0) as usize)
            })
            .collect();
        for n in 0..self.n {
            for oy in 0..self.ho {
                for (ox, &(lo, hi, ix)) in spans.iter().enumerate() {
                    if hi == lo {
                        continue;
                    }
                    let row = ((n * self.ho + oy) * self.wo + ox) * k;
                    for ky in 0..self.kh {
                        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let col = (ky * self.kw + lo) * c;
                        let src = ((n * self.h + iy as usize) * self.w + ix) * c;
                        f(row + col, src, (hi - lo) * c);
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.m() * self.k()];
        self.for_each_tap(|dst, src, c| {
            cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
        });
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n * self.h * self.w * self.c];
        self.for_each_tap(|src, dst, c| {
            for (a, b) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                *a += b;
            }
        });
        x
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-1.0))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                    ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.custom(&[a], value, Box::new(move |ctx| vec![Some(ctx.grad.scale(s))]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(
            &[a],
            value,
            Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        self.custom(
            &[a],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()))]),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let sig: Vec<f64> = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().zip(&sig).map(|(x, s)| x * s).collect(),
        );
        self.custom(
            &[a],
            value,
            Box::new(move |ctx| {
                let d = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .zip(&sig)
                    .map(|((g, x), s)| g * s * (1.0 + x * (1.0 - s)))
                    .collect();
                vec![Some(Tensor::new(ctx.grad.shape().to_vec(), d))]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.custom(
            &[a],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * (1.0 - y * y)))]),
        )
    }

    /// `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} × {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.custom(
            &[a, b],
            Tensor::new(vec![m, n], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let da = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, ctx.inputs[1].data(), true, &mut d, 0.0);
                    Tensor::new(vec![m, k], d)
                });
                let db = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, ctx.inputs[0].data(), true, g, false, &mut d, 0.0);
                    Tensor::new(vec![k, n], d)
                });
                vec![da, db]
            }),
        )
    }

    /// `a[M×K] · b[N×K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1],
            "matmul_nt shapes {sa:?} × {sb:?}ᵀ"
        );
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        self.custom(
            &[a, b],
            Tensor::new(vec![m, n], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let da = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, ctx.inputs[1].data(), false, &mut d, 0.0);
                    Tensor::new(vec![m, k], d)
                });
                let db = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, g, true, ctx.inputs[0].data(), false, &mut d, 0.0);
                    Tensor::new(vec![n, k], d)
                });
                vec![da, db]
            }),
        )
    }

    /// Affine map over the trailing axis: `x[…, K] · w[K×N] + b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(
            sw.len() == 2 && sx.last() == Some(&sw[0]),
            "linear shapes {sx:?} · {sw:?}"
        );
        assert_eq!(self.shape(b), &[sw[1]]);
        let (k, n) = (sw[0], sw[1]);
        let m = self.value(x).numel() / k;
        let bias = self.value(b).data().to_vec();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&bias);
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            1.0,
        );
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = n;
        self.custom(
            &[x, w, b],
            Tensor::new(shape, out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let dx = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, ctx.inputs[1].data(), true, &mut d, 0.0);
                    Tensor::new(ctx.inputs[0].shape().to_vec(), d)
                });
                let dw = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, ctx.inputs[0].data(), true, g, false, &mut d, 0.0);
                    Tensor::new(vec![k, n], d)
                });
                let db = ctx.needs[2].then(|| {
                    let mut d = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (a, b) in d.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::new(vec![n], d)
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// 2-D convolution, `x[N,H,W,C] ⋆ w[kh,kw,C,O] + b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize), padding: (usize, usize)) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(
            sx.len() == 4 && sw.len() == 4 && sx[3] == sw[2],
            "conv2d shapes {sx:?} ⋆ {sw:?}"
        );
        assert_eq!(self.shape(b), &[sw[3]]);
        let (h, wd) = (sx[1] + 2 * padding.0, sx[2] + 2 * padding.1);
        assert!(h >= sw[0] && wd >= sw[1], "conv2d kernel larger than padded input");
        let geom = ConvGeom {
            n: sx[0],
            h: sx[1],
            w: sx[2],
            c: sx[3],
            kh: sw[0],
            kw: sw[1],
            o: sw[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            ho: (h - sw[0]) / stride.0 + 1,
            wo: (wd - sw[1]) / stride.1 + 1,
        };
        let (m, k, o) = (geom.m(), geom.k(), geom.o);
        let cols = geom.im2col(self.value(x).data());
        let bias = self.value(b).data().to_vec();
        let mut out = Vec::with_capacity(m * o);
        for _ in 0..m {
            out.extend_from_slice(&bias);
        }
        gemm(m, k, o, &cols, false, self.value(w).data(), false, &mut out, 1.0);
        self.custom(
            &[x, w, b],
            Tensor::new(vec![geom.n, geom.ho, geom.wo, o], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let dx = ctx.needs[0].then(|| {
                    let mut dcols = vec![0.0; m * k];
                    gemm(m, o, k, g, false, ctx.inputs[1].data(), true, &mut dcols, 0.0);
                    Tensor::new(ctx.inputs[0].shape().to_vec(), geom.col2im(&dcols))
                });
                let dw = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; k * o];
                    gemm(k, m, o, &cols, true, g, false, &mut d, 0.0);
                    Tensor::new(ctx.inputs[1].shape().to_vec(), d)
                });
                let db = ctx.needs[2].then(|| {
                    let mut d = vec![0.0; o];
                    for row in g.chunks_exact(o) {
                        for (a, b) in d.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::new(vec![o], d)
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// Nearest-neighbour upsampling of `[N,H,W,C]` by integer factors.
    pub fn upsample_nearest(&mut self, x: Var, fh: usize, fw: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * fh, w * fw);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * ho * wo * c];
        for b in 0..n {
            for y in 0..ho {
                for xo in 0..wo {
                    let src = ((b * h + y / fh) * w + xo / fw) * c;
                    let dst = ((b * ho + y) * wo + xo) * c;
                    out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        self.custom(
            &[x],
            Tensor::new(vec![n, ho, wo, c], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; n * h * w * c];
                for b in 0..n {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let dst = ((b * h + y / fh) * w + xo / fw) * c;
                            let src = ((b * ho + y) * wo + xo) * c;
                            for i in 0..c {
                                d[dst + i] += g[src + i];
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, h, w, c], d))]
            }),
        )
    }

    /// `[N,H,W,C·f·f]` → `[N,H·f,W·f,C]`: channel block `dy·f + dx` fills
    /// sub-pixel `(dy, dx)` of every output cell.
    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(
            s.len() == 4 && f > 0 && s[3].is_multiple_of(f * f),
            "depth_to_space {s:?} by {f}"
        );
        let (n, h, w, c) = (s[0], s[1], s[2], s[3] / (f * f));
        let index = move |b: usize, y: usize, xo: usize, dy: usize, dx: usize| {
            let src = ((b * h + y) * w + xo) * c * f * f + (dy * f + dx) * c;
            let dst = ((b * h * f + y * f + dy) * w * f + xo * f + dx) * c;
            (src, dst)
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for y in 0..h {
                for xo in 0..w {
                    for dy in 0..f {
                        for dx in 0..f {
                            let (src, dst) = index(b, y, xo, dy, dx);
                            out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                        }
                    }
                }
            }
        }
        self.custom(
            &[x],
            Tensor::new(vec![n, h * f, w * f, c], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; g.len()];
                for b in 0..n {
                    for y in 0..h {
                        for xo in 0..w {
                            for dy in 0..f {
                                for dx in 0..f {
                                    let (src, dst) = index(b, y, xo, dy, dx);
                                    d[src..src + c].copy_from_slice(&g[dst..dst + c]);
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, h, w, c * f * f], d))]
            }),
        )
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            for a in dst.iter_mut() {
                *a /= len as f64;
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        self.custom(
            &[x],
            Tensor::new(shape, out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (a, b) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *a = b / len as f64;
                        }
                    }
                }
                vec![Some(Tensor::new(s.clone(), d))]
            }),
        )
    }

    /// Mean pooling of `[B,T,D]` over non-overlapping windows of `factor`
    /// steps. A trailing partial window is averaged over its actual length,
    /// so the output has `ceil(T / factor)` steps.
    pub fn temporal_pool(&mut self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        let (b, t, d) = (s[0], s[1], s[2]);
        let to = t.div_ceil(factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * to * d];
        for bi in 0..b {
            for j in 0..to {
                let (lo, hi) = (j * factor, ((j + 1) * factor).min(t));
                let inv = 1.0 / (hi - lo) as f64;
                let dst = &mut out[(bi * to + j) * d..(bi * to + j + 1) * d];
                for ti in lo..hi {
                    for (a, v) in dst.iter_mut().zip(&xv[(bi * t + ti) * d..(bi * t + ti + 1) * d]) {
                        *a += v * inv;
                    }
                }
            }
        }
        self.custom(
            &[x],
            Tensor::new(vec![b, to, d], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    for j in 0..to {
                        let (lo, hi) = (j * factor, ((j + 1) * factor).min(t));
                        let inv = 1.0 / (hi - lo) as f64;
                        let src = &g[(bi * to + j) * d..(bi * to + j + 1) * d];
                        for ti in lo..hi {
                            for (a, v) in dx[(bi * t + ti) * d..(bi * t + ti + 1) * d].iter_mut().zip(src) {
                                *a = v * inv;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![b, t, d], dx))]
            }),
        )
    }

    /// Per-channel temporal convolution of `[B,T,D]` with kernel `[k,D]`
    /// (odd `k`, zero "same" padding) plus bias `[D]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let s = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(s.len() == 3 && sw.len() == 2 && sw[1] == s[2] && sw[0] % 2 == 1);
        let (bn, t, d, k) = (s[0], s[1], s[2], sw[0]);
        let half = (k / 2) as isize;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bn * t * d];
        for bi in 0..bn {
            for ti in 0..t {
                let dst = &mut out[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                dst.copy_from_slice(bv);
                for j in 0..k {
                    let src_t = ti as isize + j as isize - half;
                    if src_t < 0 || src_t >= t as isize {
                        continue;
                    }
                    let src = &xv[(bi * t + src_t as usize) * d..][..d];
                    let wr = &wv[j * d..(j + 1) * d];
                    for c in 0..d {
                        dst[c] += wr[c] * src[c];
                    }
                }
            }
        }
        self.custom(
            &[x, w, b],
            Tensor::new(s.clone(), out),
            Box::new(move |ctx| {
                let (g, xv, wv) = (ctx.grad.data(), ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut dx = vec![0.0; bn * t * d];
                let mut dw = vec![0.0; k * d];
                let mut db = vec![0.0; d];
                for bi in 0..bn {
                    for ti in 0..t {
                        let gr = &g[(bi * t + ti) * d..][..d];
                        for c in 0..d {
                            db[c] += gr[c];
                        }
                        for j in 0..k {
                            let src_t = ti as isize + j as isize - half;
                            if src_t < 0 || src_t >= t as isize {
                                continue;
                            }
                            let off = (bi * t + src_t as usize) * d;
                            for c in 0..d {
                                dw[j * d + c] += gr[c] * xv[off + c];
                                dx[off + c] += gr[c] * wv[j * d + c];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(vec![bn, t, d], dx)),
                    Some(Tensor::new(vec![k, d], dw)),
                    Some(Tensor::new(vec![d], db)),
                ]
            }),
        )
    }

    /// Scale every row (trailing axis) to unit Euclidean norm:
    /// `x / max(‖x‖, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xt = self.value(x);
        let d = xt.last_dim();
        let mut out = xt.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let s = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.custom(
            &[x],
            Tensor::new(xt.shape().to_vec(), out),
            Box::new(move |ctx| {
                let (g, xv) = (ctx.grad.data(), ctx.inputs[0].data());
                let mut dx = vec![0.0; xv.len()];
                for ((dr, gr), xr) in dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(xv.chunks_exact(d)) {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s = n.max(eps);
                    let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let corr = if n > eps { xg / (n * n * n) } else { 0.0 };
                    for i in 0..d {
                        dr[i] = gr[i] / s - corr * xr[i];
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), dx))]
            }),
        )
    }

    /// Broadcast-add a per-sample channel vector `e[N,C]` to `x[N,H,W,C]`.
    pub fn add_channel_bias(&mut self, x: Var, e: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        assert_eq!(self.shape(e), &[s[0], s[3]]);
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let ev = self.value(e).data();
        let mut out = self.value(x).data().to_vec();
        for b in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    out[(b * hw + p) * c + ch] += ev[b * c + ch];
                }
            }
        }
        self.custom(
            &[x, e],
            Tensor::new(s, out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let de = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; n * c];
                    for b in 0..n {
                        for p in 0..hw {
                            for ch in 0..c {
                                d[b * c + ch] += g[(b * hw + p) * c + ch];
                            }
                        }
                    }
                    Tensor::new(vec![n, c], d)
                });
                vec![Some(ctx.grad.clone()), de]
            }),
        )
    }

    /// Feature-wise affine modulation `x·(1+γ) + β`, elementwise over
    /// `x, γ, β` of one shape.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(self.shape(gamma), s.as_slice());
        assert_eq!(self.shape(beta), s.as_slice());
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xv.iter().zip(gv).zip(bv).map(|((x, g), b)| x * (1.0 + g) + b).collect();
        self.custom(
            &[x, gamma, beta],
            Tensor::new(s.clone(), out),
            Box::new(move |ctx| {
                let (g, xv, gv) = (ctx.grad.data(), ctx.inputs[0].data(), ctx.inputs[1].data());
                let dx: Vec<f64> = g.iter().zip(gv).map(|(gi, gm)| gi * (1.0 + gm)).collect();
                let dg: Vec<f64> = g.iter().zip(xv).map(|(gi, x)| gi * x).collect();
                vec![
                    Some(Tensor::new(s.clone(), dx)),
                    Some(Tensor::new(s.clone(), dg)),
                    Some(ctx.grad.clone()),
                ]
            }),
        )
    }

    /// Nearest-neighbour resampling of `[B,T,C]` to `t_out` steps: output
    /// step `j` reads input step `⌊j·T/t_out⌋`.
    pub fn resample_time(&mut self, x: Var, t_out: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        let (b, t, c) = (s[0], s[1], s[2]);
        let index: Vec<usize> = (0..t_out).map(|j| j * t / t_out).collect();
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * t_out * c];
        for bi in 0..b {
            for (j, &src) in index.iter().enumerate() {
                out[(bi * t_out + j) * c..][..c].copy_from_slice(&xv[(bi * t + src) * c..][..c]);
            }
        }
        self.custom(
            &[x],
            Tensor::new(vec![b, t_out, c], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; b * t * c];
                for bi in 0..b {
                    for (j, &src) in index.iter().enumerate() {
                        for ch in 0..c {
                            d[(bi * t + src) * c + ch] += g[(bi * t_out + j) * c + ch];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![b, t, c], d))]
            }),
        )
    }

    /// Concatenate along the trailing axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = self.shape(parts[0]).split_last().unwrap().1.to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(
                    s.split_last().unwrap().1,
                    lead.as_slice(),
                    "concat_last: leading shape mismatch"
                );
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + wd].copy_from_slice(&v[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead.clone();
        shape.push(total);
        self.custom(
            parts,
            Tensor::new(shape, out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut off = 0;
                widths
                    .iter()
                    .zip(&ctx.inputs)
                    .map(|(&wd, inp)| {
                        let mut d = vec![0.0; rows * wd];
                        for r in 0..rows {
                            d[r * wd..(r + 1) * wd].copy_from_slice(&g[r * total + off..r * total + off + wd]);
                        }
                        off += wd;
                        Some(Tensor::new(inp.shape().to_vec(), d))
                    })
                    .collect()
            }),
        )
    }

    /// Cell means of `x[N,H,W,C]` on an `s×s` grid, flattened to
    /// `[N, s·s·C]` (row-major cells, channels innermost). When `H` or `W`
    /// is not a multiple of `s` the last row/column is replicated up to the
    /// next multiple.
    pub fn grid_pool(&mut self, x: Var, s: usize) -> Var {
        let sh = self.shape(x).to_vec();
        assert!(sh.len() == 4 && s >= 1);
        let (n, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        let (ch, cw) = (h.div_ceil(s), w.div_ceil(s));
        let inv = 1.0 / (ch * cw) as f64;
        // Source pixel of every padded position, grouped by cell.
        let taps: Vec<Vec<(usize, usize)>> = (0..s * s)
            .map(|cell| {
                let (gy, gx) = (cell / s, cell % s);
                let mut v = Vec::with_capacity(ch * cw);
                for py in gy * ch..(gy + 1) * ch {
                    for px in gx * cw..(gx + 1) * cw {
                        v.push((py.min(h - 1), px.min(w - 1)));
                    }
                }
                v
            })
            .collect();
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * s * s * c];
        for b in 0..n {
            for (cell, tap) in taps.iter().enumerate() {
                let dst = &mut out[(b * s * s + cell) * c..][..c];
                for &(y, xx) in tap {
                    for (a, v) in dst.iter_mut().zip(&xv[((b * h + y) * w + xx) * c..][..c]) {
                        *a += v * inv;
                    }
                }
            }
        }
        self.custom(
            &[x],
            Tensor::new(vec![n, s * s * c], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; n * h * w * c];
                for b in 0..n {
                    for (cell, tap) in taps.iter().enumerate() {
                        let src = &g[(b * s * s + cell) * c..][..c];
                        for &(y, xx) in tap {
                            for (a, v) in d[((b * h + y) * w + xx) * c..][..c].iter_mut().zip(src) {
                                *a += v * inv;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, h, w, c], d))]
            }),
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let d = xt.last_dim();
        let mut out = xt.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.custom(
            &[x],
            Tensor::new(xt.shape().to_vec(), out),
            Box::new(move |ctx| {
                let (g, y) = (ctx.grad.data(), ctx.output.data());
                let mut dx = vec![0.0; y.len()];
                for ((dr, gr), yr) in dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                    let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dr[i] = yr[i] * (gr[i] - gy);
                    }
                }
                vec![Some(Tensor::new(ctx.output.shape().to_vec(), dx))]
            }),
        )
    }

    /// Step `t` of `x[B,T,D]` as `[B,D]`.
    pub fn select_step(&mut self, x: Var, t: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && t < s[1]);
        let (b, tn, d) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&xv[(bi * tn + t) * d..][..d]);
        }
        self.custom(
            &[x],
            Tensor::new(vec![b, d], out),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![0.0; b * tn * d];
                for bi in 0..b {
                    dx[(bi * tn + t) * d..][..d].copy_from_slice(&g[bi * d..][..d]);
                }
                vec![Some(Tensor::new(vec![b, tn, d], dx))]
            }),
        )
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let diff = self.sub(a, b);
        let sq = self.mul(diff, diff);
        self.mean_all(sq)
    }

    /// Mean softmax cross-entropy of `logits[N,C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert!(s.len() == 2 && s[0] == labels.len());
        let (n, c) = (s[0], s[1]);
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - mx).exp() / z;
            }
            loss += -(row[labels[i]] - mx - z.ln());
        }
        let labels = labels.to_vec();
        self.custom(
            &[logits],
            Tensor::scalar(loss / n as f64),
            Box::new(move |ctx| {
                let g = ctx.grad.item() / n as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                for v in d.iter_mut() {
                    *v *= g;
                }
                vec![Some(Tensor::new(vec![n, c], d))]
            }),
        )
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let z = self.value(logits).data().to_vec();
        assert_eq!(z.len(), targets.len());
        let n = z.len() as f64;
        let loss: f64 = z
            .iter()
            .zip(targets)
            .map(|(&zi, &y)| softplus(zi) - y * zi)
            .sum::<f64>()
            / n;
        let targets = targets.to_vec();
        self.custom(
            &[logits],
            Tensor::scalar(loss),
            Box::new(move |ctx| {
                let g = ctx.grad.item() / n;
                let d: Vec<f64> = z.iter().zip(&targets).map(|(&zi, &y)| g * (sigmoid(zi) - y)).collect();
                vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), d))]
            }),
        )
    }
}
