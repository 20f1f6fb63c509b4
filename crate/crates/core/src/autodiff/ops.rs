use super::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape(a: &[usize], b: &[usize], op: &str) {
    assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
}

// Elementwise arithmetic.
impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, &[a, b], Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, &[a, b], Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "mul");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            out,
            &[a, b],
            Box::new(|g, p, _, need| {
                vec![
                    need[0].then(|| g.zip_map(p[1], |g, y| g * y)),
                    need[1].then(|| g.zip_map(p[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "div");
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(
            out,
            &[a, b],
            Box::new(|g, p, out, need| {
                vec![
                    need[0].then(|| g.zip_map(p[1], |g, y| g / y)),
                    need[1].then(|| {
                        let t = g.zip_map(out, |g, o| g * o);
                        t.zip_map(p[1], |t, y| -t / y)
                    }),
                ]
            }),
        )
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "minimum");
        let out = self.value(a).zip_map(self.value(b), |x, y| x.min(y));
        self.push(
            out,
            &[a, b],
            Box::new(|g, p, _, _| {
                let first = Tensor::from_fn(g.shape(), |i| {
                    if p[0].data()[i] <= p[1].data()[i] {
                        g.data()[i]
                    } else {
                        T::zero()
                    }
                });
                let second = g.zip_map(&first, |g, f| g - f);
                vec![Some(first), Some(second)]
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, &[a], Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, &[a], Box::new(move |g, _, _, _| vec![Some(g.map(|x| x * c))]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    /// `sqrt(a² + b²)` with a zero subgradient where both are zero.
    pub fn hypot(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "hypot");
        let out = self.value(a).zip_map(self.value(b), |x, y| x.hypot(y));
        self.push(
            out,
            &[a, b],
            Box::new(|g, p, out, _| {
                let d = |src: &Tensor<T>| {
                    Tensor::from_fn(g.shape(), |i| {
                        let r = out.data()[i];
                        if r > T::zero() {
                            g.data()[i] * src.data()[i] / r
                        } else {
                            T::zero()
                        }
                    })
                };
                vec![Some(d(p[0])), Some(d(p[1]))]
            }),
        )
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let out = self.value(a).map(f);
        self.push(
            out,
            &[a],
            Box::new(move |g, p, out, _| {
                let x = p[0];
                vec![Some(Tensor::from_fn(g.shape(), |i| g.data()[i] * df(x.data()[i], out.data()[i])))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), |_, y| if y > T::zero() { T::of(0.5) / y } else { T::zero() })
    }
}

// Reductions.
impl<T: Scalar> Graph<T> {
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(
            out,
            &[a],
            Box::new(|g, p, _, _| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s = self.sum(a);
        self.mul_scalar(s, T::one() / n)
    }

    /// Global maximum; the gradient flows to the first maximal element.
    pub fn max_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut best = 0;
        for (i, &x) in v.data().iter().enumerate() {
            if x > v.data()[best] {
                best = i;
            }
        }
        let out = Tensor::scalar(v.data()[best]);
        self.push(
            out,
            &[a],
            Box::new(move |g, p, _, _| {
                let mut d = Tensor::zeros(p[0].shape());
                d.data_mut()[best] = g.data()[0];
                vec![Some(d)]
            }),
        )
    }

    /// Sum over the leading axis: `[d0, rest..] -> [1, rest..]`.
    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d0 = v.shape()[0];
        let inner = v.len() / d0;
        let mut out_shape = v.shape().to_vec();
        out_shape[0] = 1;
        let mut out = vec![T::zero(); inner];
        for k in 0..d0 {
            for (o, &x) in out.iter_mut().zip(&v.data()[k * inner..(k + 1) * inner]) {
                *o += x;
            }
        }
        self.push(
            Tensor::from_vec(&out_shape, out),
            &[a],
            Box::new(move |g, p, _, _| {
                let mut d = Vec::with_capacity(d0 * inner);
                for _ in 0..d0 {
                    d.extend_from_slice(g.data());
                }
                vec![Some(Tensor::from_vec(p[0].shape(), d))]
            }),
        )
    }

    /// Maximum over the leading axis: `[d0, rest..] -> [1, rest..]`.
    /// Ties route the gradient to the lowest index.
    pub fn max_axis0(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d0 = v.shape()[0];
        let inner = v.len() / d0;
        let mut out_shape = v.shape().to_vec();
        out_shape[0] = 1;
        let mut arg = vec![0usize; inner];
        let mut out = v.data()[..inner].to_vec();
        for k in 1..d0 {
            for i in 0..inner {
                let x = v.data()[k * inner + i];
                if x > out[i] {
                    out[i] = x;
                    arg[i] = k;
                }
            }
        }
        self.push(
            Tensor::from_vec(&out_shape, out),
            &[a],
            Box::new(move |g, p, _, _| {
                let mut d = Tensor::zeros(p[0].shape());
                for (i, &k) in arg.iter().enumerate() {
                    d.data_mut()[k * inner + i] = g.data()[i];
                }
                vec![Some(d)]
            }),
        )
    }
}

// Shape manipulation.
impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push(
            out,
            &[a],
            Box::new(|g, p, _, _| vec![Some(g.clone().reshape(p[0].shape()))]),
        )
    }

    /// `out[i] = a[index[i]]`; the backward pass scatter-adds.
    pub fn gather(&mut self, a: Var, out_shape: &[usize], index: Vec<usize>) -> Var {
        let v = self.value(a);
        assert_eq!(out_shape.iter().product::<usize>(), index.len());
        let out = Tensor::from_vec(out_shape, index.iter().map(|&i| v.data()[i]).collect());
        self.push(
            out,
            &[a],
            Box::new(move |g, p, _, _| {
                let mut d = Tensor::zeros(p[0].shape());
                let dd = d.data_mut();
                for (&i, &gv) in index.iter().zip(g.data()) {
                    dd[i] += gv;
                }
                vec![Some(d)]
            }),
        )
    }

    /// Numpy-style broadcast; `a` must have the same rank as `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = self.shape(a).to_vec();
        assert_eq!(src.len(), shape.len(), "broadcast_to: rank mismatch");
        if src == shape {
            return a;
        }
        let mut src_strides = vec![0usize; src.len()];
        let mut acc = 1;
        for d in (0..src.len()).rev() {
            assert!(src[d] == shape[d] || src[d] == 1, "cannot broadcast {src:?} to {shape:?}");
            src_strides[d] = if src[d] == 1 { 0 } else { acc };
            acc *= src[d];
        }
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..n {
            index.push(coord.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
            for d in (0..shape.len()).rev() {
                coord[d] += 1;
                if coord[d] < shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(a, shape, index)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2, "transpose expects a matrix");
        let (r, c) = (s[0], s[1]);
        let index = (0..r * c).map(|i| (i % r) * c + i / r).collect();
        self.gather(a, &[c, r], index)
    }

    /// Reflection padding (no edge repeat) of a c×h×w tensor.
    pub fn reflect_pad(&mut self, a: Var, pad: usize) -> Var {
        let (c, h, w) = self.value(a).chw();
        assert!(pad < h && pad < w, "reflect_pad: pad {pad} too large for {h}×{w}");
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
            i as usize
        };
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let mut index = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                let sy = reflect(y as isize - pad as isize, h);
                for x in 0..wo {
                    let sx = reflect(x as isize - pad as isize, w);
                    index.push((ch * h + sy) * w + sx);
                }
            }
        }
        self.gather(a, &[c, ho, wo], index)
    }

    /// Nearest-neighbour spatial upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        if factor == 1 {
            return a;
        }
        let (c, h, w) = self.value(a).chw();
        let (ho, wo) = (h * factor, w * factor);
        let mut index = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    index.push((ch * h + y / factor) * w + x / factor);
                }
            }
        }
        self.gather(a, &[c, ho, wo], index)
    }

    /// Spatial window `[top, top+h) × [left, left+w)` of a c×h×w tensor.
    pub fn crop(&mut self, a: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let (c, hi, wi) = self.value(a).chw();
        assert!(top + h <= hi && left + w <= wi, "crop out of bounds");
        let mut index = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    index.push((ch * hi + top + y) * wi + left + x);
                }
            }
        }
        self.gather(a, &[c, h, w], index)
    }

    /// Channels `[start, start+len)` of a c×h×w tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(a).chw();
        assert!(start + len <= c, "slice_channels out of bounds");
        let plane = h * w;
        let out = Tensor::from_vec(
            &[len, h, w],
            self.value(a).data()[start * plane..(start + len) * plane].to_vec(),
        );
        self.push(
            out,
            &[a],
            Box::new(move |g, p, _, _| {
                let mut d = Tensor::zeros(p[0].shape());
                d.data_mut()[start * plane..(start + len) * plane].copy_from_slice(g.data());
                vec![Some(d)]
            }),
        )
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rest = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &rest[..], "concat: trailing shapes differ");
            lead += v.shape()[0];
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&rest);
        self.push(
            Tensor::from_vec(&shape, data),
            parts,
            Box::new(move |g, p, _, need| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(p)
                    .zip(need)
                    .map(|((&n, pv), &need)| {
                        let out = need.then(|| Tensor::from_vec(pv.shape(), g.data()[offset..offset + n].to_vec()));
                        offset += n;
                        out
                    })
                    .collect()
            }),
        )
    }
}

// Linear algebra.
impl<T: Scalar> Graph<T> {
    /// `[m,k] × [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} × {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            &mut out,
            n as isize,
            1,
            false,
        );
        self.push(
            Tensor::from_vec(&[m, n], out),
            &[a, b],
            Box::new(move |g, p, _, need| {
                let da = need[0].then(|| {
                    // dA = G · Bᵀ
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), n as isize, 1, p[1].data(), 1, n as isize, &mut d, k as isize, 1, false);
                    Tensor::from_vec(&[m, k], d)
                });
                let db = need[1].then(|| {
                    // dB = Aᵀ · G
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, p[0].data(), 1, k as isize, g.data(), n as isize, 1, &mut d, n as isize, 1, false);
                    Tensor::from_vec(&[k, n], d)
                });
                vec![da, db]
            }),
        )
    }

    /// Divides each row of a matrix by its L2 norm. Rows with norm below
    /// `1e-12` map to zero and pass no gradient.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert_eq!(v.ndim(), 2, "l2_normalize_rows expects a matrix");
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let tiny = T::of(1e-12);
        let norms: Vec<T> = (0..r)
            .map(|i| v.data()[i * c..(i + 1) * c].iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let out = Tensor::from_fn(&[r, c], |i| {
            let n = norms[i / c];
            if n < tiny {
                T::zero()
            } else {
                v.data()[i] / n
            }
        });
        self.push(
            out,
            &[a],
            Box::new(move |g, _, y, _| {
                let mut d = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let n = norms[i];
                    if n < tiny {
                        continue;
                    }
                    let row = i * c..(i + 1) * c;
                    let yg: T = y.data()[row.clone()].iter().zip(&g.data()[row.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in row {
                        d.data_mut()[j] = (g.data()[j] - y.data()[j] * yg) / n;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Spectrally normalized weight `w / σ` with `σ = uᵀ W v` and `u`, `v`
    /// treated as constants. `w` is viewed as `[out, rest]`.
    pub fn spectral_normalize(&mut self, w: Var, u: &Tensor<T>, v: &Tensor<T>) -> Var {
        let wt = self.value(w);
        let rows = wt.shape()[0];
        let cols = wt.len() / rows;
        assert_eq!(u.len(), rows, "spectral_normalize: u length");
        assert_eq!(v.len(), cols, "spectral_normalize: v length");
        let sigma = spectral_sigma(wt.data(), u.data(), v.data(), rows, cols);
        let out = wt.map(|x| x / sigma);
        let (u, v) = (u.data().to_vec(), v.data().to_vec());
        self.push(
            out,
            &[w],
            Box::new(move |g, p, _, _| {
                let wv = p[0];
                let inner: T = g.data().iter().zip(wv.data()).map(|(&a, &b)| a * b).sum();
                let coef = inner / (sigma * sigma);
                let d = Tensor::from_fn(wv.shape(), |i| {
                    g.data()[i] / sigma - coef * u[i / cols] * v[i % cols]
                });
                vec![Some(d)]
            }),
        )
    }
}

/// `uᵀ W v` for `W` stored row-major as `rows × cols`.
pub(crate) fn spectral_sigma<T: Scalar>(w: &[T], u: &[T], v: &[T], rows: usize, cols: usize) -> T {
    (0..rows)
        .map(|i| u[i] * w[i * cols..(i + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
        .sum()
}

// Convolution, pooling, normalization.
impl<T: Scalar> Graph<T> {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `x`: c×h×w, `w`: o×c×kh×kw, `b`: o (optional). Output o×ho×wo with
    /// `ho = (h + 2·pad − kh)/stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 4 && ws[1] == c, "conv2d: weight {ws:?} vs input channels {c}");
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad, ho, wo };
        let cols = im2col(self.value(x).data(), &geom);
        let ckk = c * kh * kw;
        let np = ho * wo;
        let mut out = vec![T::zero(); o * np];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), o, "conv2d: bias length");
            for (oc, chunk) in out.chunks_mut(np).enumerate() {
                chunk.fill(bv.data()[oc]);
            }
        }
        T::gemm(o, ckk, np, self.value(w).data(), ckk as isize, 1, &cols, np as isize, 1, &mut out, np as isize, 1, b.is_some());
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        self.push(
            Tensor::from_vec(&[o, ho, wo], out),
            &parents,
            Box::new(move |g, p, _, need| {
                let gd = g.data();
                let dx = need[0].then(|| {
                    let mut dcols = vec![T::zero(); ckk * np];
                    T::gemm(ckk, o, np, p[1].data(), 1, ckk as isize, gd, np as isize, 1, &mut dcols, np as isize, 1, false);
                    Tensor::from_vec(&[geom.c, geom.h, geom.w], col2im(&dcols, &geom))
                });
                let dw = need[1].then(|| {
                    let mut d = vec![T::zero(); o * ckk];
                    T::gemm(o, np, ckk, gd, np as isize, 1, &cols, 1, np as isize, &mut d, ckk as isize, 1, false);
                    Tensor::from_vec(&[o, geom.c, geom.kh, geom.kw], d)
                });
                let mut grads = vec![dx, dw];
                if p.len() == 3 {
                    grads.push(need[2].then(|| {
                        Tensor::from_vec(&[o], gd.chunks(np).map(|ch| ch.iter().copied().sum()).collect())
                    }));
                }
                grads
            }),
        )
    }

    /// Valid (unpadded) per-channel filtering with a fixed `kh×kw` kernel.
    pub fn depthwise_fixed(&mut self, x: Var, kernel: &Tensor<T>) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(kernel.ndim(), 2);
        let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
        assert!(h >= kh && w >= kw, "depthwise_fixed: kernel larger than input");
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let k = kernel.data().to_vec();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            let src = &xv[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
            for i in 0..kh {
                for j in 0..kw {
                    let kv = k[i * kw + j];
                    if kv == T::zero() {
                        continue;
                    }
                    for y in 0..ho {
                        let srow = &src[(y + i) * w + j..(y + i) * w + j + wo];
                        for (d, &s) in dst[y * wo..(y + 1) * wo].iter_mut().zip(srow) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&[c, ho, wo], out),
            &[x],
            Box::new(move |g, _, _, _| {
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let gsrc = &g.data()[ch * ho * wo..(ch + 1) * ho * wo];
                    let dst = &mut d[ch * h * w..(ch + 1) * h * w];
                    for i in 0..kh {
                        for j in 0..kw {
                            let kv = k[i * kw + j];
                            if kv == T::zero() {
                                continue;
                            }
                            for y in 0..ho {
                                let drow = &mut dst[(y + i) * w + j..(y + i) * w + j + wo];
                                for (dv, &gv) in drow.iter_mut().zip(&gsrc[y * wo..(y + 1) * wo]) {
                                    *dv += kv * gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[c, h, w], d))]
            }),
        )
    }

    /// 2×2 average pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size {h}×{w}");
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::of(0.25);
        let out = Tensor::from_fn(&[c, ho, wo], |i| {
            let ch = i / (ho * wo);
            let y = (i / wo) % ho;
            let xx = i % wo;
            let base = (ch * h + 2 * y) * w + 2 * xx;
            (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]) * quarter
        });
        self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut d = vec![T::zero(); c * h * w];
                for (i, &gv) in g.data().iter().enumerate() {
                    let ch = i / (ho * wo);
                    let y = (i / wo) % ho;
                    let xx = i % wo;
                    let base = (ch * h + 2 * y) * w + 2 * xx;
                    let q = gv * quarter;
                    d[base] += q;
                    d[base + 1] += q;
                    d[base + w] += q;
                    d[base + w + 1] += q;
                }
                vec![Some(Tensor::from_vec(&[c, h, w], d))]
            }),
        )
    }

    /// Group normalization without affine parameters. `groups == c` gives
    /// instance normalization.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: T) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
        let n = c / groups * h * w;
        let nf = T::of(n as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * h * w];
        let mut inv_std = Vec::with_capacity(groups);
        for gi in 0..groups {
            let src = &xv[gi * n..(gi + 1) * n];
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in out[gi * n..(gi + 1) * n].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        self.push(
            Tensor::from_vec(&[c, h, w], out),
            &[x],
            Box::new(move |g, _, y, _| {
                let mut d = vec![T::zero(); c * h * w];
                for gi in 0..groups {
                    let r = gi * n..(gi + 1) * n;
                    let gs = &g.data()[r.clone()];
                    let ys = &y.data()[r.clone()];
                    let mg = gs.iter().copied().sum::<T>() / nf;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for ((dv, &gv), &yv) in d[r].iter_mut().zip(gs).zip(ys) {
                        *dv = inv_std[gi] * (gv - mg - yv * mgy);
                    }
                }
                vec![Some(Tensor::from_vec(&[c, h, w], d))]
            }),
        )
    }

    /// Per-channel `x·γ + β` for c×h×w `x` and length-c `γ`, `β`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(self.value(gamma).len() == c && self.value(beta).len() == c, "channel_affine: parameter length");
        let plane = h * w;
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let out = Tensor::from_fn(&[c, h, w], |i| self.value(x).data()[i] * gv[i / plane] + bv[i / plane]);
        self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, _, need| {
                let gd = g.data();
                let dx = need[0].then(|| Tensor::from_fn(&[c, h, w], |i| gd[i] * p[1].data()[i / plane]));
                let dgamma = need[1].then(|| {
                    Tensor::from_fn(&[c], |ch| {
                        let r = ch * plane..(ch + 1) * plane;
                        gd[r.clone()].iter().zip(&p[0].data()[r]).map(|(&a, &b)| a * b).sum()
                    })
                });
                let dbeta = need[2]
                    .then(|| Tensor::from_fn(&[c], |ch| gd[ch * plane..(ch + 1) * plane].iter().copied().sum()));
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// `x ⊙ a` where the 1×h×w map `a` is broadcast over the channels of `x`.
    pub fn mul_channel_broadcast(&mut self, x: Var, a: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.shape(a), &[1, h, w], "mul_channel_broadcast: map shape");
        let plane = h * w;
        let av = self.value(a).data();
        let out = Tensor::from_fn(&[c, h, w], |i| self.value(x).data()[i] * av[i % plane]);
        self.push(
            out,
            &[x, a],
            Box::new(move |g, p, _, need| {
                let gd = g.data();
                let dx = need[0].then(|| Tensor::from_fn(&[c, h, w], |i| gd[i] * p[1].data()[i % plane]));
                let da = need[1].then(|| {
                    let mut d = vec![T::zero(); plane];
                    for ch in 0..c {
                        for (k, dv) in d.iter_mut().enumerate() {
                            *dv += gd[ch * plane + k] * p[0].data()[ch * plane + k];
                        }
                    }
                    Tensor::from_vec(&[1, h, w], d)
                });
                vec![dx, da]
            }),
        )
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Output positions `o` in `[lo, hi)` read input index `o·stride + k − pad`
/// inside `[0, n)`.
fn valid_range(n: usize, n_out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // o·stride + k ≥ pad  and  o·stride + k < n + pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n + pad > k { (n + pad - k).div_ceil(stride).min(n_out) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * np];
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(g.h, g.ho, g.stride, ki, g.pad);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(g.w, g.wo, g.stride, kj, g.pad);
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let out = &mut dst[oy * g.wo + x_lo..oy * g.wo + x_hi];
                    let ix0 = x_lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out.copy_from_slice(&src[ix0..ix0 + out.len()]);
                    } else {
                        for (t, d) in out.iter_mut().enumerate() {
                            *d = src[ix0 + t * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let np = g.ho * g.wo;
    let mut x = vec![T::zero(); g.c * g.h * g.w];
    for ch in 0..g.c {
        let plane = &mut x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(g.h, g.ho, g.stride, ki, g.pad);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(g.w, g.wo, g.stride, kj, g.pad);
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * np..(row + 1) * np];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let inp = &src[oy * g.wo + x_lo..oy * g.wo + x_hi];
                    let ix0 = x_lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, s) in dst[ix0..ix0 + inp.len()].iter_mut().zip(inp) {
                            *d += *s;
                        }
                    } else {
                        for (t, s) in inp.iter().enumerate() {
                            dst[ix0 + t * g.stride] += *s;
                        }
                    }
                }
            }
        }
    }
    x
}
