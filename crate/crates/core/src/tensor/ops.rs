use super::{shape_err, Element, Result, Tensor};

fn cast<T: Element>(v: f64) -> T {
    T::cast(v)
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn last_dim<T: Element>(t: &Tensor<T>) -> (usize, usize) {
    let d = *t.shape().last().expect("tensors have rank >= 1");
    (t.numel() / d, d)
}

impl<T: Element> Tensor<T> {
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        // df(x, y) is dy/dx evaluated at input x with output y
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.shared_data();
        let y = std::sync::Arc::new(out.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, need| {
                vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, need| {
                vec![
                    need[0].then(|| g.to_vec()),
                    need[1].then(|| g.iter().map(|&v| -v).collect()),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.shared_data(), other.shared_data());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect()),
                    need[1].then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c: T = cast(c);
        self.unary(|x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c: T = cast(c);
        self.unary(|x| x + c, |_, _| T::one())
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let k: T = cast((2.0 / std::f64::consts::PI).sqrt());
        let a: T = cast(0.044715);
        let half: T = cast(0.5);
        let three: T = cast(3.0);
        self.unary(
            move |x| {
                let t = (k * (x + a * x * x * x)).tanh();
                half * x * (T::one() + t)
            },
            move |x, _| {
                let t = (k * (x + a * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * k * (T::one() + three * a * x * x)
            },
        )
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, eps: f64) -> Tensor<T> {
        let eps: T = cast(eps);
        self.unary(
            move |x| x.max(eps).ln(),
            move |x, _| if x > eps { T::one() / x } else { T::zero() },
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let &[r, c] = self.shape() else {
            return shape_err("transpose", format!("rank 2 expected, got {:?}", self.shape()));
        };
        let out = transpose_raw(self.data(), r, c);
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(transpose_raw(g, c, r))]),
        ))
    }

    /// `[m x k] @ [k x n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return shape_err(
                "matmul",
                format!("rank-2 operands expected, got {:?} and {:?}", self.shape(), other.shape()),
            );
        };
        if k != k2 {
            return shape_err("matmul", format!("inner dimensions {k} and {k2}"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(), false, other.data(), false, T::zero(), &mut out);
        let (a, b) = (self.shared_data(), other.shared_data());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, &b, true, T::zero(), &mut ga);
                    ga
                });
                let gb = need[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, &a, true, g, false, T::zero(), &mut gb);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Adds `bias` (length = last dimension) to every row.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, d) = last_dim(self);
        if bias.numel() != d {
            return shape_err("add_bias", format!("bias of {} for last dim {d}", bias.numel()));
        }
        let b = bias.data();
        let out = self
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &b)| x + b))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, need| {
                let gb = need[1].then(|| {
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    gb
                });
                vec![need[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (rows, d) = last_dim(self);
        if len == 0 || start + len > d {
            return shape_err("narrow_last", format!("[{start}, {}) of {d}", start + len));
        }
        let out = self
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); rows * d];
                for (dst, src) in gx.chunks_mut(d).zip(g.chunks(len)) {
                    dst[start..start + len].copy_from_slice(src);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            return shape_err("concat_last", "no inputs");
        };
        let lead = &first.shape()[..first.shape().len() - 1];
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        for p in parts {
            if &p.shape()[..p.shape().len() - 1] != lead {
                return shape_err("concat_last", format!("{:?} vs {:?}", p.shape(), first.shape()));
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor::from_op(
            shape,
            out,
            parts.to_vec(),
            Box::new(move |g, need| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(need)
                    .map(|(&w, &n)| {
                        let part = n.then(|| {
                            g.chunks(total).flat_map(|row| row[offset..offset + w].iter().copied()).collect()
                        });
                        offset += w;
                        part
                    })
                    .collect()
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<T> {
        let (_, d) = last_dim(self);
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let y = std::sync::Arc::new(out.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(y.chunks(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Normalizes each row of the last axis to zero mean and unit variance
    /// (biased estimator), then applies `gamma * x + beta`.
    pub fn layernorm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let (rows, d) = last_dim(self);
        if gamma.numel() != d || beta.numel() != d {
            return shape_err(
                "layernorm",
                format!("affine params {} / {} for width {d}", gamma.numel(), beta.numel()),
            );
        }
        let eps: T = cast(eps);
        let n: T = cast(d as f64);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let (gm, bt) = (gamma.data(), beta.data());
        let out = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(gm.iter().zip(bt)).map(|(&x, (&g, &b))| g * x + b))
            .collect();
        let gamma_data = gamma.shared_data();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, need| {
                let gx = need[0].then(|| {
                    let mut gx = Vec::with_capacity(rows * d);
                    for ((gr, xr), &is) in g.chunks(d).zip(xhat.chunks(d)).zip(&inv_std) {
                        let dxhat: Vec<T> =
                            gr.iter().zip(gamma_data.iter()).map(|(&g, &w)| g * w).collect();
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        gx.extend(
                            dxhat
                                .iter()
                                .zip(xr)
                                .map(|(&dh, &xh)| is / n * (n * dh - s1 - xh * s2)),
                        );
                    }
                    gx
                });
                let gg = need[1].then(|| {
                    let mut gg = vec![T::zero(); d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((a, &g), &x) in gg.iter_mut().zip(gr).zip(xr) {
                            *a = *a + g * x;
                        }
                    }
                    gg
                });
                let gb = need[2].then(|| {
                    let mut gb = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, &g)| *a = *a + g);
                    }
                    gb
                });
                vec![gx, gg, gb]
            }),
        ))
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn transpose_raw<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}
