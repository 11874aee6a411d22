use super::{shape_err, Element, Result, Tensor};

/// Zero padding on each border of a `C x H x W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Padding,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn new(
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return shape_err("conv2d", "stride must be positive");
        }
        let span_h = h + pad.top + pad.bottom;
        let span_w = w + pad.left + pad.right;
        if kh > span_h || kw > span_w {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded {span_h}x{span_w}"));
        }
        if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return shape_err(
                "conv2d",
                format!("({span_h} - {kh}) or ({span_w} - {kw}) not divisible by stride {stride}"),
            );
        }
        Ok(Geometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out: (span_h - kh) / stride + 1,
            w_out: (span_w - kw) / stride + 1,
        })
    }

    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad.top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad.left)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// Unfolds channels `[c0, c0 + cg)` into a `(cg*kh*kw) x (h_out*w_out)` matrix.
    fn im2col<T: Element>(&self, input: &[T], c0: usize, cg: usize) -> Vec<T> {
        let plane = self.h_out * self.w_out;
        let mut cols = vec![T::zero(); cg * self.kh * self.kw * plane];
        for c in 0..cg {
            let src = &input[(c0 + c) * self.h * self.w..];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * plane;
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, x)) = self.source(oy, ky, ox, kx) {
                                cols[row + oy * self.w_out + ox] = src[y * self.w + x];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Element>(&self, cols: &[T], out: &mut [T], c0: usize, cg: usize) {
        let plane = self.h_out * self.w_out;
        for c in 0..cg {
            let base = (c0 + c) * self.h * self.w;
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * plane;
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((y, x)) = self.source(oy, ky, ox, kx) {
                                let dst = &mut out[base + y * self.w + x];
                                *dst = *dst + cols[row + oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// 2-D cross-correlation of a `C_in x H x W` input with a
    /// `C_out x (C_in/groups) x kh x kw` kernel, symmetric zero padding.
    pub fn conv2d(
        &self,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        self.conv2d_padded(kernel, stride, Padding::uniform(padding), groups)
    }

    /// [`Tensor::conv2d`] with independent padding per border.
    pub fn conv2d_padded(
        &self,
        kernel: &Tensor<T>,
        stride: usize,
        pad: Padding,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let &[c_in, h, w] = self.shape() else {
            return shape_err("conv2d", format!("input must be C x H x W, got {:?}", self.shape()));
        };
        let &[c_out, cg, kh, kw] = kernel.shape() else {
            return shape_err("conv2d", format!("kernel must be rank 4, got {:?}", kernel.shape()));
        };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return shape_err("conv2d", format!("{c_in} in / {c_out} out channels vs {groups} groups"));
        }
        if cg != c_in / groups {
            return shape_err("conv2d", format!("kernel expects {cg} channels per group, input has {}", c_in / groups));
        }
        let geo = Geometry::new(c_in, h, w, kh, kw, stride, pad)?;
        let og = c_out / groups;
        let plane = geo.h_out * geo.w_out;
        let kcols = cg * kh * kw;

        let mut out = vec![T::zero(); c_out * plane];
        for g in 0..groups {
            let cols = geo.im2col(self.data(), g * cg, cg);
            let kslice = &kernel.data()[g * og * kcols..(g + 1) * og * kcols];
            T::gemm(og, kcols, plane, kslice, false, &cols, false, T::zero(), &mut out[g * og * plane..(g + 1) * og * plane]);
        }

        let input = self.shared_data();
        let weights = kernel.shared_data();
        Ok(Tensor::from_op(
            vec![c_out, geo.h_out, geo.w_out],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |grad, need| {
                let mut gin = need[0].then(|| vec![T::zero(); geo.c_in * geo.h * geo.w]);
                let mut gk = need[1].then(|| vec![T::zero(); weights.len()]);
                for g in 0..groups {
                    let gout = &grad[g * og * plane..(g + 1) * og * plane];
                    if let Some(gk) = gk.as_mut() {
                        let cols = geo.im2col(&input, g * cg, cg);
                        T::gemm(og, plane, kcols, gout, false, &cols, true, T::zero(), &mut gk[g * og * kcols..(g + 1) * og * kcols]);
                    }
                    if let Some(gin) = gin.as_mut() {
                        let kslice = &weights[g * og * kcols..(g + 1) * og * kcols];
                        let mut gcols = vec![T::zero(); kcols * plane];
                        T::gemm(kcols, og, plane, kslice, true, gout, false, T::zero(), &mut gcols);
                        geo.col2im(&gcols, gin, g * cg, cg);
                    }
                }
                vec![gin, gk]
            }),
        ))
    }
}
