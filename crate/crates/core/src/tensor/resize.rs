use super::{shape_err, Element, Result, Tensor};

/// Source coordinate and weights for one output index under the
/// align-corners convention: output 0 samples input 0 and output
/// `out - 1` samples input `len - 1`.
#[derive(Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Element>(len: usize, out: usize) -> Vec<Tap<T>> {
    (0..out)
        .map(|i| {
            let src = if out == 1 {
                0.0
            } else {
                i as f64 * (len - 1) as f64 / (out - 1) as f64
            };
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            Tap {
                lo,
                hi,
                frac: T::cast(src - lo as f64),
            }
        })
        .collect()
}

impl<T: Element> Tensor<T> {
    /// Bilinear resize of a `C x H x W` tensor with aligned corners.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let &[c, h, w] = self.shape() else {
            return shape_err("bilinear_resize", format!("C x H x W expected, got {:?}", self.shape()));
        };
        if out_h == 0 || out_w == 0 {
            return shape_err("bilinear_resize", "output size must be positive");
        }
        let ty = taps::<T>(h, out_h);
        let tx = taps::<T>(w, out_w);
        let one = T::one();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let src = &self.data()[ch * h * w..(ch + 1) * h * w];
            for y in &ty {
                let (r0, r1) = (&src[y.lo * w..], &src[y.hi * w..]);
                for x in &tx {
                    // lerp as a + (b - a) t keeps constant regions exact
                    let top = r0[x.lo] + (r0[x.hi] - r0[x.lo]) * x.frac;
                    let bot = r1[x.lo] + (r1[x.hi] - r1[x.lo]) * x.frac;
                    out.push(top + (bot - top) * y.frac);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, out_h, out_w],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                    let gsrc = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                    for (yi, y) in ty.iter().enumerate() {
                        for (xi, x) in tx.iter().enumerate() {
                            let v = gsrc[yi * out_w + xi];
                            let (wy0, wy1) = (one - y.frac, y.frac);
                            let (wx0, wx1) = (one - x.frac, x.frac);
                            dst[y.lo * w + x.lo] = dst[y.lo * w + x.lo] + v * wy0 * wx0;
                            dst[y.lo * w + x.hi] = dst[y.lo * w + x.hi] + v * wy0 * wx1;
                            dst[y.hi * w + x.lo] = dst[y.hi * w + x.lo] + v * wy1 * wx0;
                            dst[y.hi * w + x.hi] = dst[y.hi * w + x.hi] + v * wy1 * wx1;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
