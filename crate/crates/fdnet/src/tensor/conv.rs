//! 2D convolution via im2col and a dense matrix product, with stride,
//! zero padding and dilation. Backward rebuilds the column matrix per
//! sample rather than keeping it alive between passes, trading a little
//! compute for a flat memory profile.

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        assert!(stride >= 1 && dilation >= 1);
        Self {
            stride,
            padding,
            dilation,
        }
    }

    pub fn unit() -> Self {
        Self::new(1, 0, 1)
    }

    /// Output length along one axis for input length `n` and kernel `k`.
    pub fn out_len(&self, n: usize, k: usize) -> usize {
        let span = self.dilation * (k - 1) + 1;
        assert!(
            n + 2 * self.padding >= span,
            "conv2d: kernel span {span} exceeds padded input {}",
            n + 2 * self.padding
        );
        (n + 2 * self.padding - span) / self.stride + 1
    }
}

/// Gather `[Cin*Kh*Kw, Oh*Ow]` columns for one `[Cin, H, W]` sample.
fn im2col<T: Scalar>(
    src: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
) -> Array2<T> {
    let mut cols = Array2::<T>::zeros((c_in * kh * kw, oh * ow));
    let buf = cols.as_slice_mut().unwrap();
    let l = oh * ow;
    for ci in 0..c_in {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * l;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let ixx = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ixx < 0 || ixx >= w as isize {
                            continue;
                        }
                        buf[dst_row + ox] = plane[src_row + ixx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the adjoint of `im2col` back onto one input sample.
fn col2im<T: Scalar>(
    cols: &ArrayView2<T>,
    dst: &mut [T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
) {
    let buf = cols.as_slice().expect("col2im: columns must be contiguous");
    let l = oh * ow;
    for ci in 0..c_in {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * l;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = iy as usize * w;
                    let src_row = row + oy * ow;
                    for ox in 0..ow {
                        let ixx = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ixx < 0 || ixx >= w as isize {
                            continue;
                        }
                        plane[dst_row + ixx as usize] += buf[src_row + ox];
                    }
                }
            }
        }
    }
}

/// Convolve `[B, Cin, H, W]` with `[Cout, Cin, Kh, Kw]` weights plus an
/// optional `[Cout]` bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Tensor<T> {
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    assert_eq!(xs.len(), 4, "conv2d input must be [B,Cin,H,W]");
    assert_eq!(ws.len(), 4, "conv2d weight must be [Cout,Cin,Kh,Kw]");
    assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
    let (b, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    if let Some(bt) = bias {
        assert_eq!(bt.shape(), &[c_out], "conv2d: bias shape");
    }
    let oh = spec.out_len(h, kh);
    let ow = spec.out_len(w, kw);
    let l = oh * ow;
    let kdim = c_in * kh * kw;

    let value = x.with(|xv| {
        weight.with(|wv| {
            let xf = xv.as_slice().unwrap();
            let w2 = wv
                .view()
                .into_shape_with_order((c_out, kdim))
                .unwrap()
                .to_owned();
            let bias_vals: Option<Vec<T>> =
                bias.map(|bt| bt.with(|bv| bv.iter().cloned().collect()));
            let mut out = vec![T::zero(); b * c_out * l];
            for bi in 0..b {
                let cols = im2col(
                    &xf[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                    c_in,
                    h,
                    w,
                    kh,
                    kw,
                    oh,
                    ow,
                    spec,
                );
                let prod = w2.dot(&cols);
                let pf = prod.as_slice().unwrap();
                let dst = &mut out[bi * c_out * l..(bi + 1) * c_out * l];
                dst.copy_from_slice(pf);
                if let Some(ref bs) = bias_vals {
                    for co in 0..c_out {
                        let bv = bs[co];
                        for v in &mut dst[co * l..(co + 1) * l] {
                            *v += bv;
                        }
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[b, c_out, oh, ow]), out).unwrap()
        })
    });

    let (ix, iw) = (x.id(), weight.id());
    let ibias = bias.map(|bt| bt.id());
    let mut parents: Vec<&Tensor<T>> = vec![x, weight];
    if let Some(bt) = bias {
        parents.push(bt);
    }
    Tensor::from_op(&parents, value, move |nodes, g, st| {
        let gf = g.as_slice().expect("conv2d grad contiguous");
        let xf = nodes[ix].value.as_slice().unwrap();
        let w2 = nodes[iw]
            .value
            .view()
            .into_shape_with_order((c_out, kdim))
            .unwrap()
            .to_owned();

        if let Some(ib) = ibias {
            if st.wants(ib) {
                let mut db = vec![T::zero(); c_out];
                for bi in 0..b {
                    for co in 0..c_out {
                        let seg = &gf[(bi * c_out + co) * l..(bi * c_out + co + 1) * l];
                        for &v in seg {
                            db[co] += v;
                        }
                    }
                }
                st.accumulate(ib, ArrayD::from_shape_vec(IxDyn(&[c_out]), db).unwrap());
            }
        }

        let want_x = st.wants(ix);
        let want_w = st.wants(iw);
        if !want_x && !want_w {
            return;
        }
        let mut dw = Array2::<T>::zeros((c_out, kdim));
        let mut dx = vec![T::zero(); b * c_in * h * w];
        for bi in 0..b {
            let g2 = ArrayView2::from_shape(
                (c_out, l),
                &gf[bi * c_out * l..(bi + 1) * c_out * l],
            )
            .unwrap();
            if want_w {
                let cols = im2col(
                    &xf[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                    c_in,
                    h,
                    w,
                    kh,
                    kw,
                    oh,
                    ow,
                    spec,
                );
                dw = dw + g2.dot(&cols.t());
            }
            if want_x {
                let dcols = w2.t().dot(&g2);
                col2im(
                    &dcols.view(),
                    &mut dx[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                    c_in,
                    h,
                    w,
                    kh,
                    kw,
                    oh,
                    ow,
                    spec,
                );
            }
        }
        if want_w {
            let dw_dyn = ArrayD::from_shape_vec(
                IxDyn(&[c_out, c_in, kh, kw]),
                dw.into_raw_vec_and_offset().0,
            )
            .unwrap();
            st.accumulate(iw, dw_dyn);
        }
        if want_x {
            st.accumulate(
                ix,
                ArrayD::from_shape_vec(IxDyn(&[b, c_in, h, w]), dx).unwrap(),
            );
        }
    })
}
