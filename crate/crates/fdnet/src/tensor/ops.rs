//! Differentiable op library: elementwise maps, shape plumbing, batched
//! matmul, softmax, pooling, bilinear resampling, group norm and the
//! binary-cross-entropy head.
//!
//! Backward closures recompute whatever cheap intermediates they need from
//! the parent values instead of caching them; only `max_pool2d` stores its
//! argmax indices.

use ndarray::{concatenate, ArrayD, Axis, Ix3, IxDyn};

use super::{scalar_value, std_owned, Scalar, Tensor};

/// Numerically stable logistic function.
pub(crate) fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let value = a.with(|av| b.with(|bv| av + bv));
    let (ia, ib) = (a.id(), b.id());
    Tensor::from_op(&[a, b], value, move |_, g, st| {
        st.accumulate(ia, g.clone());
        st.accumulate(ib, g.clone());
    })
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let value = a.with(|av| av.mapv(|x| x * c));
    let ia = a.id();
    Tensor::from_op(&[a], value, move |_, g, st| {
        st.accumulate(ia, g.mapv(|x| x * c));
    })
}

/// Scalar-valued contraction `sum(a * w)` against a fixed weight array.
pub fn weighted_sum<T: Scalar>(a: &Tensor<T>, w: ArrayD<T>) -> Tensor<T> {
    assert_eq!(a.shape(), w.shape(), "weighted_sum: shape mismatch");
    let s: T = a.with(|av| av.iter().zip(w.iter()).map(|(&x, &c)| x * c).sum());
    let ia = a.id();
    Tensor::from_op(&[a], scalar_value(s), move |_, g, st| {
        let go = *g.iter().next().unwrap();
        st.accumulate(ia, w.mapv(|c| c * go));
    })
}

/// Sum of scalar tensors.
pub fn add_n<T: Scalar>(terms: &[&Tensor<T>]) -> Tensor<T> {
    assert!(!terms.is_empty());
    let mut s = T::zero();
    for t in terms {
        s += t.item();
    }
    let ids: Vec<usize> = terms.iter().map(|t| t.id()).collect();
    Tensor::from_op(terms, scalar_value(s), move |nodes, g, st| {
        let go = *g.iter().next().unwrap();
        for &id in &ids {
            let shape = nodes[id].value.raw_dim();
            st.accumulate(id, ArrayD::from_elem(shape, go));
        }
    })
}

/// Concatenate along the channel axis of `[B, C, H, W]` tensors.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Tensor<T> {
    assert!(xs.len() >= 2, "concat_channels needs at least two inputs");
    let value = {
        let views: Vec<ArrayD<T>> = xs.iter().map(|x| x.value()).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        std_owned(concatenate(Axis(1), &view_refs).expect("concat_channels: incompatible shapes"))
    };
    let ids: Vec<usize> = xs.iter().map(|x| x.id()).collect();
    let widths: Vec<usize> = xs.iter().map(|x| x.shape()[1]).collect();
    Tensor::from_op(xs, value, move |_, g, st| {
        let mut off = 0usize;
        for (&id, &c) in ids.iter().zip(widths.iter()) {
            let part = g
                .slice_axis(Axis(1), ndarray::Slice::from(off..off + c))
                .to_owned();
            st.accumulate(id, std_owned(part));
            off += c;
        }
    })
}

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    assert_eq!(x.len(), n, "reshape: element count mismatch");
    let value = x.with(|v| {
        ArrayD::from_shape_vec(IxDyn(shape), v.iter().cloned().collect()).unwrap()
    });
    let ix = x.id();
    let old_shape = x.shape().to_vec();
    Tensor::from_op(&[x], value, move |_, g, st| {
        let back =
            ArrayD::from_shape_vec(IxDyn(&old_shape), g.iter().cloned().collect()).unwrap();
        st.accumulate(ix, back);
    })
}

/// Swap the last two axes of a `[B, M, N]` tensor.
pub fn transpose12<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.shape().len(), 3, "transpose12 expects rank 3");
    let value = x.with(|v| std_owned(v.clone().permuted_axes(IxDyn(&[0, 2, 1]))));
    let ix = x.id();
    Tensor::from_op(&[x], value, move |_, g, st| {
        st.accumulate(ix, std_owned(g.clone().permuted_axes(IxDyn(&[0, 2, 1]))));
    })
}

/// Batched matrix product of `[B, M, K]` and `[B, K, N]`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    assert_eq!(sa.len(), 3, "bmm lhs rank");
    assert_eq!(sb.len(), 3, "bmm rhs rank");
    assert_eq!(sa[0], sb[0], "bmm batch mismatch");
    assert_eq!(sa[2], sb[1], "bmm inner dim mismatch");
    let (bsz, m, n) = (sa[0], sa[1], sb[2]);
    let value = a.with(|av| {
        b.with(|bv| {
            let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
            let b3 = bv.view().into_dimensionality::<Ix3>().unwrap();
            let mut out = ndarray::Array3::<T>::zeros((bsz, m, n));
            for i in 0..bsz {
                let prod = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
                out.index_axis_mut(Axis(0), i).assign(&prod);
            }
            out.into_dyn()
        })
    });
    let (ia, ib) = (a.id(), b.id());
    Tensor::from_op(&[a, b], value, move |nodes, g, st| {
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let a3 = nodes[ia].value.view().into_dimensionality::<Ix3>().unwrap();
        let b3 = nodes[ib].value.view().into_dimensionality::<Ix3>().unwrap();
        if st.wants(ia) {
            let mut da = ndarray::Array3::<T>::zeros(a3.raw_dim());
            for i in 0..g3.shape()[0] {
                let prod = g3
                    .index_axis(Axis(0), i)
                    .dot(&b3.index_axis(Axis(0), i).t());
                da.index_axis_mut(Axis(0), i).assign(&prod);
            }
            st.accumulate(ia, da.into_dyn());
        }
        if st.wants(ib) {
            let mut db = ndarray::Array3::<T>::zeros(b3.raw_dim());
            for i in 0..g3.shape()[0] {
                let prod = a3
                    .index_axis(Axis(0), i)
                    .t()
                    .dot(&g3.index_axis(Axis(0), i));
                db.index_axis_mut(Axis(0), i).assign(&prod);
            }
            st.accumulate(ib, db.into_dyn());
        }
    })
}

fn softmax_rows<T: Scalar>(v: &ArrayD<T>, n: usize) -> ArrayD<T> {
    let mut out = std_owned(v.clone());
    let flat = out.as_slice_mut().unwrap();
    for row in flat.chunks_mut(n) {
        let mut max = row[0];
        for &x in row.iter() {
            if x > max {
                max = x;
            }
        }
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
    out
}

/// Softmax over the last axis, with per-row max subtraction.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("softmax on rank-0 tensor");
    let value = x.with(|v| softmax_rows(v, n));
    let ix = x.id();
    Tensor::from_op(&[x], value, move |nodes, g, st| {
        let s = softmax_rows(&nodes[ix].value, n);
        let mut dx = ArrayD::<T>::zeros(s.raw_dim());
        {
            let sf = s.as_slice().unwrap();
            let gf = g.as_slice().expect("softmax grad contiguous");
            let df = dx.as_slice_mut().unwrap();
            for r in 0..sf.len() / n {
                let (s_row, g_row) = (&sf[r * n..(r + 1) * n], &gf[r * n..(r + 1) * n]);
                let mut dot = T::zero();
                for j in 0..n {
                    dot += s_row[j] * g_row[j];
                }
                for j in 0..n {
                    df[r * n + j] = s_row[j] * (g_row[j] - dot);
                }
            }
        }
        st.accumulate(ix, dx);
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let value = x.with(|v| v.mapv(|a| if a > T::zero() { a } else { T::zero() }));
    let ix = x.id();
    Tensor::from_op(&[x], value, move |nodes, g, st| {
        let xv = &nodes[ix].value;
        let mut dx = g.clone();
        dx.zip_mut_with(xv, |d, &a| {
            if a <= T::zero() {
                *d = T::zero();
            }
        });
        st.accumulate(ix, dx);
    })
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let value = x.with(|v| v.mapv(|a| a * T::of(sigmoid_f64(a.f()))));
    let ix = x.id();
    Tensor::from_op(&[x], value, move |nodes, g, st| {
        let xv = &nodes[ix].value;
        let mut dx = g.clone();
        dx.zip_mut_with(xv, |d, &a| {
            let s = sigmoid_f64(a.f());
            *d = *d * T::of(s * (1.0 + a.f() * (1.0 - s)));
        });
        st.accumulate(ix, dx);
    })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let value = x.with(|v| v.mapv(|a| T::of(sigmoid_f64(a.f()))));
    let ix = x.id();
    Tensor::from_op(&[x], value, move |nodes, g, st| {
        let xv = &nodes[ix].value;
        let mut dx = g.clone();
        dx.zip_mut_with(xv, |d, &a| {
            let s = sigmoid_f64(a.f());
            *d = *d * T::of(s * (1.0 - s));
        });
        st.accumulate(ix, dx);
    })
}

/// Non-overlapping average pooling with a square window.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    assert!(factor >= 1);
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "avg_pool2d expects [B,C,H,W]");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(
        h % factor == 0 && w % factor == 0,
        "avg_pool2d: pool factor must divide spatial dims"
    );
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::of(1.0 / (factor * factor) as f64);
    let value = x.with(|v| {
        let xf = v.as_slice().unwrap();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xf[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += src[(oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    dst[oy * ow + ox] = acc * inv;
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).unwrap()
    });
    let ix = x.id();
    Tensor::from_op(&[x], value, move |_, g, st| {
        let gf = g.as_slice().expect("pool grad contiguous");
        let mut dx = vec![T::zero(); b * c * h * w];
        for bc in 0..b * c {
            let src = &gf[bc * oh * ow..(bc + 1) * oh * ow];
            let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = src[oy * ow + ox] * inv;
                    for dy in 0..factor {
                        for dxx in 0..factor {
                            dst[(oy * factor + dy) * w + ox * factor + dxx] += go;
                        }
                    }
                }
            }
        }
        st.accumulate(ix, ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap());
    })
}

/// Max pooling; gradient routes to the first maximum in scan order.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize, pad: usize) -> Tensor<T> {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "max_pool2d expects [B,C,H,W]");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let mut argmax = vec![0usize; b * c * oh * ow];
    let value = x.with(|v| {
        let xf = v.as_slice().unwrap();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xf[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ixx = (ox * stride + kx) as isize - pad as isize;
                            if ixx < 0 || ixx >= w as isize {
                                continue;
                            }
                            let v = src[iy as usize * w + ixx as usize];
                            if v > best {
                                best = v;
                                best_idx = iy as usize * w + ixx as usize;
                            }
                        }
                    }
                    let o = oy * ow + ox;
                    out[bc * oh * ow + o] = best;
                    argmax[bc * oh * ow + o] = bc * h * w + best_idx;
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).unwrap()
    });
    let ix = x.id();
    Tensor::from_op(&[x], value, move |_, g, st| {
        let gf = g.as_slice().expect("pool grad contiguous");
        let mut dx = vec![T::zero(); b * c * h * w];
        for (o, &src_idx) in argmax.iter().enumerate() {
            dx[src_idx] += gf[o];
        }
        st.accumulate(ix, ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap());
    })
}

/// Per-axis source indices and interpolation weights for bilinear
/// resampling with half-pixel centers.
fn lin_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5)
                .max(0.0)
                .min((n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of `[B, C, H, W]` to a new spatial size.
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "upsample_bilinear expects [B,C,H,W]");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ty = lin_table(h, out_h);
    let tx = lin_table(w, out_w);
    let value = x.with(|v| {
        let xf = v.as_slice().unwrap();
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        for bc in 0..b * c {
            let src = &xf[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * out_h * out_w..(bc + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let a = src[y0 * w + x0].f() * (1.0 - wy) * (1.0 - wx)
                        + src[y0 * w + x1].f() * (1.0 - wy) * wx
                        + src[y1 * w + x0].f() * wy * (1.0 - wx)
                        + src[y1 * w + x1].f() * wy * wx;
                    dst[oy * out_w + ox] = T::of(a);
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[b, c, out_h, out_w]), out).unwrap()
    });
    let ix = x.id();
    Tensor::from_op(&[x], value, move |_, g, st| {
        let gf = g.as_slice().expect("upsample grad contiguous");
        let mut dx = vec![T::zero(); b * c * h * w];
        for bc in 0..b * c {
            let src = &gf[bc * out_h * out_w..(bc + 1) * out_h * out_w];
            let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let go = src[oy * out_w + ox].f();
                    dst[y0 * w + x0] += T::of(go * (1.0 - wy) * (1.0 - wx));
                    dst[y0 * w + x1] += T::of(go * (1.0 - wy) * wx);
                    dst[y1 * w + x0] += T::of(go * wy * (1.0 - wx));
                    dst[y1 * w + x1] += T::of(go * wy * wx);
                }
            }
        }
        st.accumulate(ix, ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap());
    })
}

/// Group normalization over `[B, C, H, W]` with per-channel affine.
pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Tensor<T> {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "group_norm expects [B,C,H,W]");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(c % groups == 0, "group_norm: groups must divide channels");
    assert_eq!(gamma.shape(), &[c]);
    assert_eq!(beta.shape(), &[c]);
    let cg = c / groups;
    let m = cg * h * w;
    let hw = h * w;

    // group statistics are recomputed in the backward closure
    let stats = move |xf: &[T]| -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(b * groups);
        for bi in 0..b {
            for gi in 0..groups {
                let base = (bi * c + gi * cg) * hw;
                let seg = &xf[base..base + m];
                let mut sum = 0.0f64;
                for &v in seg {
                    sum += v.f();
                }
                let mean = sum / m as f64;
                let mut var = 0.0f64;
                for &v in seg {
                    let d = v.f() - mean;
                    var += d * d;
                }
                var /= m as f64;
                out.push((mean, 1.0 / (var + eps).sqrt()));
            }
        }
        out
    };

    let value = x.with(|xv| {
        gamma.with(|gv| {
            beta.with(|bv| {
                let xf = xv.as_slice().unwrap();
                let gam = gv.as_slice().unwrap();
                let bet = bv.as_slice().unwrap();
                let st = stats(xf);
                let mut out = vec![T::zero(); b * c * hw];
                for bi in 0..b {
                    for gi in 0..groups {
                        let (mean, inv) = st[bi * groups + gi];
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let base = (bi * c + ch) * hw;
                            let (ga, be) = (gam[ch].f(), bet[ch].f());
                            for i in 0..hw {
                                let xh = (xf[base + i].f() - mean) * inv;
                                out[base + i] = T::of(ga * xh + be);
                            }
                        }
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap()
            })
        })
    });

    let (ix, ig, ib2) = (x.id(), gamma.id(), beta.id());
    Tensor::from_op(&[x, gamma, beta], value, move |nodes, g, st| {
        let xf = nodes[ix].value.as_slice().unwrap();
        let gam = nodes[ig].value.as_slice().unwrap();
        let gf = g.as_slice().expect("group_norm grad contiguous");
        let stv = stats(xf);

        if st.wants(ig) || st.wants(ib2) {
            let mut dgamma = vec![0.0f64; c];
            let mut dbeta = vec![0.0f64; c];
            for bi in 0..b {
                for gi in 0..groups {
                    let (mean, inv) = stv[bi * groups + gi];
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        let base = (bi * c + ch) * hw;
                        for i in 0..hw {
                            let xh = (xf[base + i].f() - mean) * inv;
                            dgamma[ch] += gf[base + i].f() * xh;
                            dbeta[ch] += gf[base + i].f();
                        }
                    }
                }
            }
            if st.wants(ig) {
                let arr = ArrayD::from_shape_vec(
                    IxDyn(&[c]),
                    dgamma.iter().map(|&v| T::of(v)).collect(),
                )
                .unwrap();
                st.accumulate(ig, arr);
            }
            if st.wants(ib2) {
                let arr = ArrayD::from_shape_vec(
                    IxDyn(&[c]),
                    dbeta.iter().map(|&v| T::of(v)).collect(),
                )
                .unwrap();
                st.accumulate(ib2, arr);
            }
        }

        if st.wants(ix) {
            let mut dx = vec![T::zero(); b * c * hw];
            for bi in 0..b {
                for gi in 0..groups {
                    let (mean, inv) = stv[bi * groups + gi];
                    // dxh = g * gamma; s1 = sum(dxh); s2 = sum(dxh * xh)
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        let base = (bi * c + ch) * hw;
                        let ga = gam[ch].f();
                        for i in 0..hw {
                            let dxh = gf[base + i].f() * ga;
                            let xh = (xf[base + i].f() - mean) * inv;
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                    }
                    let mf = m as f64;
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        let base = (bi * c + ch) * hw;
                        let ga = gam[ch].f();
                        for i in 0..hw {
                            let dxh = gf[base + i].f() * ga;
                            let xh = (xf[base + i].f() - mean) * inv;
                            dx[base + i] = T::of(inv * (dxh - s1 / mf - xh * s2 / mf));
                        }
                    }
                }
            }
            st.accumulate(ix, ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap());
        }
    })
}

/// Pixel-mean binary cross entropy on logits against a fixed binary target.
/// Probabilities are clamped to `[eps, 1-eps]` with `eps = 1e-7`; the sum is
/// accumulated in f64 regardless of the element type.
pub fn bce_with_logits_mean<T: Scalar>(logits: &Tensor<T>, targets: ArrayD<T>) -> Tensor<T> {
    assert_eq!(logits.shape(), targets.shape(), "bce: shape mismatch");
    const EPS: f64 = 1e-7;
    let n = logits.len();
    let value = logits.with(|lv| {
        let mut acc = 0.0f64;
        for (&z, &y) in lv.iter().zip(targets.iter()) {
            let p = sigmoid_f64(z.f()).clamp(EPS, 1.0 - EPS);
            let yf = y.f();
            acc -= yf * p.ln() + (1.0 - yf) * (1.0 - p).ln();
        }
        scalar_value(T::of(acc / n as f64))
    });
    let il = logits.id();
    Tensor::from_op(&[logits], value, move |nodes, g, st| {
        let go = g.iter().next().unwrap().f();
        let lv = &nodes[il].value;
        let mut dz = ArrayD::<T>::zeros(lv.raw_dim());
        {
            let lf = lv.as_slice().unwrap();
            let tf = targets.as_slice().unwrap();
            let df = dz.as_slice_mut().unwrap();
            for i in 0..lf.len() {
                let p = sigmoid_f64(lf[i].f());
                // clamped probabilities have zero local slope
                if p > EPS && p < 1.0 - EPS {
                    df[i] = T::of(go * (p - tf[i].f()) / n as f64);
                }
            }
        }
        st.accumulate(il, dz);
    })
}
