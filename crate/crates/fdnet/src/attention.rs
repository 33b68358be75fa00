//! Parameter-free channel attention. Channel descriptors pooled from the
//! feature map act as keys and queries, their similarity matrix is row
//! softmax-normalized, and the result reweights the unpooled channels with
//! a residual connection back onto the input. No learned weights anywhere.

use crate::error::{FdError, Result};
use crate::tensor::ops::{add, avg_pool2d, bmm, reshape, softmax_last, transpose12};
use crate::tensor::{Scalar, Tensor};

/// Keys and queries pooled to `[B, C, s]`, values left at `[B, C, H*W]`.
pub struct QkvBundle<T: Scalar> {
    pub k: Tensor<T>,
    pub q: Tensor<T>,
    pub v: Tensor<T>,
}

/// Row-stochastic channel affinity matrix `[B, C, C]`.
pub struct AttentionMap<T: Scalar> {
    pub m: Tensor<T>,
}

/// Pool factor the model actually uses: the configured one when it divides
/// both spatial dims, otherwise 1 so small maps go through unpooled.
pub fn effective_pool_factor(h: usize, w: usize, configured: usize) -> usize {
    if configured > 1 && h % configured == 0 && w % configured == 0 {
        configured
    } else {
        1
    }
}

/// Split a `[B, C, H, W]` feature map into keys, queries and values. Keys
/// and queries are flattened from the average-pooled map, values from the
/// unpooled one.
pub fn build_qkv<T: Scalar>(x: &Tensor<T>, pool_factor: usize) -> Result<QkvBundle<T>> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(FdError::Shape(format!(
            "build_qkv expects [B,C,H,W], got {s:?}"
        )));
    }
    if pool_factor == 0 {
        return Err(FdError::Shape("pool_factor must be at least 1".into()));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % pool_factor != 0 || w % pool_factor != 0 {
        return Err(FdError::Shape(format!(
            "pool_factor {pool_factor} does not divide feature size {h}x{w}"
        )));
    }
    let pooled = if pool_factor > 1 {
        avg_pool2d(x, pool_factor)
    } else {
        x.clone()
    };
    let s_len = (h / pool_factor) * (w / pool_factor);
    let kq = reshape(&pooled, &[b, c, s_len]);
    Ok(QkvBundle {
        k: kq.clone(),
        q: kq,
        v: reshape(x, &[b, c, h * w]),
    })
}

/// Row softmax of the key/query similarity `K Q^T`, with per-row max
/// subtraction for overflow safety.
pub fn channel_attention<T: Scalar>(k: &Tensor<T>, q: &Tensor<T>) -> Result<AttentionMap<T>> {
    let finite = k.with(|kv| kv.iter().all(|v| v.f().is_finite()))
        && q.with(|qv| qv.iter().all(|v| v.f().is_finite()));
    if !finite {
        return Err(FdError::Numerics(
            "channel_attention received non-finite descriptors".into(),
        ));
    }
    let scores = bmm(k, &transpose12(q));
    Ok(AttentionMap {
        m: softmax_last(&scores),
    })
}

/// Reweight values by the attention map and add the residual back on.
pub fn apply_attention<T: Scalar>(
    map: &AttentionMap<T>,
    v: &Tensor<T>,
    residual: &Tensor<T>,
) -> Result<Tensor<T>> {
    let rs = residual.shape().to_vec();
    let ms = map.m.shape().to_vec();
    let vs = v.shape().to_vec();
    if rs.len() != 4 || ms.len() != 3 || vs.len() != 3 {
        return Err(FdError::Shape(format!(
            "apply_attention ranks: map {ms:?}, v {vs:?}, residual {rs:?}"
        )));
    }
    let (b, c, h, w) = (rs[0], rs[1], rs[2], rs[3]);
    if ms != [b, c, c] || vs != [b, c, h * w] {
        return Err(FdError::Shape(format!(
            "apply_attention shapes: map {ms:?}, v {vs:?} against residual {rs:?}"
        )));
    }
    let mixed = bmm(&map.m, v);
    Ok(add(&reshape(&mixed, &rs), residual))
}

/// The full block: qkv split, channel affinity, reweight, residual.
pub fn attention_block<T: Scalar>(x: &Tensor<T>, pool_factor: usize) -> Result<Tensor<T>> {
    let qkv = build_qkv(x, pool_factor)?;
    let map = channel_attention(&qkv.k, &qkv.q)?;
    apply_attention(&map, &qkv.v, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{gradcheck, max_rel_err};
    use crate::tensor::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn attention_rows_are_stochastic_and_positive() {
        for seed in 0..100u64 {
            let scale = 10f64.powi((seed % 7) as i32 - 3);
            let x0 = randn(&[1, 5, 4, 4], seed).mapv(|v| v * scale);
            let tape = Tape::<f64>::inference();
            let x = tape.leaf(x0, false);
            let qkv = build_qkv(&x, 2).unwrap();
            let m = channel_attention(&qkv.k, &qkv.q).unwrap().m.value();
            for row in m.as_slice().unwrap().chunks(5) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum} at seed {seed}");
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                // moderate scales keep every entry strictly interior
                if scale <= 1.0 {
                    assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
                }
            }
        }
    }

    #[test]
    fn identity_descriptors_give_known_map() {
        // K = Q = I gives scores = I, whose row softmax is
        // e/(1+e) on the diagonal and 1/(1+e) off it
        let x0 =
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 2]), vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(x0, false);
        let qkv = build_qkv(&x, 1).unwrap();
        let m = channel_attention(&qkv.k, &qkv.q).unwrap().m.value();
        let e = std::f64::consts::E;
        let hi = e / (1.0 + e);
        let lo = 1.0 / (1.0 + e);
        assert!((m[[0, 0, 0]] - hi).abs() < 1e-12);
        assert!((m[[0, 0, 1]] - lo).abs() < 1e-12);
        assert!((m[[0, 1, 0]] - lo).abs() < 1e-12);
        assert!((m[[0, 1, 1]] - hi).abs() < 1e-12);
        assert!((hi - 0.731_058_578_630_005).abs() < 1e-12);
    }

    #[test]
    fn identical_channels_give_uniform_rows() {
        let one = randn(&[1, 1, 3, 3], 1);
        let mut x0 = ArrayD::<f64>::zeros(IxDyn(&[1, 4, 3, 3]));
        for c in 0..4 {
            for y in 0..3 {
                for xx in 0..3 {
                    x0[[0, c, y, xx]] = one[[0, 0, y, xx]];
                }
            }
        }
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(x0, false);
        let qkv = build_qkv(&x, 1).unwrap();
        let m = channel_attention(&qkv.k, &qkv.q).unwrap().m.value();
        for v in m.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn qkv_shapes_and_pool_errors() {
        let x0 = randn(&[1, 2, 4, 4], 2);
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(x0.clone(), false);
        let qkv = build_qkv(&x, 2).unwrap();
        assert_eq!(qkv.q.shape(), &[1, 2, 4]);
        assert_eq!(qkv.k.shape(), &[1, 2, 4]);
        assert_eq!(qkv.v.shape(), &[1, 2, 16]);

        // factor 1 leaves q, k and v as the same flattening
        let qkv1 = build_qkv(&x, 1).unwrap();
        assert_eq!(qkv1.q.value(), qkv1.v.value());

        // constant channels pool to the constants
        let mut xc = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 4, 4]));
        for y in 0..4 {
            for xx in 0..4 {
                xc[[0, 0, y, xx]] = 2.5;
                xc[[0, 1, y, xx]] = -1.0;
            }
        }
        let xt = tape.leaf(xc, false);
        let q = build_qkv(&xt, 2).unwrap().q.value();
        assert!(q.as_slice().unwrap()[..4].iter().all(|&v| v == 2.5));
        assert!(q.as_slice().unwrap()[4..].iter().all(|&v| v == -1.0));

        let bad = build_qkv(&x, 3);
        assert!(matches!(bad, Err(FdError::Shape(_))));
        assert!(matches!(build_qkv(&x, 0), Err(FdError::Shape(_))));
    }

    #[test]
    fn non_finite_descriptors_are_refused() {
        let mut x0 = randn(&[1, 2, 2, 2], 3);
        x0[[0, 1, 0, 1]] = f64::NAN;
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(x0, false);
        let qkv = build_qkv(&x, 1).unwrap();
        let err = match channel_attention(&qkv.k, &qkv.q) {
            Err(e) => e,
            Ok(_) => panic!("non-finite descriptors were accepted"),
        };
        assert!(matches!(err, FdError::Numerics(_)));
    }

    #[test]
    fn injected_identity_map_doubles_features() {
        let x0 = randn(&[1, 3, 2, 2], 4);
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(x0.clone(), false);
        let mut ident = ArrayD::<f64>::zeros(IxDyn(&[1, 3, 3]));
        for i in 0..3 {
            ident[[0, i, i]] = 1.0;
        }
        let map = AttentionMap {
            m: tape.leaf(ident, false),
        };
        let v = reshape(&x, &[1, 3, 4]);
        let y = apply_attention(&map, &v, &x).unwrap().value();
        let expect = x0.mapv(|v| 2.0 * v);
        assert!(max_rel_err(&y, &expect) < 1e-12);

        // zero values leave only the residual
        let vz = tape.leaf(ArrayD::zeros(IxDyn(&[1, 3, 4])), false);
        let y = apply_attention(&map, &vz, &x).unwrap().value();
        assert!(max_rel_err(&y, &x0) < 1e-12);

        // mismatched value length is refused
        let vbad = tape.leaf(ArrayD::zeros(IxDyn(&[1, 3, 5])), false);
        assert!(matches!(
            apply_attention(&map, &vbad, &x),
            Err(FdError::Shape(_))
        ));
    }

    /// Plain-loop reference for the whole block, no pooling.
    fn attention_reference(x: &ArrayD<f64>) -> ArrayD<f64> {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let l = h * w;
        let xf = x.as_slice().unwrap();
        let mut out = vec![0.0f64; b * c * l];
        for bi in 0..b {
            let feat = &xf[bi * c * l..(bi + 1) * c * l];
            let mut scores = vec![0.0f64; c * c];
            for i in 0..c {
                for j in 0..c {
                    let mut acc = 0.0;
                    for t in 0..l {
                        acc += feat[i * l + t] * feat[j * l + t];
                    }
                    scores[i * c + j] = acc;
                }
            }
            for i in 0..c {
                let row = &mut scores[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            for i in 0..c {
                for t in 0..l {
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += scores[i * c + j] * feat[j * l + t];
                    }
                    out[bi * c * l + i * l + t] = acc + feat[i * l + t];
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap()
    }

    #[test]
    fn block_matches_loop_reference() {
        let x0 = randn(&[2, 4, 3, 5], 5);
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(x0.clone(), false);
        let y = attention_block(&x, 1).unwrap().value();
        let expect = attention_reference(&x0);
        assert!(max_rel_err(&y, &expect) < 1e-6);
    }

    #[test]
    fn linear_in_values_for_fixed_map() {
        let x0 = randn(&[1, 3, 2, 3], 6);
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(x0, false);
        let qkv = build_qkv(&x, 1).unwrap();
        let map = channel_attention(&qkv.k, &qkv.q).unwrap();
        let zero_res = tape.leaf(ArrayD::zeros(IxDyn(&[1, 3, 2, 3])), false);
        let v1 = tape.leaf(randn(&[1, 3, 6], 7), false);
        let v2 = tape.leaf(randn(&[1, 3, 6], 8), false);
        let y1 = apply_attention(&map, &v1, &zero_res).unwrap().value();
        let y2 = apply_attention(&map, &v2, &zero_res).unwrap().value();
        let vsum = tape.leaf(
            v1.value()
                .iter()
                .zip(v2.value().iter())
                .map(|(a, b)| 2.0 * a + 0.5 * b)
                .collect::<Vec<_>>()
                .into_iter()
                .collect::<ndarray::Array1<f64>>()
                .into_shape_with_order(IxDyn(&[1, 3, 6]))
                .unwrap(),
            false,
        );
        let ysum = apply_attention(&map, &vsum, &zero_res).unwrap().value();
        let expect = y1.mapv(|v| 2.0 * v) + y2.mapv(|v| 0.5 * v);
        assert!(max_rel_err(&ysum, &expect) < 1e-9);
    }

    #[test]
    fn channel_means_mix_convexly_without_residual() {
        let x0 = randn(&[1, 4, 4, 4], 9);
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(x0.clone(), false);
        let qkv = build_qkv(&x, 1).unwrap();
        let map = channel_attention(&qkv.k, &qkv.q).unwrap();
        let zero_res = tape.leaf(ArrayD::zeros(IxDyn(&[1, 4, 4, 4])), false);
        let y = apply_attention(&map, &qkv.v, &zero_res).unwrap().value();
        let m = map.m.value();
        let mean = |arr: &ArrayD<f64>, c: usize| -> f64 {
            let mut acc = 0.0;
            for yy in 0..4 {
                for xx in 0..4 {
                    acc += arr[[0, c, yy, xx]];
                }
            }
            acc / 16.0
        };
        for i in 0..4 {
            let expect: f64 = (0..4).map(|j| m[[0, i, j]] * mean(&x0, j)).sum();
            assert!((mean(&y, i) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn repeated_invocations_are_bit_identical() {
        let x0 = randn(&[1, 3, 4, 4], 10);
        let run = || {
            let tape = Tape::<f64>::inference();
            let x = tape.leaf(x0.clone(), false);
            attention_block(&x, 2).unwrap().value()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn pool_factor_fallback_helper() {
        assert_eq!(effective_pool_factor(8, 8, 2), 2);
        assert_eq!(effective_pool_factor(7, 8, 2), 1);
        assert_eq!(effective_pool_factor(8, 6, 4), 1);
        assert_eq!(effective_pool_factor(4, 4, 1), 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::tensor::ops::weighted_sum;
        let x0 = randn(&[1, 3, 4, 4], 11);
        let probe = randn(&[1, 3, 4, 4], 12);
        gradcheck(
            |_t, x| weighted_sum(&attention_block(x, 2).unwrap(), probe.clone()),
            &x0,
            1e-5,
            1e-6,
        );
    }
}
