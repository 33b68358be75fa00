//! Frequency-domain interference removal. Feature maps are taken to the
//! frequency plane channel by channel, low-frequency bins inside a radial
//! cutoff are zeroed, and the result is brought back to the spatial domain.
//!
//! The ideal binary mask is real and symmetric under frequency negation,
//! which makes the whole transform self-adjoint; the backward pass is the
//! same filter applied to the incoming gradient.

use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{FdError, Result};
use crate::tensor::{Scalar, Tensor};

/// Filter families; only the ideal (hard 0/1) mask exists today.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Ideal,
}

/// Radial high-pass description for one spatial size. `cutoff` is the cut
/// radius as a fraction of the Nyquist corner radius: 0 removes only the
/// DC bin, 1 removes every bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HighPassFilterSpec {
    pub cutoff: f64,
    pub shape: (usize, usize),
    pub mode: FilterMode,
}

impl HighPassFilterSpec {
    pub fn ideal(cutoff: f64, shape: (usize, usize)) -> Self {
        Self {
            cutoff,
            shape,
            mode: FilterMode::Ideal,
        }
    }
}

/// Per-channel frequency representation of a `[B, C, H, W]` batch in
/// unnormalized DFT convention, DC at index (0, 0).
pub struct Spectrum<T: Scalar> {
    pub bins: ArrayD<Complex<T>>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn shape(&self) -> &[usize] {
        self.bins.shape()
    }
}

/// Signed frequency index for bin `u` of an axis of length `n`.
fn signed_freq(u: usize, n: usize) -> isize {
    if u as isize <= n as isize / 2 {
        u as isize
    } else {
        u as isize - n as isize
    }
}

/// Binary high-pass mask over the spec's frequency grid. A bin survives
/// when its radial distance exceeds `cutoff` times the corner Nyquist
/// radius `sqrt((H/2)^2 + (W/2)^2)`; DC never survives.
pub fn build_highpass(spec: &HighPassFilterSpec) -> Result<Array2<f64>> {
    let (h, w) = spec.shape;
    if h == 0 || w == 0 {
        return Err(FdError::Config(format!(
            "filter shape must be nonzero, got {h}x{w}"
        )));
    }
    if !(0.0..=1.0).contains(&spec.cutoff) || !spec.cutoff.is_finite() {
        return Err(FdError::Config(format!(
            "cutoff must lie in [0, 1], got {}",
            spec.cutoff
        )));
    }
    let r_max = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
    let cut = spec.cutoff * r_max;
    Ok(Array2::from_shape_fn((h, w), |(u, v)| {
        let su = signed_freq(u, h) as f64;
        let sv = signed_freq(v, w) as f64;
        if (su * su + sv * sv).sqrt() > cut {
            1.0
        } else {
            0.0
        }
    }))
}

fn fft2d_planes<T: Scalar>(
    data: &mut [Complex<T>],
    planes: usize,
    h: usize,
    w: usize,
    row: &Arc<dyn Fft<T>>,
    col: &Arc<dyn Fft<T>>,
) {
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); h];
    for p in 0..planes {
        let plane = &mut data[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            row.process(&mut plane[r * w..(r + 1) * w]);
        }
        for c in 0..w {
            for r in 0..h {
                scratch[r] = plane[r * w + c];
            }
            col.process(&mut scratch);
            for r in 0..h {
                plane[r * w + c] = scratch[r];
            }
        }
    }
}

/// Unnormalized forward 2D DFT of each `[H, W]` plane.
pub fn forward_dft<T: Scalar>(x: &ArrayD<T>) -> Result<Spectrum<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(FdError::Shape(format!(
            "forward_dft expects [B,C,H,W], got {s:?}"
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let xf = x.as_slice().expect("forward_dft: contiguous input");
    if !xf.iter().all(|v| v.f().is_finite()) {
        return Err(FdError::Numerics(
            "forward_dft received non-finite values".into(),
        ));
    }
    let mut data: Vec<Complex<T>> = xf.iter().map(|&v| Complex::new(v, T::zero())).collect();
    let mut planner = FftPlanner::<T>::new();
    let row = planner.plan_fft_forward(w);
    let col = planner.plan_fft_forward(h);
    fft2d_planes(&mut data, b * c, h, w, &row, &col);
    Ok(Spectrum {
        bins: ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), data).unwrap(),
    })
}

/// Masked inverse transform without the residue check; returns the real
/// part together with the largest |imaginary| and |real| values seen.
fn invert_masked<T: Scalar>(
    bins: &ArrayD<Complex<T>>,
    mask: &Array2<f64>,
) -> (ArrayD<T>, f64, f64) {
    let s = bins.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mf = mask.as_slice().unwrap();
    let src = bins.as_slice().expect("spectrum contiguous");
    let mut data: Vec<Complex<T>> = Vec::with_capacity(src.len());
    for p in 0..b * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for i in 0..h * w {
            let m = T::of(mf[i]);
            data.push(Complex::new(plane[i].re * m, plane[i].im * m));
        }
    }
    let mut planner = FftPlanner::<T>::new();
    let row = planner.plan_fft_inverse(w);
    let col = planner.plan_fft_inverse(h);
    fft2d_planes(&mut data, b * c, h, w, &row, &col);
    let norm = 1.0 / (h * w) as f64;
    let mut max_im = 0.0f64;
    let mut max_re = 0.0f64;
    let real: Vec<T> = data
        .iter()
        .map(|z| {
            let re = z.re.f() * norm;
            let im = z.im.f() * norm;
            max_im = max_im.max(im.abs());
            max_re = max_re.max(re.abs());
            T::of(re)
        })
        .collect();
    (
        ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), real).unwrap(),
        max_im,
        max_re,
    )
}

/// Apply a frequency mask and return to the spatial domain. Fails if the
/// imaginary residue exceeds `1e-5` relative to the output magnitude
/// (floored at 1), which would mean the mask broke conjugate symmetry.
pub fn filter_and_invert<T: Scalar>(
    spectrum: &Spectrum<T>,
    mask: &Array2<f64>,
) -> Result<ArrayD<T>> {
    let s = spectrum.bins.shape();
    if s.len() != 4 || mask.dim() != (s[2], s[3]) {
        return Err(FdError::Shape(format!(
            "mask {:?} does not fit spectrum {s:?}",
            mask.dim()
        )));
    }
    let (real, max_im, max_re) = invert_masked(&spectrum.bins, mask);
    let bound = 1e-5 * max_re.max(1.0);
    if max_im > bound {
        return Err(FdError::Numerics(format!(
            "imaginary residue {max_im:.3e} exceeds bound {bound:.3e} after inverse transform"
        )));
    }
    Ok(real)
}

/// Differentiable high-pass filtering of a `[B, C, H, W]` tensor. The
/// mask must be symmetric under frequency negation; since it is also
/// real, the operator equals its own adjoint and the backward pass
/// reuses it unchanged.
pub fn spectral_filter<T: Scalar>(x: &Tensor<T>, mask: &Array2<f64>) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if shape.len() != 4 {
        return Err(FdError::Shape(format!(
            "spectral_filter expects [B,C,H,W], got {shape:?}"
        )));
    }
    let mask = Arc::new(mask.clone());
    let value = {
        let xv = x.value();
        let spec = forward_dft(&xv)?;
        filter_and_invert(&spec, &mask)?
    };
    let ix = x.id();
    let bwd_mask = Arc::clone(&mask);
    Ok(Tensor::from_op(&[x], value, move |_, g, st| {
        let spec = forward_dft(g).expect("gradient of a finite loss is finite");
        let (dx, _, _) = invert_masked(&spec.bins, &bwd_mask);
        st.accumulate(ix, dx);
    }))
}
