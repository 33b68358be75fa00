//! Contextual information fusion. Each backbone level is widened with
//! three parallel atrous convolutions (rates 3, 5, 7), optionally joined
//! by upsampled context from the next-coarser level, and emits both a
//! coarse single-channel prediction and a refined feature for the rest of
//! the pipeline.

use rand_chacha::ChaCha20Rng;

use crate::error::{FdError, Result};
use crate::nn::{BoundParams, Conv2d, ConvBlock, ParamStore};
use crate::tensor::conv::ConvSpec;
use crate::tensor::ops::{concat_channels, upsample_bilinear};
use crate::tensor::{Scalar, Tensor};

/// Dilation rates of the three parallel branches.
pub const ATROUS_RATES: [usize; 3] = [3, 5, 7];

/// Everything one fusion block produces for its scale.
pub struct CifOutput<T: Scalar> {
    pub fused: Tensor<T>,
    pub coarse_logits: Tensor<T>,
    pub refined: Tensor<T>,
}

/// Fusion block for one scale. Blocks for the two finer scales expect
/// deeper context; the coarsest block runs without it.
pub struct CifBlock {
    branches: Vec<Conv2d>,
    proj: ConvBlock,
    head: Conv2d,
    refine: ConvBlock,
    expects_deeper: bool,
    width: usize,
}

impl CifBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_channels: usize,
        width: usize,
        expects_deeper: bool,
    ) -> Self {
        let branch_in = in_channels + if expects_deeper { width } else { 0 };
        let branches = ATROUS_RATES
            .iter()
            .map(|&rate| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.branch{rate}"),
                    branch_in,
                    width,
                    3,
                    ConvSpec::new(1, rate, rate),
                    false,
                )
            })
            .collect();
        let proj = ConvBlock::new(
            store,
            rng,
            &format!("{name}.proj"),
            3 * width,
            width,
            1,
            ConvSpec::unit(),
        );
        let head = Conv2d::new(
            store,
            rng,
            &format!("{name}.head"),
            width,
            1,
            1,
            ConvSpec::unit(),
            true,
        );
        let refine = ConvBlock::new(
            store,
            rng,
            &format!("{name}.refine"),
            width + 1,
            width,
            3,
            ConvSpec::new(1, 1, 1),
        );
        Self {
            branches,
            proj,
            head,
            refine,
            expects_deeper,
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Raw output of atrous branch `idx` on `x` (without the fusion
    /// projection); used to measure the branch's impulse response.
    pub fn branch_response<T: Scalar>(
        &self,
        p: &BoundParams<T>,
        x: &Tensor<T>,
        idx: usize,
    ) -> Tensor<T> {
        self.branches[idx].forward(p, x)
    }

    /// Concatenate upsampled deeper context (when this block expects it),
    /// run the three atrous branches, and project to the fusion width.
    pub fn fuse_context<T: Scalar>(
        &self,
        p: &BoundParams<T>,
        level_feature: &Tensor<T>,
        deeper_context: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let ls = level_feature.shape().to_vec();
        if ls.len() != 4 {
            return Err(FdError::Shape(format!(
                "fuse_context expects [B,C,H,W], got {ls:?}"
            )));
        }
        let (h, w) = (ls[2], ls[3]);
        let joined = match (self.expects_deeper, deeper_context) {
            (false, None) => level_feature.clone(),
            (true, Some(deeper)) => {
                let ds = deeper.shape().to_vec();
                let up = upsample_bilinear(deeper, ds[2] * 2, ds[3] * 2);
                if up.shape()[2] != h || up.shape()[3] != w {
                    return Err(FdError::Shape(format!(
                        "deeper context upsamples to {}x{}, level is {h}x{w}",
                        up.shape()[2],
                        up.shape()[3]
                    )));
                }
                concat_channels(&[level_feature, &up])
            }
            (true, None) => {
                return Err(FdError::Shape(
                    "this fusion block requires deeper context".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(FdError::Shape(
                    "the coarsest fusion block takes no deeper context".into(),
                ))
            }
        };
        let outs: Vec<Tensor<T>> = self.branches.iter().map(|b| b.forward(p, &joined)).collect();
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        Ok(self.proj.forward(p, &concat_channels(&refs)))
    }

    /// Single-channel logits from the fused feature.
    pub fn coarse_predict<T: Scalar>(&self, p: &BoundParams<T>, fused: &Tensor<T>) -> Tensor<T> {
        self.head.forward(p, fused)
    }

    /// Concatenate the coarse map back onto the fused feature and project
    /// to the fusion width.
    pub fn refine_concat<T: Scalar>(
        &self,
        p: &BoundParams<T>,
        fused: &Tensor<T>,
        coarse_logits: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let fs = fused.shape();
        let cs = coarse_logits.shape();
        if fs[2] != cs[2] || fs[3] != cs[3] {
            return Err(FdError::Shape(format!(
                "fused {}x{} and coarse {}x{} sizes differ",
                fs[2], fs[3], cs[2], cs[3]
            )));
        }
        Ok(self
            .refine
            .forward(p, &concat_channels(&[fused, coarse_logits])))
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &BoundParams<T>,
        level_feature: &Tensor<T>,
        deeper_context: Option<&Tensor<T>>,
    ) -> Result<CifOutput<T>> {
        let fused = self.fuse_context(p, level_feature, deeper_context)?;
        let coarse_logits = self.coarse_predict(p, &fused);
        let refined = self.refine_concat(p, &fused, &coarse_logits)?;
        Ok(CifOutput {
            fused,
            coarse_logits,
            refined,
        })
    }
}
