//! The full segmentation network: backbone pyramid, top-down context
//! fusion, attention and spectral filtering on each scale, and per-scale
//! prediction heads.
//!
//! Every stage after the backbone can be toggled off independently,
//! which is what the ablation harness drives. Attention and the
//! spectral filter carry no parameters, so toggling them changes the
//! computation but never the parameter set.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::attention;
use crate::backbone::{Backbone, BackboneKind, Pyramid};
use crate::cif::CifBlock;
use crate::error::{FdError, Result};
use crate::ftb::{build_highpass, spectral_filter, HighPassFilterSpec};
use crate::nn::{BoundParams, Conv2d, ConvBlock, ParamStore};
use crate::tensor::conv::ConvSpec;
use crate::tensor::ops::{concat_channels, sigmoid_f64, upsample_bilinear};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Channel width of the fused per-scale features.
    pub cif_width: usize,
    /// Spatial pooling applied to attention descriptors; falls back to 1
    /// on feature maps it does not divide.
    pub pool_factor: usize,
    /// High-pass cutoff as a fraction of the corner frequency radius.
    pub cutoff: f64,
    pub enable_cif: bool,
    pub enable_ab: bool,
    pub enable_ftb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Resnet50Like,
            cif_width: 64,
            pool_factor: 2,
            cutoff: 0.1,
            enable_cif: true,
            enable_ab: true,
            enable_ftb: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cif_width == 0 {
            return Err(FdError::Config("cif_width must be positive".into()));
        }
        if self.pool_factor == 0 {
            return Err(FdError::Config("pool_factor must be positive".into()));
        }
        if !self.cutoff.is_finite() || !(0.0..=1.0).contains(&self.cutoff) {
            return Err(FdError::Config(format!(
                "cutoff must lie in [0,1], got {}",
                self.cutoff
            )));
        }
        Ok(())
    }

    pub fn with_toggles(mut self, cif: bool, ab: bool, ftb: bool) -> Self {
        self.enable_cif = cif;
        self.enable_ab = ab;
        self.enable_ftb = ftb;
        self
    }
}

/// Per-scale context stage: either the full fusion block or, with
/// fusion disabled, a plain 1x1 projection with its own coarse head and
/// no top-down pathway.
enum ScaleStage {
    Fused(CifBlock),
    Plain { proj: ConvBlock, head: Conv2d },
}

impl ScaleStage {
    /// Returns (refined features, coarse logits, context for the next
    /// shallower scale).
    fn forward<T: Scalar>(
        &self,
        p: &BoundParams<T>,
        level: &Tensor<T>,
        deeper: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
        match self {
            ScaleStage::Fused(cif) => {
                let out = cif.forward(p, level, deeper)?;
                let ctx = out.refined.clone();
                Ok((out.refined, out.coarse_logits, Some(ctx)))
            }
            ScaleStage::Plain { proj, head } => {
                let refined = proj.forward(p, level);
                let coarse = head.forward(p, &refined);
                Ok((refined, coarse, None))
            }
        }
    }
}

/// All six logit maps of one forward pass, bilinearly upsampled to the
/// input size. Index 0/1/2 corresponds to strides 8/16/32.
pub struct PredictionSet<T: Scalar> {
    pub coarse: Vec<Tensor<T>>,
    pub finals: Vec<Tensor<T>>,
    pub input_size: (usize, usize),
}

impl<T: Scalar> PredictionSet<T> {
    /// Coarse maps first (shallow to deep), then final maps.
    pub fn logit_maps(&self) -> Vec<&Tensor<T>> {
        self.coarse.iter().chain(self.finals.iter()).collect()
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ModelDescription {
    pub enable_cif: bool,
    pub enable_ab: bool,
    pub enable_ftb: bool,
    pub params_by_component: std::collections::BTreeMap<String, usize>,
    pub total_params: usize,
}

pub struct FdNet {
    pub config: ModelConfig,
    backbone: Backbone,
    stages: [ScaleStage; 3],
    final_heads: [Conv2d; 3],
}

impl FdNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        config: &ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, rng, config.backbone, 3);
        let chans = config.backbone.out_channels();
        let w = config.cif_width;
        let mut stages = Vec::with_capacity(3);
        for (idx, &c_in) in [chans.0, chans.1, chans.2].iter().enumerate() {
            let scale = idx + 3;
            let stage = if config.enable_cif {
                // only the deepest scale lacks top-down context
                let expects_deeper = scale != 5;
                ScaleStage::Fused(CifBlock::new(
                    store,
                    rng,
                    &format!("cif{scale}"),
                    c_in,
                    w,
                    expects_deeper,
                ))
            } else {
                ScaleStage::Plain {
                    proj: ConvBlock::new(
                        store,
                        rng,
                        &format!("plain{scale}.proj"),
                        c_in,
                        w,
                        1,
                        ConvSpec::unit(),
                    ),
                    head: Conv2d::new(
                        store,
                        rng,
                        &format!("plain{scale}.head"),
                        w,
                        1,
                        1,
                        ConvSpec::unit(),
                        true,
                    ),
                }
            };
            stages.push(stage);
        }
        let stages: [ScaleStage; 3] = match stages.try_into() {
            Ok(s) => s,
            Err(_) => unreachable!(),
        };
        let final_heads = [3usize, 4, 5].map(|scale| {
            Conv2d::new(
                store,
                rng,
                &format!("final{scale}"),
                w,
                1,
                1,
                ConvSpec::unit(),
                true,
            )
        });
        Ok(Self {
            config: config.clone(),
            backbone,
            stages,
            final_heads,
        })
    }

    /// Attention, spectral filtering and attention again, each stage
    /// subject to its toggle.
    fn enhance<T: Scalar>(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut t = x;
        let dims = t.value().shape().to_vec();
        let (h, w) = (dims[2], dims[3]);
        let pf = attention::effective_pool_factor(h, w, self.config.pool_factor);
        if self.config.enable_ab {
            t = attention::attention_block(&t, pf)?;
        }
        if self.config.enable_ftb {
            let spec = HighPassFilterSpec::ideal(self.config.cutoff, (h, w));
            let mask = build_highpass(&spec)?;
            t = spectral_filter(&t, &mask)?;
        }
        if self.config.enable_ab {
            t = attention::attention_block(&t, pf)?;
        }
        Ok(t)
    }

    pub fn forward<T: Scalar>(&self, p: &BoundParams<T>, x: &Tensor<T>) -> Result<PredictionSet<T>> {
        let dims = x.value().shape().to_vec();
        if dims.len() != 4 {
            return Err(FdError::Shape(format!(
                "model input must be [batch, channels, height, width], got {dims:?}"
            )));
        }
        let (c, h, w) = (dims[1], dims[2], dims[3]);
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(FdError::Shape(format!(
                "input size {h}x{w} must be a positive multiple of 32"
            )));
        }
        let x3 = match c {
            3 => x.clone(),
            1 => concat_channels(&[x, x, x]),
            _ => {
                return Err(FdError::Shape(format!(
                    "expected 1 or 3 input channels, got {c}"
                )))
            }
        };
        let Pyramid { f3, f4, f5 } = self.backbone.forward(p, &x3);

        // deepest first, passing refined context down when fusion is on
        let (r5, c5, ctx5) = self.stages[2].forward(p, &f5, None)?;
        let (r4, c4, ctx4) = self.stages[1].forward(p, &f4, ctx5.as_ref())?;
        let (r3, c3, _) = self.stages[0].forward(p, &f3, ctx4.as_ref())?;

        let mut finals = Vec::with_capacity(3);
        for (i, refined) in [r3, r4, r5].into_iter().enumerate() {
            let enhanced = self.enhance(refined)?;
            finals.push(self.final_heads[i].forward(p, &enhanced));
        }

        let coarse: Vec<_> = [&c3, &c4, &c5]
            .iter()
            .map(|t| upsample_bilinear(t, h, w))
            .collect();
        let finals: Vec<_> = finals.iter().map(|t| upsample_bilinear(t, h, w)).collect();
        for (kind, maps) in [("coarse", &coarse), ("final", &finals)] {
            for (i, m) in maps.iter().enumerate() {
                if !m.value().iter().all(|v| v.f().is_finite()) {
                    return Err(FdError::Numerics(format!(
                        "non-finite values in {kind} logits at stride {}",
                        8 << i
                    )));
                }
            }
        }
        Ok(PredictionSet {
            coarse,
            finals,
            input_size: (h, w),
        })
    }

    /// Threshold the finest final map's probabilities into a binary
    /// mask. Uses a strict comparison, so a threshold equal to a pixel's
    /// probability excludes that pixel.
    pub fn predict_mask<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Array2<f32>,
        threshold: f64,
    ) -> Result<Array2<f32>> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(FdError::Validation(format!(
                "threshold must lie strictly inside (0,1), got {threshold}"
            )));
        }
        let (h, w) = image.dim();
        let tape = Tape::inference();
        let data: Vec<T> = image.iter().map(|&v| T::of(v as f64)).collect();
        let x = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 1, h, w]), data).unwrap(), false);
        let p = store.bind(&tape, false);
        let preds = self.forward(&p, &x)?;
        let logits = preds.finals[0].value();
        let mut mask = Array2::zeros((h, w));
        for ((y, x), m) in mask.indexed_iter_mut() {
            let prob = sigmoid_f64(logits[[0, 0, y, x]].f());
            *m = if prob > threshold { 1.0 } else { 0.0 };
        }
        Ok(mask)
    }

    /// Parameter counts per component plus the active toggles, for
    /// ablation reports.
    pub fn describe<T: Scalar>(&self, store: &ParamStore<T>) -> ModelDescription {
        let mut by = std::collections::BTreeMap::new();
        by.insert("backbone".to_string(), store.num_scalars_under("backbone"));
        let fusion: usize = [3, 4, 5]
            .iter()
            .map(|k| {
                store.num_scalars_under(&format!("cif{k}"))
                    + store.num_scalars_under(&format!("plain{k}"))
            })
            .sum();
        by.insert("context_fusion".to_string(), fusion);
        by.insert("attention".to_string(), 0);
        by.insert("frequency_filter".to_string(), 0);
        let heads: usize = [3, 4, 5]
            .iter()
            .map(|k| store.num_scalars_under(&format!("final{k}")))
            .sum();
        by.insert("heads".to_string(), heads);
        ModelDescription {
            enable_cif: self.config.enable_cif,
            enable_ab: self.config.enable_ab,
            enable_ftb: self.config.enable_ftb,
            params_by_component: by,
            total_params: store.num_scalars(),
        }
    }
}

/// Build a freshly initialized model and its parameter store from a
/// seed.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(ParamStore<T>, FdNet)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let net = FdNet::new(&mut store, &mut rng, config)?;
    Ok((store, net))
}
