//! Residual feature extractor. Emits three feature scales at strides
//! 8, 16 and 32 of the input. Two configurations: the full one with
//! (512, 1024, 2048) output channels built from bottleneck blocks, and a
//! narrow basic-block one for anything that has to run in seconds.

use std::path::Path;

use rand_chacha::ChaCha20Rng;

use crate::error::{FdError, Result};
use crate::nn::{read_array_map, BoundParams, Conv2d, ConvBlock, GroupNorm, ParamStore};
use crate::tensor::conv::ConvSpec;
use crate::tensor::ops::{add, max_pool2d, silu};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Bottleneck stages sized like ResNet-50: stage outputs
    /// 256/512/1024/2048 channels, depths 3/4/6/3.
    Resnet50Like,
    /// Basic-block stages with 16/32/64/128 channels, one block each.
    Tiny,
}

impl BackboneKind {
    /// Channels of the three emitted scales, shallowest first.
    pub fn out_channels(&self) -> (usize, usize, usize) {
        match self {
            BackboneKind::Resnet50Like => (512, 1024, 2048),
            BackboneKind::Tiny => (32, 64, 128),
        }
    }

    fn stage_channels(&self) -> [usize; 4] {
        match self {
            BackboneKind::Resnet50Like => [256, 512, 1024, 2048],
            BackboneKind::Tiny => [16, 32, 64, 128],
        }
    }

    fn stage_depths(&self) -> [usize; 4] {
        match self {
            BackboneKind::Resnet50Like => [3, 4, 6, 3],
            BackboneKind::Tiny => [1, 1, 1, 1],
        }
    }

    fn stem_channels(&self) -> usize {
        match self {
            BackboneKind::Resnet50Like => 64,
            BackboneKind::Tiny => 16,
        }
    }

    fn bottleneck(&self) -> bool {
        matches!(self, BackboneKind::Resnet50Like)
    }
}

/// The three feature scales, at strides 8, 16 and 32.
pub struct Pyramid<T: Scalar> {
    pub f3: Tensor<T>,
    pub f4: Tensor<T>,
    pub f5: Tensor<T>,
}

/// One residual block; bottleneck (1x1 down, 3x3, 1x1 up) or basic
/// (two 3x3), with a projection shortcut where shape changes.
struct ResBlock {
    path: Vec<ConvBlock>,
    tail_conv: Conv2d,
    tail_norm: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        bottleneck: bool,
    ) -> Self {
        let mut path = Vec::new();
        let (tail_in, tail_k, tail_spec) = if bottleneck {
            let mid = out_ch / 4;
            path.push(ConvBlock::new(
                store,
                rng,
                &format!("{name}.reduce"),
                in_ch,
                mid,
                1,
                ConvSpec::unit(),
            ));
            path.push(ConvBlock::new(
                store,
                rng,
                &format!("{name}.spatial"),
                mid,
                mid,
                3,
                ConvSpec::new(stride, 1, 1),
            ));
            (mid, 1, ConvSpec::unit())
        } else {
            path.push(ConvBlock::new(
                store,
                rng,
                &format!("{name}.spatial"),
                in_ch,
                out_ch,
                3,
                ConvSpec::new(stride, 1, 1),
            ));
            (out_ch, 3, ConvSpec::new(1, 1, 1))
        };
        let tail_conv = Conv2d::new(
            store,
            rng,
            &format!("{name}.expand.conv"),
            tail_in,
            out_ch,
            tail_k,
            tail_spec,
            false,
        );
        let tail_norm = GroupNorm::new(store, &format!("{name}.expand.norm"), out_ch);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            let conv = Conv2d::new(
                store,
                rng,
                &format!("{name}.shortcut.conv"),
                in_ch,
                out_ch,
                1,
                ConvSpec::new(stride, 0, 1),
                false,
            );
            let norm = GroupNorm::new(store, &format!("{name}.shortcut.norm"), out_ch);
            (conv, norm)
        });
        Self {
            path,
            tail_conv,
            tail_norm,
            shortcut,
        }
    }

    fn forward<T: Scalar>(&self, p: &BoundParams<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for block in &self.path {
            h = block.forward(p, &h);
        }
        let h = self.tail_norm.forward(p, &self.tail_conv.forward(p, &h));
        let sc = match &self.shortcut {
            Some((conv, norm)) => norm.forward(p, &conv.forward(p, x)),
            None => x.clone(),
        };
        silu(&add(&h, &sc))
    }
}

struct Stage {
    blocks: Vec<ResBlock>,
}

pub struct Backbone {
    kind: BackboneKind,
    stem: ConvBlock,
    stages: Vec<Stage>,
}

impl Backbone {
    /// Build and register all parameters under the `backbone.` prefix.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        kind: BackboneKind,
        in_channels: usize,
    ) -> Self {
        let stem_ch = kind.stem_channels();
        let stem = ConvBlock::new(
            store,
            rng,
            "backbone.stem",
            in_channels,
            stem_ch,
            3,
            ConvSpec::new(2, 1, 1),
        );
        let widths = kind.stage_channels();
        let depths = kind.stage_depths();
        let mut stages = Vec::new();
        let mut in_ch = stem_ch;
        for (si, (&out_ch, &depth)) in widths.iter().zip(depths.iter()).enumerate() {
            // the first stage sits right after the stride-4 stem+pool
            let stage_stride = if si == 0 { 1 } else { 2 };
            let mut blocks = Vec::new();
            for bi in 0..depth {
                let stride = if bi == 0 { stage_stride } else { 1 };
                blocks.push(ResBlock::new(
                    store,
                    rng,
                    &format!("backbone.stage{}.block{bi}", si + 2),
                    in_ch,
                    out_ch,
                    stride,
                    kind.bottleneck(),
                ));
                in_ch = out_ch;
            }
            stages.push(Stage { blocks });
        }
        Self { kind, stem, stages }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn out_channels(&self) -> (usize, usize, usize) {
        self.kind.out_channels()
    }

    /// Input spatial dims must be divisible by 32.
    pub fn forward<T: Scalar>(&self, p: &BoundParams<T>, x: &Tensor<T>) -> Pyramid<T> {
        let s = x.shape();
        assert!(
            s[2] % 32 == 0 && s[3] % 32 == 0,
            "backbone input dims must be multiples of 32, got {}x{}",
            s[2],
            s[3]
        );
        let stem = self.stem.forward(p, x);
        let mut h = max_pool2d(&stem, 3, 2, 1);
        let mut scales = Vec::new();
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(p, &h);
            }
            scales.push(h.clone());
        }
        Pyramid {
            f3: scales[1].clone(),
            f4: scales[2].clone(),
            f5: scales[3].clone(),
        }
    }
}

/// Load backbone weights from a parameter file written by the trainer
/// (or any file in the same format), replacing every `backbone.*` entry
/// in `store`. The file must cover exactly the backbone parameter set,
/// with matching shapes.
pub fn load_pretrained<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| FdError::io(path.to_path_buf(), e))?,
    );
    let mut magic = [0u8; 8];
    std::io::Read::read_exact(&mut file, &mut magic)
        .map_err(|e| FdError::io(path.to_path_buf(), e))?;
    if &magic != b"FDNETPAR" {
        return Err(FdError::WeightLoad(format!(
            "{} is not a parameter file (bad magic)",
            path.display()
        )));
    }
    let mut tag = [0u8; 1];
    std::io::Read::read_exact(&mut file, &mut tag)
        .map_err(|e| FdError::io(path.to_path_buf(), e))?;
    let dtype = crate::tensor::Dtype::from_tag(tag[0])
        .ok_or_else(|| FdError::WeightLoad(format!("unknown dtype tag {}", tag[0])))?;
    if dtype != T::DTYPE {
        return Err(FdError::WeightLoad(format!(
            "parameter file holds {} values, expected {}",
            dtype.name(),
            T::DTYPE.name()
        )));
    }
    let loaded = read_array_map::<T, _>(&mut file)?;

    let expected: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("backbone."))
        .cloned()
        .collect();
    for name in &expected {
        let arr = loaded.get(name).ok_or_else(|| {
            FdError::WeightLoad(format!("parameter {name} missing from {}", path.display()))
        })?;
        if arr.shape() != store.get(name).shape() {
            return Err(FdError::WeightLoad(format!(
                "shape mismatch for {name}: file has {:?}, model needs {:?}",
                arr.shape(),
                store.get(name).shape()
            )));
        }
    }
    for (name, arr) in &loaded {
        if !name.starts_with("backbone.") {
            continue;
        }
        if !store.contains(name) {
            return Err(FdError::WeightLoad(format!(
                "parameter {name} in {} does not exist in this model",
                path.display()
            )));
        }
        store.set(name, arr.clone());
    }
    Ok(())
}

/// Write every `backbone.*` parameter to a standalone file loadable by
/// [`load_pretrained`].
pub fn save_pretrained<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    use std::io::Write;
    let subset: std::collections::BTreeMap<String, ndarray::ArrayD<T>> = store
        .iter()
        .filter(|(k, _)| k.starts_with("backbone."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| FdError::io(path.to_path_buf(), e))?,
    );
    out.write_all(b"FDNETPAR")
        .and_then(|_| out.write_all(&[T::DTYPE.tag()]))
        .and_then(|_| crate::nn::write_array_map(&mut out, &subset))
        .map_err(|e| FdError::io(path.to_path_buf(), e))?;
    Ok(())
}
