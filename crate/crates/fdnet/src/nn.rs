//! Parameter storage and the small layer vocabulary the network is built
//! from. Parameters live as plain arrays keyed by dotted path names; each
//! forward pass binds them onto a fresh tape as leaves.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::conv::{conv2d, ConvSpec};
use crate::tensor::ops::{group_norm, silu};
use crate::tensor::{GradStore, Scalar, Tape, Tensor};

/// Named parameter arrays with deterministic (lexicographic) iteration order.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    values: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            values: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>) {
        let prev = self.values.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, value: ArrayD<T>) {
        let slot = self
            .values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.shape(), value.shape(), "shape change for {name}");
        *slot = value;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.values.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.values.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    /// Number of distinct parameter arrays.
    pub fn num_arrays(&self) -> usize {
        self.values.len()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    /// Total scalars under a dotted name prefix.
    pub fn num_scalars_under(&self, prefix: &str) -> usize {
        self.values
            .iter()
            .filter(|(k, _)| k.as_str() == prefix || k.starts_with(&format!("{prefix}.")))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> BoundParams<T> {
        let map = self
            .values
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        BoundParams { map }
    }

    pub fn as_map(&self) -> &BTreeMap<String, ArrayD<T>> {
        &self.values
    }

    pub fn from_map(values: BTreeMap<String, ArrayD<T>>) -> Self {
        Self { values }
    }
}

/// Serialize named arrays as a little-endian block: entry count, then per
/// entry the name, the dims and the raw values.
pub fn write_array_map<T: Scalar, W: std::io::Write>(
    out: &mut W,
    map: &BTreeMap<String, ArrayD<T>>,
) -> std::io::Result<()> {
    out.write_all(&(map.len() as u64).to_le_bytes())?;
    for (name, arr) in map {
        let nb = name.as_bytes();
        out.write_all(&(nb.len() as u32).to_le_bytes())?;
        out.write_all(nb)?;
        out.write_all(&[arr.ndim() as u8])?;
        for &d in arr.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let std = crate::tensor::std_owned(arr.clone());
        let mut buf = Vec::with_capacity(std.len() * T::SIZE);
        for &v in std.as_slice().unwrap() {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

/// Inverse of [`write_array_map`]. Format violations come back as
/// `WeightLoad` errors naming what went wrong.
pub fn read_array_map<T: Scalar, R: std::io::Read>(
    inp: &mut R,
) -> crate::Result<BTreeMap<String, ArrayD<T>>> {
    use crate::FdError;
    let bad = |what: &str| FdError::WeightLoad(format!("malformed parameter block: {what}"));
    let mut u64b = [0u8; 8];
    let mut u32b = [0u8; 4];
    inp.read_exact(&mut u64b).map_err(|_| bad("entry count"))?;
    let count = u64::from_le_bytes(u64b) as usize;
    if count > 1_000_000 {
        return Err(bad("implausible entry count"));
    }
    let mut map = BTreeMap::new();
    for _ in 0..count {
        inp.read_exact(&mut u32b).map_err(|_| bad("name length"))?;
        let name_len = u32::from_le_bytes(u32b) as usize;
        if name_len > 4096 {
            return Err(bad("implausible name length"));
        }
        let mut name_buf = vec![0u8; name_len];
        inp.read_exact(&mut name_buf).map_err(|_| bad("name bytes"))?;
        let name = String::from_utf8(name_buf).map_err(|_| bad("name encoding"))?;
        let mut ndim_b = [0u8; 1];
        inp.read_exact(&mut ndim_b).map_err(|_| bad("rank"))?;
        let mut dims = Vec::with_capacity(ndim_b[0] as usize);
        for _ in 0..ndim_b[0] {
            inp.read_exact(&mut u64b).map_err(|_| bad("dim"))?;
            dims.push(u64::from_le_bytes(u64b) as usize);
        }
        let n: usize = dims.iter().product();
        if n > 500_000_000 {
            return Err(bad("implausible array size"));
        }
        let mut raw = vec![0u8; n * T::SIZE];
        inp.read_exact(&mut raw).map_err(|_| bad("value bytes"))?;
        let data: Vec<T> = raw.chunks_exact(T::SIZE).map(T::read_le).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|_| bad("shape"))?;
        if map.insert(name.clone(), arr).is_some() {
            return Err(bad(&format!("duplicate entry {name}")));
        }
    }
    Ok(map)
}

/// Tape-bound view of a [`ParamStore`] for one forward/backward pass.
pub struct BoundParams<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> BoundParams<T> {
    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Pull accumulated gradients out of `grads`, keyed by parameter name.
    /// Parameters that received no gradient are omitted.
    pub fn take_grads(&self, grads: &mut GradStore<T>) -> BTreeMap<String, ArrayD<T>> {
        let mut out = BTreeMap::new();
        for (name, tensor) in &self.map {
            if let Some(g) = grads.take(tensor) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// He-style normal initialization with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Scalar>(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0f64, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Largest group count not exceeding 8 that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    for g in (1..=8usize.min(channels)).rev() {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

/// Convolution layer: owns names into the store, not the arrays themselves.
#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    spec: ConvSpec,
    has_bias: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        store.insert(
            &format!("{name}.weight"),
            he_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
        );
        if bias {
            store.insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_ch])));
        }
        Self {
            name: name.to_string(),
            spec,
            has_bias: bias,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &BoundParams<T>, x: &Tensor<T>) -> Tensor<T> {
        let w = p.get(&format!("{}.weight", self.name));
        let bias_name = format!("{}.bias", self.name);
        let bias = self.has_bias.then(|| p.get(&bias_name));
        conv2d(x, w, bias, self.spec)
    }
}

/// Group normalization layer with learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    name: String,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        store.insert(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])));
        store.insert(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        Self {
            name: name.to_string(),
            groups: norm_groups(channels),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &BoundParams<T>, x: &Tensor<T>) -> Tensor<T> {
        let gamma = p.get(&format!("{}.gamma", self.name));
        let beta = p.get(&format!("{}.beta", self.name));
        group_norm(x, gamma, beta, self.groups, self.eps)
    }
}

/// Conv + group norm + SiLU, the default block everywhere a plain
/// convolution is not explicitly called for.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Self {
        // norm supplies the shift, so the conv goes biasless
        let conv = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv"),
            in_ch,
            out_ch,
            kernel,
            spec,
            false,
        );
        let norm = GroupNorm::new(store, &format!("{name}.norm"), out_ch);
        Self { conv, norm }
    }

    pub fn forward<T: Scalar>(&self, p: &BoundParams<T>, x: &Tensor<T>) -> Tensor<T> {
        silu(&self.norm.forward(p, &self.conv.forward(p, x)))
    }
}
