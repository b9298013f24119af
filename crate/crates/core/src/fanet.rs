//! Feature-Align U-Net denoiser.
//!
//! The network works on packed 4-channel RAW in the k-sigma domain and
//! predicts a residual: `out = x + head(core(x * input_scale)) / input_scale`.
//! Encoder scales are ARNet blocks (pointwise expand, 3x3 group conv,
//! pointwise project) followed by Feature-Align modulation driven by an
//! average-pooled copy of the noisy input. Skips are shrunk by a pointwise
//! conv, then tiled back to the decoder width and added.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng;
use crate::tensor::{io as tio, Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub scales: usize,
    pub base_width: usize,
    pub expansion: usize,
    pub groups: usize,
    pub skip_shrink_channels: usize,
    pub fa_hidden: usize,
    #[serde(default = "yes")]
    pub feature_align: bool,
    /// Multiplier applied to the k-sigma input before the network body; the
    /// predicted residual is divided by it again.
    #[serde(default = "default_input_scale")]
    pub input_scale: f32,
}

fn yes() -> bool {
    true
}

fn default_input_scale() -> f32 {
    1e-3
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            base_width: 16,
            expansion: 2,
            groups: 4,
            skip_shrink_channels: 4,
            fa_hidden: 16,
            feature_align: true,
            input_scale: default_input_scale(),
        }
    }
}

impl ModelConfig {
    /// Plain wide U-Net used as the distillation teacher.
    pub fn teacher() -> Self {
        Self {
            scales: 4,
            base_width: 64,
            expansion: 2,
            groups: 1,
            skip_shrink_channels: 4,
            fa_hidden: 16,
            feature_align: false,
            input_scale: default_input_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(config_err!(
                "model.scales must be >= 2, got {}",
                self.scales
            ));
        }
        if self.scales > 8 {
            return Err(config_err!(
                "model.scales must be <= 8, got {}",
                self.scales
            ));
        }
        if self.base_width == 0 || self.groups == 0 || !self.base_width.is_multiple_of(self.groups)
        {
            return Err(config_err!(
                "model.base_width ({}) must be a positive multiple of model.groups ({})",
                self.base_width,
                self.groups
            ));
        }
        if self.expansion == 0 {
            return Err(config_err!("model.expansion must be >= 1"));
        }
        if self.skip_shrink_channels == 0 {
            return Err(config_err!("model.skip_shrink_channels must be >= 1"));
        }
        if self.feature_align && self.fa_hidden == 0 {
            return Err(config_err!(
                "model.fa_hidden must be >= 1 when feature_align is on"
            ));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(config_err!(
                "model.input_scale must be positive, got {}",
                self.input_scale
            ));
        }
        Ok(())
    }

    /// Channel width at each scale; doubles per scale.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.scales).map(|s| self.base_width << s).collect()
    }

    /// Packed input sides must be divisible by this.
    pub fn packed_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }

    /// Bayer input sides must be divisible by this.
    pub fn bayer_multiple(&self) -> usize {
        1 << self.scales
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Kaiming(usize),
    Zero,
}

struct ParamSpec {
    name: String,
    dims: [usize; 4],
    init: Init,
}

fn conv_params(
    out: &mut Vec<ParamSpec>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    groups: usize,
    zero: bool,
) {
    let fan_in = c_in / groups * k * k;
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        dims: [c_out, c_in / groups, k, k],
        init: if zero {
            Init::Zero
        } else {
            Init::Kaiming(fan_in)
        },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        dims: [c_out, 1, 1, 1],
        init: Init::Zero,
    });
}

fn block_params(
    out: &mut Vec<ParamSpec>,
    prefix: &str,
    cfg: &ModelConfig,
    c_in: usize,
    c_out: usize,
) {
    let hidden = c_in * cfg.expansion;
    conv_params(out, &format!("{prefix}.expand"), c_in, hidden, 1, 1, false);
    conv_params(
        out,
        &format!("{prefix}.group"),
        hidden,
        hidden,
        3,
        cfg.groups,
        false,
    );
    conv_params(
        out,
        &format!("{prefix}.project"),
        hidden,
        c_out,
        1,
        1,
        false,
    );
}

fn fa_params(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig, c: usize) {
    if cfg.feature_align {
        conv_params(
            out,
            &format!("{prefix}.fa.trunk"),
            4,
            cfg.fa_hidden,
            3,
            1,
            false,
        );
        conv_params(
            out,
            &format!("{prefix}.fa.gamma"),
            cfg.fa_hidden,
            c,
            1,
            1,
            true,
        );
        conv_params(
            out,
            &format!("{prefix}.fa.beta"),
            cfg.fa_hidden,
            c,
            1,
            1,
            true,
        );
    }
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let w = cfg.widths();
    let mut out = Vec::new();
    conv_params(&mut out, "stem", 4, w[0], 3, 1, false);
    for s in 0..cfg.scales {
        let c_in = if s == 0 { w[0] } else { w[s - 1] };
        block_params(&mut out, &format!("enc{s}"), cfg, c_in, w[s]);
        fa_params(&mut out, &format!("enc{s}"), cfg, w[s]);
        if s + 1 < cfg.scales {
            conv_params(
                &mut out,
                &format!("skip{s}"),
                w[s],
                cfg.skip_shrink_channels,
                1,
                1,
                false,
            );
        }
    }
    for s in (0..cfg.scales - 1).rev() {
        conv_params(&mut out, &format!("dec{s}.up"), w[s + 1], w[s], 1, 1, false);
        block_params(&mut out, &format!("dec{s}"), cfg, w[s], w[s]);
        fa_params(&mut out, &format!("dec{s}"), cfg, w[s]);
    }
    conv_params(&mut out, "head", w[0], 4, 3, 1, true);
    out
}

/// Named learnable parameters, keyed by layer path (`enc1.group.w`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T: Real = f32> {
    params: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ModelWeights<T> {
    /// Kaiming-normal (fan-in) kernels, zero biases, zero Feature-Align heads
    /// and a zero output head, so a fresh model is the identity.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = BTreeMap::new();
        for spec in param_specs(cfg) {
            let t = match spec.init {
                Init::Zero => Tensor::zeros(spec.dims),
                Init::Kaiming(fan_in) => {
                    let normal =
                        Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(spec.dims, |_| T::lit(normal.sample(&mut rng)))
                }
            };
            params.insert(spec.name, Arc::new(t));
        }
        Ok(Self { params })
    }

    /// Checks names and shapes against `cfg` and that every value is finite.
    pub fn from_map(cfg: &ModelConfig, map: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        if specs.len() != map.len() {
            return Err(shape_err!(
                "expected {} parameters, found {}",
                specs.len(),
                map.len()
            ));
        }
        for spec in &specs {
            let t = map
                .get(&spec.name)
                .ok_or_else(|| shape_err!("missing parameter {}", spec.name))?;
            if t.dims() != spec.dims {
                return Err(shape_err!(
                    "{}: dims {:?}, expected {:?}",
                    spec.name,
                    t.dims(),
                    spec.dims
                ));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("{}: non-finite values", spec.name)));
            }
        }
        Ok(Self {
            params: map.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Replaces one parameter; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| shape_err!("unknown parameter {name}"))?;
        if slot.dims() != t.dims() {
            return Err(shape_err!(
                "{name}: dims {:?}, expected {:?}",
                t.dims(),
                slot.dims()
            ));
        }
        *slot = Arc::new(t);
        Ok(())
    }

    /// Mutable access for in-place updates (copies if the tensor is shared).
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|t| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Inserts every parameter into `g` as a shared leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.shared(Arc::clone(v), trainable)))
                .collect(),
        }
    }
}

impl ModelWeights<f32> {
    /// SHA-256 over names, dims and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.params {
            h.update((k.len() as u32).to_le_bytes());
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((d as u32).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Graph handles for a bound set of weights.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Wraps existing graph nodes, e.g. leaves created by the caller.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| shape_err!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn conv<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    stride: usize,
    groups: usize,
) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let k = g.value(w).h();
    g.conv2d(x, w, Some(b), stride, k / 2, groups)
}

/// Expand, group conv, project; residual add when shapes allow.
pub fn arnet_block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    stride: usize,
    groups: usize,
) -> Result<Var> {
    let e = conv(g, p, &format!("{prefix}.expand"), x, 1, 1)?;
    let e = g.relu(e);
    let s = conv(g, p, &format!("{prefix}.group"), e, stride, groups)?;
    let s = g.relu(s);
    let out = conv(g, p, &format!("{prefix}.project"), s, 1, 1)?;
    if stride == 1 && g.value(out).dims() == g.value(x).dims() {
        g.add(out, x)
    } else {
        Ok(out)
    }
}

/// `(1 + gamma) * f + beta`, with gamma and beta predicted from the noisy
/// input at the feature map's resolution.
pub fn feature_align<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    f: Var,
    noisy: Var,
) -> Result<Var> {
    let (fd, nd) = (g.value(f).dims(), g.value(noisy).dims());
    if fd[2..] != nd[2..] || fd[0] != nd[0] {
        return Err(shape_err!(
            "feature_align: features {fd:?} vs noisy input {nd:?}"
        ));
    }
    let t = conv(g, p, &format!("{prefix}.fa.trunk"), noisy, 1, 1)?;
    let t = g.relu(t);
    let gamma = conv(g, p, &format!("{prefix}.fa.gamma"), t, 1, 1)?;
    let beta = conv(g, p, &format!("{prefix}.fa.beta"), t, 1, 1)?;
    let scaled = g.mul(gamma, f)?;
    let out = g.add(f, scaled)?;
    g.add(out, beta)
}

pub fn shrink_skip<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, enc: Var) -> Result<Var> {
    conv(g, p, prefix, enc, 1, 1)
}

/// Tiles the shrunk skip channels cyclically up to the decoder width and adds.
pub fn expand_skip<T: Real>(g: &mut Graph<T>, shrunk: Var, dec: Var) -> Result<Var> {
    let c = g.value(dec).c();
    let tiled = g.repeat_channels(shrunk, c)?;
    g.add(dec, tiled)
}

/// Graph handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    /// Activation after each encoder scale, finest first.
    pub encoder: Vec<Var>,
}

fn check_input(cfg: &ModelConfig, dims: [usize; 4]) -> Result<()> {
    let m = cfg.packed_multiple();
    if dims[1] != 4 {
        return Err(shape_err!(
            "model input must have 4 packed channels, got {}",
            dims[1]
        ));
    }
    if dims[2] == 0 || dims[3] == 0 || !dims[2].is_multiple_of(m) || !dims[3].is_multiple_of(m) {
        return Err(shape_err!(
            "packed input {}x{} must be divisible by {m} (Bayer sides by {})",
            dims[2],
            dims[3],
            cfg.bayer_multiple()
        ));
    }
    Ok(())
}

struct Encoded {
    features: Vec<Var>,
    pyramid: Vec<Var>,
    skips: Vec<Var>,
}

fn encode_inner<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    x: Var,
    depth: usize,
    with_skips: bool,
) -> Result<Encoded> {
    check_input(cfg, g.value(x).dims())?;
    let scaled = g.affine(x, T::lit(cfg.input_scale as f64), T::zero());
    let mut pyramid = vec![scaled];
    let mut features = Vec::new();
    let mut skips = Vec::new();
    let stem = conv(g, p, "stem", scaled, 1, 1)?;
    let mut h = g.relu(stem);
    for s in 0..depth {
        if s > 0 && cfg.feature_align {
            let prev = pyramid[s - 1];
            let pooled = g.avg_pool2d(prev, 2)?;
            pyramid.push(pooled);
        }
        let stride = if s == 0 { 1 } else { 2 };
        h = arnet_block(g, p, &format!("enc{s}"), h, stride, cfg.groups)?;
        if cfg.feature_align {
            h = feature_align(g, p, &format!("enc{s}"), h, pyramid[s])?;
        }
        features.push(h);
        if with_skips && s + 1 < cfg.scales {
            skips.push(shrink_skip(g, p, &format!("skip{s}"), h)?);
        }
    }
    Ok(Encoded {
        features,
        pyramid,
        skips,
    })
}

/// Encoder activations only, finest scale first.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    x: Var,
    depth: usize,
) -> Result<Vec<Var>> {
    if depth == 0 || depth > cfg.scales {
        return Err(config_err!(
            "encoder depth {depth} outside 1..={}",
            cfg.scales
        ));
    }
    Ok(encode_inner(g, cfg, p, x, depth, false)?.features)
}

/// Full network on a packed k-sigma input `(N, 4, h, w)`.
pub fn forward<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Bound, x: Var) -> Result<Forward> {
    let enc = encode_inner(g, cfg, p, x, cfg.scales, true)?;
    let pyramid = enc.pyramid;
    let mut d = *enc.features.last().expect("scales >= 2");
    for s in (0..cfg.scales - 1).rev() {
        let up = g.upsample_nearest(d, 2)?;
        let up = conv(g, p, &format!("dec{s}.up"), up, 1, 1)?;
        let fused = expand_skip(g, enc.skips[s], up)?;
        d = arnet_block(g, p, &format!("dec{s}"), fused, 1, cfg.groups)?;
        if cfg.feature_align {
            d = feature_align(g, p, &format!("dec{s}"), d, pyramid[s])?;
        }
    }
    let delta = conv(g, p, "head", d, 1, 1)?;
    let delta = g.affine(delta, T::lit(1.0 / cfg.input_scale as f64), T::zero());
    let output = g.add(x, delta)?;
    Ok(Forward {
        output,
        encoder: enc.features,
    })
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init(&config, seed)?;
        Ok(Self { config, weights })
    }

    /// Inference on a packed k-sigma batch.
    pub fn denoise(&self, packed: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.weights.bind(&mut g, false);
        let x = g.constant(packed.clone());
        let f = forward(&mut g, &self.config, &p, x)?;
        Ok(g.value(f.output).clone())
    }

    pub fn gmacs_per_mp(&self, bayer_h: usize, bayer_w: usize) -> f64 {
        count_macs(&self.config, bayer_h, bayer_w)
    }

    /// Writes `config.json` and `weights.fdt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(CONFIG_FILE),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        let entries: Vec<(&str, &Tensor)> = self.weights.iter().collect();
        tio::write_named(&dir.join(WEIGHTS_FILE), &entries)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelConfig =
            serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let map = tio::read_named(&dir.join(WEIGHTS_FILE))?
            .into_iter()
            .collect();
        let weights = ModelWeights::from_map(&config, map)?;
        Ok(Self { config, weights })
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.fdt";

/// Shape of one convolution as evaluated, for MAC accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvSpec {
    pub fn macs(&self) -> u64 {
        (self.c_in / self.groups * self.c_out * self.k * self.k) as u64
            * (self.h_out * self.w_out) as u64
    }
}

/// Every convolution the model runs on a Bayer frame of `bayer_h x bayer_w`.
pub fn conv_layers(cfg: &ModelConfig, bayer_h: usize, bayer_w: usize) -> Vec<ConvSpec> {
    let w = cfg.widths();
    let (h0, w0) = (bayer_h / 2, bayer_w / 2);
    let at = |s: usize| (h0 >> s, w0 >> s);
    let mut out = Vec::new();
    let mut push = |c_in, c_out, k, groups, (h_out, w_out): (usize, usize)| {
        out.push(ConvSpec {
            c_in,
            c_out,
            k,
            groups,
            h_out,
            w_out,
        })
    };
    push(4, w[0], 3, 1, at(0));
    let block = |push: &mut dyn FnMut(usize, usize, usize, usize, (usize, usize)),
                 c_in: usize,
                 c_out: usize,
                 s_in: usize,
                 s_out: usize| {
        let hidden = c_in * cfg.expansion;
        push(c_in, hidden, 1, 1, at(s_in));
        push(hidden, hidden, 3, cfg.groups, at(s_out));
        push(hidden, c_out, 1, 1, at(s_out));
    };
    let fa =
        |push: &mut dyn FnMut(usize, usize, usize, usize, (usize, usize)), c: usize, s: usize| {
            if cfg.feature_align {
                push(4, cfg.fa_hidden, 3, 1, at(s));
                push(cfg.fa_hidden, c, 1, 1, at(s));
                push(cfg.fa_hidden, c, 1, 1, at(s));
            }
        };
    for s in 0..cfg.scales {
        let (c_in, s_in) = if s == 0 { (w[0], 0) } else { (w[s - 1], s - 1) };
        block(&mut push, c_in, w[s], s_in, s);
        fa(&mut push, w[s], s);
        if s + 1 < cfg.scales {
            push(w[s], cfg.skip_shrink_channels, 1, 1, at(s));
        }
    }
    for s in (0..cfg.scales - 1).rev() {
        push(w[s + 1], w[s], 1, 1, at(s));
        block(&mut push, w[s], w[s], s, s);
        fa(&mut push, w[s], s);
    }
    push(w[0], 4, 3, 1, at(0));
    out
}

/// GMACs per megapixel of Bayer input for a list of layers.
pub fn gmacs_per_mp(layers: &[ConvSpec], bayer_h: usize, bayer_w: usize) -> f64 {
    let total: u64 = layers.iter().map(ConvSpec::macs).sum();
    total as f64 / ((bayer_h * bayer_w) as f64 / 1e6) / 1e9
}

/// Convolution MACs of the model per megapixel of Bayer input, in billions.
pub fn count_macs(cfg: &ModelConfig, bayer_h: usize, bayer_w: usize) -> f64 {
    gmacs_per_mp(&conv_layers(cfg, bayer_h, bayer_w), bayer_h, bayer_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d_forward;

    fn input(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let u = rand_distr::Uniform::new(0.0f32, 1000.0).unwrap();
        Tensor::from_fn([n, 4, h, w], |_| u.sample(&mut r))
    }

    fn randomize_zero_params(w: &mut ModelWeights, seed: u64, filter: impl Fn(&str) -> bool) {
        let mut r = rng::seeded(seed);
        let normal = Normal::new(0.0f32, 0.1).unwrap();
        let names: Vec<String> = w.names().map(String::from).collect();
        for n in names {
            if filter(&n) {
                let t = w.get_mut(&n).unwrap();
                for v in t.data_mut() {
                    *v = normal.sample(&mut r);
                }
            }
        }
    }

    fn run(cfg: &ModelConfig, w: &ModelWeights, x: &Tensor) -> Tensor {
        Model {
            config: cfg.clone(),
            weights: w.clone(),
        }
        .denoise(x)
        .unwrap()
    }

    #[test]
    fn fresh_model_is_identity() {
        let cfg = ModelConfig::default();
        let m = Model::init(cfg.clone(), 3).unwrap();
        let x = input(2, 16, 8, 1);
        assert_eq!(m.denoise(&x).unwrap(), x);
    }

    #[test]
    fn output_shape_matches_input_for_several_configs() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                scales: 2,
                base_width: 8,
                groups: 2,
                feature_align: false,
                ..ModelConfig::default()
            },
            ModelConfig {
                scales: 4,
                base_width: 4,
                expansion: 3,
                groups: 1,
                skip_shrink_channels: 3,
                fa_hidden: 5,
                ..ModelConfig::default()
            },
        ] {
            let mut w = ModelWeights::init(&cfg, 1).unwrap();
            randomize_zero_params(&mut w, 2, |_| true);
            let m = cfg.packed_multiple();
            let x = input(1, 2 * m, 3 * m, 4);
            let y = run(&cfg, &w, &x);
            assert_eq!(y.dims(), x.dims());
            assert!(y.is_finite());
        }
    }

    #[test]
    fn indivisible_input_is_shape_error() {
        let cfg = ModelConfig::default();
        let m = Model::init(cfg.clone(), 3).unwrap();
        let x = input(1, 6, 8, 1);
        assert!(matches!(m.denoise(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = ModelConfig {
            base_width: 10,
            groups: 4,
            ..ModelConfig::default()
        };
        let e = bad.validate().unwrap_err().to_string();
        assert!(e.contains("base_width"), "{e}");
        let bad = ModelConfig {
            scales: 1,
            ..ModelConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("scales"));
        let bad = ModelConfig {
            skip_shrink_channels: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_fa_heads_match_structural_removal() {
        let on = ModelConfig::default();
        let off = ModelConfig {
            feature_align: false,
            ..on.clone()
        };
        let mut w_on = ModelWeights::init(&on, 9).unwrap();
        randomize_zero_params(&mut w_on, 5, |n| n.starts_with("head"));
        let mut w_off = ModelWeights::init(&off, 1).unwrap();
        for name in w_off.names().map(String::from).collect::<Vec<_>>() {
            w_off.set(&name, w_on.get(&name).unwrap().clone()).unwrap();
        }
        let x = input(1, 16, 16, 2);
        let a = run(&on, &w_on, &x);
        let b = run(&off, &w_off, &x);
        assert!(a.max_abs_diff(&b) <= 1e-6, "{}", a.max_abs_diff(&b));
        assert!(a.max_abs_diff(&x) > 1e-3);
    }

    fn block_weights(
        c_in: usize,
        c_out: usize,
        exp: usize,
        groups: usize,
        seed: u64,
    ) -> (ModelWeights, ModelConfig) {
        let cfg = ModelConfig {
            expansion: exp,
            groups,
            ..ModelConfig::default()
        };
        let mut specs = Vec::new();
        block_params(&mut specs, "blk", &cfg, c_in, c_out);
        let mut r = rng::seeded(seed);
        let normal = Normal::new(0.0f32, 0.3).unwrap();
        let params = specs
            .into_iter()
            .map(|s| {
                (
                    s.name,
                    Arc::new(Tensor::from_fn(s.dims, |_| normal.sample(&mut r))),
                )
            })
            .collect();
        (ModelWeights { params }, cfg)
    }

    #[test]
    fn arnet_matches_composed_convolutions() {
        let (w, _) = block_weights(6, 6, 2, 1, 3);
        let x = Tensor::from_fn([1, 6, 8, 8], |[_, c, y, x]| {
            ((c * 13 + y * 7 + x * 3) % 11) as f32 / 5.0 - 1.0
        });
        let mut g = Graph::new();
        let p = w.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = arnet_block(&mut g, &p, "blk", xv, 1, 1).unwrap();
        let relu = |t: Tensor| t.map(|v| v.max(0.0));
        let c = |name: &str, t: &Tensor, stride, groups| {
            let wt = w.get(&format!("blk.{name}.w")).unwrap();
            let b = w.get(&format!("blk.{name}.b")).unwrap();
            conv2d_forward(t, wt, Some(b), stride, wt.h() / 2, groups).unwrap()
        };
        let e = relu(c("expand", &x, 1, 1));
        let s = relu(c("group", &e, 1, 1));
        let p = c("project", &s, 1, 1);
        let want = Tensor::from_vec(
            x.dims(),
            p.data().iter().zip(x.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        assert!(g.value(out).max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn arnet_zero_weights_and_stride() {
        let (mut w, _) = block_weights(4, 4, 2, 2, 1);
        for n in w.names().map(String::from).collect::<Vec<_>>() {
            let d = w.get(&n).unwrap().dims();
            w.set(&n, Tensor::zeros(d)).unwrap();
        }
        let x = Tensor::from_fn([1, 4, 8, 6], |[_, c, y, x]| (c + y * x) as f32);
        let mut g = Graph::new();
        let p = w.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let same = arnet_block(&mut g, &p, "blk", xv, 1, 2).unwrap();
        assert_eq!(g.value(same), &x);
        let down = arnet_block(&mut g, &p, "blk", xv, 2, 2).unwrap();
        assert_eq!(g.value(down).dims(), [1, 4, 4, 3]);
    }

    #[test]
    fn feature_align_forced_cases() {
        let cfg = ModelConfig::default();
        let mut specs = Vec::new();
        fa_params(&mut specs, "l", &cfg, 3);
        let mut w = ModelWeights {
            params: specs
                .into_iter()
                .map(|s| (s.name, Arc::new(Tensor::zeros(s.dims))))
                .collect(),
        };
        let f = Tensor::from_fn([1, 3, 4, 4], |[_, c, y, x]| {
            (c * 16 + y * 4 + x) as f32 - 20.0
        });
        let noisy = Tensor::from_fn([1, 4, 4, 4], |[_, c, y, x]| (c + y + x) as f32 * 0.1);
        let eval = |w: &ModelWeights| {
            let mut g = Graph::new();
            let p = w.bind(&mut g, false);
            let fv = g.constant(f.clone());
            let nv = g.constant(noisy.clone());
            let o = feature_align(&mut g, &p, "l", fv, nv).unwrap();
            g.value(o).clone()
        };
        assert_eq!(eval(&w), f);
        // gamma = -1 everywhere: output is beta alone
        w.set("l.fa.gamma.b", Tensor::full([3, 1, 1, 1], -1.0))
            .unwrap();
        w.set(
            "l.fa.beta.b",
            Tensor::from_fn([3, 1, 1, 1], |[c, ..]| c as f32 + 0.5),
        )
        .unwrap();
        let out = eval(&w);
        for c in 0..3 {
            for v in out.plane(0, c) {
                assert_eq!(*v, c as f32 + 0.5);
            }
        }
        let mut g = Graph::new();
        let p = w.bind(&mut g, false);
        let fv = g.constant(f.clone());
        let small = g.constant(Tensor::zeros([1, 4, 2, 2]));
        assert!(feature_align(&mut g, &p, "l", fv, small).is_err());
    }

    #[test]
    fn skip_identity_and_tiling() {
        let mut w = ModelWeights::<f32> {
            params: BTreeMap::new(),
        };
        let eye = Tensor::from_fn([3, 3, 1, 1], |[o, i, ..]| if o == i { 1.0 } else { 0.0 });
        w.params.insert("s.w".into(), Arc::new(eye));
        w.params
            .insert("s.b".into(), Arc::new(Tensor::zeros([3, 1, 1, 1])));
        let x = Tensor::from_fn([1, 3, 2, 2], |[_, c, y, x]| (c * 4 + y * 2 + x) as f32);
        let mut g = Graph::new();
        let p = w.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let s = shrink_skip(&mut g, &p, "s", xv).unwrap();
        assert_eq!(g.value(s), &x);
        let dec = g.constant(Tensor::zeros([1, 5, 2, 2]));
        let fused = expand_skip(&mut g, s, dec).unwrap();
        let out = g.value(fused);
        for (c, src) in [0, 1, 2, 0, 1].iter().enumerate() {
            assert_eq!(out.plane(0, c), x.plane(0, *src));
        }
        w.set("s.w", Tensor::zeros([3, 3, 1, 1])).unwrap();
        let mut g = Graph::new();
        let p = w.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let s = shrink_skip(&mut g, &p, "s", xv).unwrap();
        let dec = g.constant(x.clone());
        let fused = expand_skip(&mut g, s, dec).unwrap();
        assert_eq!(g.value(fused), &x);
    }

    #[test]
    fn translation_covariance_at_stride_granularity() {
        let cfg = ModelConfig::default();
        let mut w = ModelWeights::init(&cfg, 4).unwrap();
        randomize_zero_params(&mut w, 8, |n| {
            n.contains("gamma") || n.contains("beta") || n.starts_with("head")
        });
        let shift = cfg.packed_multiple();
        let scene =
            |y: usize, x: usize, c: usize| (((y * 31 + x * 17 + c * 7) % 23) as f32) * 40.0 + 100.0;
        let n = 96;
        let a = Tensor::from_fn([1, 4, n, n], |[_, c, y, x]| scene(y, x, c));
        let b = Tensor::from_fn([1, 4, n, n], |[_, c, y, x]| scene(y + shift, x + shift, c));
        let (ya, yb) = (run(&cfg, &w, &a), run(&cfg, &w, &b));
        let (lo, hi) = (40, 56);
        let mut worst = 0.0f32;
        for c in 0..4 {
            for y in lo..hi {
                for x in lo..hi {
                    let d = (yb.at(0, c, y, x) - ya.at(0, c, y + shift, x + shift)).abs();
                    worst = worst.max(d / ya.at(0, c, y + shift, x + shift).abs().max(1.0));
                }
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig::default();
        let m = Model::init(cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.weights.checksum(), m.weights.checksum());
    }

    #[test]
    fn macs_single_layer_closed_form() {
        let l = ConvSpec {
            c_in: 4,
            c_out: 8,
            k: 3,
            groups: 1,
            h_out: 1000,
            w_out: 500,
        };
        assert_eq!(l.macs(), 4 * 8 * 9 * 500_000);
        assert_eq!(
            gmacs_per_mp(&[l], 2000, 1000),
            (4 * 8 * 9 * 500_000) as f64 / 2.0 / 1e9
        );
    }

    #[test]
    fn macs_are_resolution_invariant() {
        for cfg in [ModelConfig::default(), ModelConfig::teacher()] {
            let a = count_macs(&cfg, 256, 256);
            let b = count_macs(&cfg, 256, 512);
            let c = count_macs(&cfg, 1024, 2048);
            assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
        }
        assert!(
            count_macs(&ModelConfig::teacher(), 256, 256)
                >= 10.0 * count_macs(&ModelConfig::default(), 256, 256)
        );
    }

    #[test]
    fn mac_layer_list_matches_parameters() {
        for cfg in [ModelConfig::default(), ModelConfig::teacher()] {
            let specs = param_specs(&cfg);
            let weights: Vec<_> = specs.iter().filter(|s| s.name.ends_with(".w")).collect();
            let layers = conv_layers(&cfg, 64, 64);
            assert_eq!(weights.len(), layers.len());
            let mut from_params: Vec<_> = weights
                .iter()
                .map(|s| (s.dims[0], s.dims[1], s.dims[2]))
                .collect();
            let mut from_layers: Vec<_> = layers
                .iter()
                .map(|l| (l.c_out, l.c_in / l.groups, l.k))
                .collect();
            from_params.sort();
            from_layers.sort();
            assert_eq!(from_params, from_layers);
        }
    }
}
