//! Training losses: Charbonnier, simple distillation, and teacher-feature
//! content/style losses on the packed output or on ISP-processed RGB.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bayer::{isp_graph, IspParams};
use crate::error::{config_err, shape_err, Error, Result};
use crate::fanet::{self, Bound, Model};
use crate::noise::NoiseParams;
use crate::tensor::{Graph, Real, Var};

pub const CHARBONNIER_C: f64 = 1e-6;
pub const PIXEL_LOSS_WEIGHT: f64 = 393.5;
pub const FEATURE_LOSS_WEIGHT: f64 = 78.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Charbonnier,
    RgbPerceptual,
    SimpleKd,
    FeatureMatching,
}

impl LossMode {
    pub fn needs_teacher(self) -> bool {
        self != LossMode::Charbonnier
    }

    pub fn default_weight(self) -> f64 {
        match self {
            LossMode::Charbonnier | LossMode::SimpleKd => PIXEL_LOSS_WEIGHT,
            LossMode::FeatureMatching | LossMode::RgbPerceptual => FEATURE_LOSS_WEIGHT,
        }
    }
}

/// Teacher activation used by the feature losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerId {
    /// Output of encoder scale `s` (finest is 0).
    Encoder(usize),
    /// Final denoised prediction.
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    #[serde(default = "default_c")]
    pub charb_c: f64,
    /// Defaults per mode when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    /// Teacher checkpoint directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    #[serde(default = "one")]
    pub content_weight: f64,
    #[serde(default = "default_style")]
    pub style_weight: f64,
    /// Teacher layers; every encoder scale when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerId>>,
}

fn default_c() -> f64 {
    CHARBONNIER_C
}

fn one() -> f64 {
    1.0
}

fn default_style() -> f64 {
    0.1
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(LossMode::Charbonnier)
    }
}

impl LossConfig {
    pub fn new(mode: LossMode) -> Self {
        Self {
            mode,
            charb_c: CHARBONNIER_C,
            weight: None,
            teacher: None,
            content_weight: 1.0,
            style_weight: 0.1,
            layers: None,
        }
    }

    pub fn weight(&self) -> f64 {
        self.weight.unwrap_or_else(|| self.mode.default_weight())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.charb_c > 0.0) {
            return Err(config_err!(
                "loss.charb_c must be > 0, got {}",
                self.charb_c
            ));
        }
        if !(self.weight() > 0.0 && self.weight().is_finite()) {
            return Err(config_err!(
                "loss.weight must be > 0, got {}",
                self.weight()
            ));
        }
        if self.content_weight < 0.0 || self.style_weight < 0.0 {
            return Err(config_err!(
                "loss.content_weight and loss.style_weight must be >= 0"
            ));
        }
        if self.mode.needs_teacher() && self.teacher.is_none() {
            return Err(config_err!(
                "loss.teacher is required for mode {:?}",
                self.mode
            ));
        }
        if matches!(&self.layers, Some(l) if l.is_empty()) {
            return Err(config_err!("loss.layers must not be empty"));
        }
        Ok(())
    }
}

/// `mean(sqrt((pred - gt)^2 + c^2))`.
pub fn charbonnier<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, c: f64) -> Result<Var> {
    let d = g.sub(pred, gt)?;
    let sq = g.square(d);
    let sq = g.affine(sq, T::one(), T::lit(c * c));
    let r = g.sqrt(sq);
    Ok(g.mean(r))
}

/// Mean absolute difference.
pub fn simple_kd<T: Real>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    let d = g.sub(student, teacher)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Per-sample `A A^T / (C H W)` with `A` the `C x HW` unfolding; `(N, 1, C, C)`.
pub fn gram<T: Real>(g: &mut Graph<T>, features: Var) -> Var {
    g.gram(features)
}

/// Frozen teacher plus the activations compared by the feature losses.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub model: Model,
    pub layers: Vec<LayerId>,
}

impl Teacher {
    /// Uses every encoder scale of the model.
    pub fn new(model: Model) -> Self {
        let layers = (0..model.config.scales).map(LayerId::Encoder).collect();
        Self { model, layers }
    }

    pub fn with_layers(model: Model, layers: Vec<LayerId>) -> Result<Self> {
        if layers.is_empty() {
            return Err(config_err!("teacher layer set is empty"));
        }
        for l in &layers {
            if let LayerId::Encoder(s) = l {
                if *s >= model.config.scales {
                    return Err(config_err!(
                        "teacher layer encoder({s}) outside {} scales",
                        model.config.scales
                    ));
                }
            }
        }
        Ok(Self { model, layers })
    }

    fn activations<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let cfg = &self.model.config;
        let needs_output = self.layers.contains(&LayerId::Output);
        let depth = self
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerId::Encoder(s) => Some(s + 1),
                LayerId::Output => None,
            })
            .max()
            .unwrap_or(0);
        let (enc, out) = if needs_output {
            let f = fanet::forward(g, cfg, p, x)?;
            (f.encoder, Some(f.output))
        } else {
            (fanet::encode(g, cfg, p, x, depth)?, None)
        };
        Ok(self
            .layers
            .iter()
            .map(|l| match l {
                LayerId::Encoder(s) => enc[*s],
                LayerId::Output => out.expect("output requested"),
            })
            .collect())
    }
}

fn scalar_add<T: Real>(
    g: &mut Graph<T>,
    acc: Option<Var>,
    term: Var,
    weight: f64,
) -> Result<Option<Var>> {
    if weight == 0.0 {
        return Ok(acc);
    }
    let t = g.affine(term, T::lit(weight), T::zero());
    Ok(Some(match acc {
        Some(a) => g.add(a, t)?,
        None => t,
    }))
}

/// Content (mean absolute activation difference) plus style (mean absolute
/// Gram difference) between teacher activations on `student_out` and on `gt`,
/// summed over the teacher's layer set. `teacher_params` must be bound as
/// constants so no gradient reaches the teacher.
pub fn feature_matching<T: Real>(
    g: &mut Graph<T>,
    student_out: Var,
    gt: Var,
    teacher: &Teacher,
    teacher_params: &Bound,
    content_weight: f64,
    style_weight: f64,
) -> Result<Var> {
    if g.value(student_out).dims() != g.value(gt).dims() {
        return Err(shape_err!(
            "feature_matching: {:?} vs {:?}",
            g.value(student_out).dims(),
            g.value(gt).dims()
        ));
    }
    let fs = teacher.activations(g, teacher_params, student_out)?;
    let ft = teacher.activations(g, teacher_params, gt)?;
    let mut acc = None;
    for (a, b) in fs.into_iter().zip(ft) {
        let content = simple_kd(g, a, b)?;
        acc = scalar_add(g, acc, content, content_weight)?;
        if style_weight != 0.0 {
            let ga = g.gram(a);
            let gb = g.gram(b);
            let style = simple_kd(g, ga, gb)?;
            acc = scalar_add(g, acc, style, style_weight)?;
        }
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(g.constant(crate::tensor::Tensor::scalar(T::zero()))),
    }
}

/// Maps packed k-sigma tensors through the ISP and back to the teacher's
/// packed k-sigma domain, then applies [`feature_matching`].
#[allow(clippy::too_many_arguments)]
pub fn rgb_perceptual<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Var,
    noise: &[NoiseParams],
    isp: &IspParams,
    teacher: &Teacher,
    teacher_params: &Bound,
    content_weight: f64,
    style_weight: f64,
) -> Result<Var> {
    let n = g.value(pred).n();
    if noise.len() != n {
        return Err(shape_err!(
            "rgb_perceptual: {} noise params for batch {n}",
            noise.len()
        ));
    }
    let mut to_linear = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut to_ksigma = (Vec::with_capacity(n), Vec::with_capacity(n));
    for p in noise {
        let (scale, shift) = p.ksigma_coeffs()?;
        to_linear.0.push(T::lit(1.0 / scale));
        to_linear.1.push(T::lit(-shift / scale));
        to_ksigma.0.push(T::lit(scale));
        to_ksigma.1.push(T::lit(shift));
    }
    let through = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let lin = g.sample_affine(x, &to_linear.0, &to_linear.1)?;
        let rgb = isp_graph(g, lin, isp)?;
        let raw = g.mosaic(rgb)?;
        g.sample_affine(raw, &to_ksigma.0, &to_ksigma.1)
    };
    let p = through(g, pred)?;
    let t = through(g, gt)?;
    feature_matching(
        g,
        p,
        t,
        teacher,
        teacher_params,
        content_weight,
        style_weight,
    )
}

/// Loss evaluator bound to a config and an optional teacher.
#[derive(Clone, Debug)]
pub struct Objective {
    pub config: LossConfig,
    pub teacher: Option<Teacher>,
    pub isp: IspParams,
}

impl Objective {
    pub fn new(config: LossConfig, teacher: Option<Teacher>, isp: IspParams) -> Result<Self> {
        config.validate()?;
        if config.mode.needs_teacher() && teacher.is_none() {
            return Err(Error::Config(format!(
                "loss mode {:?} requires a loaded teacher",
                config.mode
            )));
        }
        Ok(Self {
            config,
            teacher,
            isp,
        })
    }

    /// Weighted loss for a batch; `noisy` is the student's input.
    pub fn loss(
        &self,
        g: &mut Graph<f32>,
        pred: Var,
        gt: Var,
        noisy: Var,
        noise: &[NoiseParams],
    ) -> Result<Var> {
        let c = &self.config;
        let teacher = || {
            self.teacher
                .as_ref()
                .ok_or_else(|| Error::Config("missing teacher".into()))
        };
        let raw = match c.mode {
            LossMode::Charbonnier => charbonnier(g, pred, gt, c.charb_c)?,
            LossMode::SimpleKd => {
                let t = teacher()?;
                let p = t.model.weights.bind(g, false);
                let tout = fanet::forward(g, &t.model.config, &p, noisy)?.output;
                simple_kd(g, pred, tout)?
            }
            LossMode::FeatureMatching => {
                let t = teacher()?;
                let p = t.model.weights.bind(g, false);
                feature_matching(g, pred, gt, t, &p, c.content_weight, c.style_weight)?
            }
            LossMode::RgbPerceptual => {
                let t = teacher()?;
                let p = t.model.weights.bind(g, false);
                rgb_perceptual(
                    g,
                    pred,
                    gt,
                    noise,
                    &self.isp,
                    t,
                    &p,
                    c.content_weight,
                    c.style_weight,
                )?
            }
        };
        Ok(g.affine(raw, c.weight() as f32, 0.0))
    }
}
