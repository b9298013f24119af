//! Heteroscedastic sensor noise: `y ~ N(x, a*x + b)`, clipped to `[0, 1]`.
//!
//! Covers per-capture calibration from patch stacks, the per-sensor
//! regressions (gain -> a, gain -> b, log a -> log b), training-time
//! parameter sampling and the k-sigma transform `T(x) = x/a + b/a^2`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bayer::BayerImage;
use crate::error::{config_err, Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{io as tio, Real, Tensor};

/// Floor applied to fitted/predicted `b` (and `a`) so log-space regressions stay defined.
pub const PARAM_FLOOR: f64 = 1e-12;

/// Stacks whose clean mean lies outside this band are skipped by the fit;
/// clipping bias is negligible inside it.
pub const FIT_BAND: (f64, f64) = (0.1, 0.9);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Signal-dependent variance per unit intensity.
    pub a: f64,
    /// Signal-independent variance.
    pub b: f64,
}

impl NoiseParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let p = Self { a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(config_err!(
                "noise parameter a must be positive and finite, got {}",
                self.a
            ));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(config_err!(
                "noise parameter b must be non-negative and finite, got {}",
                self.b
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn variance(&self, x: f64) -> f64 {
        (self.a * x + self.b).max(0.0)
    }

    /// `(scale, offset)` of the k-sigma transform `T(x) = scale*x + offset`.
    pub fn ksigma_coeffs(&self) -> Result<(f64, f64)> {
        if self.a == 0.0 {
            return Err(config_err!("k-sigma transform undefined for a = 0"));
        }
        self.validate()?;
        Ok((1.0 / self.a, self.b / (self.a * self.a)))
    }
}

/// Adds `N(0, a*x + b)` noise per pixel, independently, then clips to `[0, 1]`.
pub fn sample_noise(clean: &BayerImage, p: &NoiseParams, seed: u64) -> Result<BayerImage> {
    p.validate()?;
    let mut rng = rng::seeded(seed);
    let data = add_noise(clean.data(), p, &mut rng, true);
    let mut out = clean.with_data(data)?;
    out.meta.noise = Some(*p);
    Ok(out)
}

/// Noisy copy of `values`; `clip` selects the sensor's `[0, 1]` saturation.
pub fn add_noise(values: &[f32], p: &NoiseParams, rng: &mut Rng, clip: bool) -> Vec<f32> {
    values
        .iter()
        .map(|&x| {
            let z: f64 = rng.sample(StandardNormal);
            let y = x as f64 + p.variance(x as f64).sqrt() * z;
            let y = y as f32;
            if clip {
                y.clamp(0.0, 1.0)
            } else {
                y
            }
        })
        .collect()
}

/// Repeated observations of one uniform patch and its noise-free intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStack {
    pub samples: Vec<f32>,
    pub mean: f64,
}

impl PatchStack {
    fn sample_variance(&self) -> f64 {
        let n = self.samples.len() as f64;
        let mu = self.samples.iter().map(|&v| v as f64).sum::<f64>() / n;
        self.samples
            .iter()
            .map(|&v| (v as f64 - mu).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    }
}

/// Least-squares polynomial fit, coefficients in ascending order.
fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Result<Vec<f64>> {
    if xs.len() < degree + 1 {
        return Err(Error::Calibration(format!(
            "need at least {} points for a degree-{degree} fit, got {}",
            degree + 1,
            xs.len()
        )));
    }
    let design = DMatrix::from_fn(xs.len(), degree + 1, |r, c| xs[r].powi(c as i32));
    let rhs = DVector::from_column_slice(ys);
    let coeffs = design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Calibration(format!("least squares failed: {e}")))?;
    Ok(coeffs.iter().copied().collect())
}

/// Ordinary least squares of stack variance against stack mean, restricted
/// to means in [`FIT_BAND`].
pub fn fit_noise_params(stacks: &[PatchStack]) -> Result<NoiseParams> {
    let usable: Vec<&PatchStack> = stacks
        .iter()
        .filter(|s| s.samples.len() >= 2 && s.mean >= FIT_BAND.0 && s.mean <= FIT_BAND.1)
        .collect();
    if usable.len() < 2 {
        return Err(Error::Calibration(format!(
            "{} usable patch stacks (means in [{}, {}]), need at least 2",
            usable.len(),
            FIT_BAND.0,
            FIT_BAND.1
        )));
    }
    let xs: Vec<f64> = usable.iter().map(|s| s.mean).collect();
    let ys: Vec<f64> = usable.iter().map(|s| s.sample_variance()).collect();
    if xs.iter().all(|&x| (x - xs[0]).abs() < 1e-12) {
        return Err(Error::Calibration(
            "patch stacks share a single mean".into(),
        ));
    }
    let c = polyfit(&xs, &ys, 1)?;
    let (b, a) = (c[0], c[1]);
    if !(a > PARAM_FLOOR) {
        return Err(Error::Calibration(format!(
            "fitted signal-dependent coefficient a = {a:e} is not positive"
        )));
    }
    NoiseParams::new(a, b.max(PARAM_FLOOR))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub slope: f64,
    pub intercept: f64,
}

impl Line {
    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// `c0 + c1*x + c2*x^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Quadratic {
    pub fn eval(&self, x: f64) -> f64 {
        self.c0 + x * (self.c1 + x * self.c2)
    }
}

/// Per-sensor noise description. Logs are natural logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorNoiseModel {
    pub log_a_range: (f64, f64),
    /// `ln b = slope * ln a + intercept`.
    pub logb_line: Line,
    pub gain_to_a: Line,
    pub gain_to_b: Quadratic,
    /// Gains seen during calibration; requests outside are extrapolated.
    pub gain_range: (f64, f64),
}

impl Default for SensorNoiseModel {
    /// Desk-scale sensor: `a` in `[1e-4, 1e-2]` over gains 1..100, read
    /// noise growing roughly with the square of the shot-noise coefficient.
    fn default() -> Self {
        Self {
            log_a_range: (1e-4f64.ln(), 1e-2f64.ln()),
            logb_line: Line {
                slope: 2.18,
                intercept: 1.20,
            },
            gain_to_a: Line {
                slope: 1e-4,
                intercept: 0.0,
            },
            gain_to_b: Quadratic {
                c0: 5e-9,
                c1: 0.0,
                c2: 1.45e-8,
            },
            gain_range: (1.0, 100.0),
        }
    }
}

impl SensorNoiseModel {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.log_a_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(config_err!(
                "noise.log_a_range must satisfy a_min <= a_max, got ({lo}, {hi})"
            ));
        }
        let (g0, g1) = self.gain_range;
        if !(g0 >= 1.0 && g0 <= g1) {
            return Err(config_err!(
                "noise.gain_range must satisfy 1 <= min <= max, got ({g0}, {g1})"
            ));
        }
        Ok(())
    }

    pub fn a_range(&self) -> (f64, f64) {
        (self.log_a_range.0.exp(), self.log_a_range.1.exp())
    }

    /// Copy restricted to `a` in `[a_min, a_max]`, keeping the regressions.
    pub fn with_a_range(&self, a_min: f64, a_max: f64) -> Result<Self> {
        if !(a_min > 0.0 && a_min <= a_max) {
            return Err(config_err!(
                "a range must satisfy 0 < a_min <= a_max, got ({a_min}, {a_max})"
            ));
        }
        Ok(Self {
            log_a_range: (a_min.ln(), a_max.ln()),
            ..self.clone()
        })
    }

    pub fn b_for(&self, a: f64) -> f64 {
        self.logb_line.eval(a.ln()).exp().max(PARAM_FLOOR)
    }
}

/// Draws `ln a ~ U(ln a_min, ln a_max)` and sets `ln b` from the line.
pub fn sample_training_params_with(model: &SensorNoiseModel, rng: &mut Rng) -> NoiseParams {
    let (lo, hi) = model.log_a_range;
    let log_a = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    let a = log_a.exp();
    NoiseParams {
        a,
        b: model.b_for(a),
    }
}

pub fn sample_training_params(model: &SensorNoiseModel, seed: u64) -> NoiseParams {
    sample_training_params_with(model, &mut rng::seeded(seed))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainEstimate {
    pub params: NoiseParams,
    /// Gain fell outside the calibrated range.
    pub extrapolated: bool,
}

/// Inference-time noise estimate from the capture gain.
pub fn gain_to_params(model: &SensorNoiseModel, gain: f64) -> Result<GainEstimate> {
    if !(gain >= 1.0) {
        return Err(config_err!("gain must be >= 1, got {gain}"));
    }
    let a = model.gain_to_a.eval(gain).max(PARAM_FLOOR);
    let b = model.gain_to_b.eval(gain).max(PARAM_FLOOR);
    Ok(GainEstimate {
        params: NoiseParams { a, b },
        extrapolated: gain < model.gain_range.0 || gain > model.gain_range.1,
    })
}

pub fn ksigma<T: Real>(x: &Tensor<T>, p: &NoiseParams) -> Result<Tensor<T>> {
    let (s, o) = p.ksigma_coeffs()?;
    Ok(x.map(|v| T::lit(s * v.to_f64().unwrap_or(f64::NAN) + o)))
}

pub fn ksigma_inv<T: Real>(z: &Tensor<T>, p: &NoiseParams) -> Result<Tensor<T>> {
    let (s, o) = p.ksigma_coeffs()?;
    Ok(z.map(|v| T::lit((v.to_f64().unwrap_or(f64::NAN) - o) / s)))
}

/// One calibration capture: its gain and the patch stacks extracted from it.
#[derive(Clone, Debug)]
pub struct Capture {
    pub gain: f64,
    pub stacks: Vec<PatchStack>,
}

/// Fits `(a, b)` per capture and the per-sensor regressions across captures.
pub fn calibrate(captures: &[Capture]) -> Result<(SensorNoiseModel, Vec<NoiseParams>)> {
    let fits = captures
        .iter()
        .map(|c| fit_noise_params(&c.stacks))
        .collect::<Result<Vec<_>>>()?;
    let gains: Vec<f64> = captures.iter().map(|c| c.gain).collect();
    let a: Vec<f64> = fits.iter().map(|p| p.a).collect();
    let b: Vec<f64> = fits.iter().map(|p| p.b).collect();
    let la: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let ga = polyfit(&gains, &a, 1)?;
    let gb = polyfit(&gains, &b, 2)?;
    let ab = polyfit(&la, &lb, 1)?;
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let model = SensorNoiseModel {
        log_a_range: (min(&la), max(&la)),
        logb_line: Line {
            slope: ab[1],
            intercept: ab[0],
        },
        gain_to_a: Line {
            slope: ga[1],
            intercept: ga[0],
        },
        gain_to_b: Quadratic {
            c0: gb[0],
            c1: gb[1],
            c2: gb[2],
        },
        gain_range: (min(&gains), max(&gains)),
    };
    model.validate()?;
    Ok((model, fits))
}

/// Calibration manifest: captures with stack files (FDT1 tensors of samples).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationManifest {
    pub captures: Vec<CaptureEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptureEntry {
    pub gain: f64,
    pub stacks: Vec<StackEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackEntry {
    /// Path relative to the manifest directory.
    pub file: String,
    pub mean: f64,
}

/// Loads `manifest.json` and its stack tensors from `dir`.
pub fn load_calibration_dir(dir: &Path) -> Result<Vec<Capture>> {
    let manifest: CalibrationManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest
        .captures
        .iter()
        .map(|c| {
            let stacks = c
                .stacks
                .iter()
                .map(|s| {
                    let t = tio::read_tensor(&dir.join(&s.file))?;
                    Ok(PatchStack {
                        samples: t.into_vec(),
                        mean: s.mean,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Capture {
                gain: c.gain,
                stacks,
            })
        })
        .collect()
}
