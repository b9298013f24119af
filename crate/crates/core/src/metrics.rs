//! PSNR and SSIM in the RAW and RGB domains, and dataset evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bayer::{isp, pack, unify_bayer, unpack_sample, BayerImage, IspParams};
use crate::dataset::Pair;
use crate::error::{config_err, shape_err, Error, Result};
use crate::fanet::Model;
use crate::noise::{gain_to_params, ksigma, ksigma_inv, NoiseParams, SensorNoiseModel};
use crate::nsma::ModelArray;

/// `10 log10(peak^2 / mse)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err!("psnr: {} vs {} values", a.len(), b.len()));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

fn gaussian(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Mean Gaussian-windowed SSIM over all windows of all planes.
/// `a` and `b` hold `planes` planes of `h x w`.
pub fn ssim_planes(
    a: &[f32],
    b: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    p: &SsimParams,
) -> Result<f64> {
    if a.len() != b.len() || a.len() != planes * h * w || planes == 0 {
        return Err(shape_err!(
            "ssim: {} vs {} values for {planes}x{h}x{w}",
            a.len(),
            b.len()
        ));
    }
    if h < p.window || w < p.window {
        return Err(shape_err!(
            "ssim: {h}x{w} image is smaller than the {} window",
            p.window
        ));
    }
    let k = gaussian(p.window, p.sigma);
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..planes {
        let pa: Vec<f64> = a[c * h * w..(c + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let pb: Vec<f64> = b[c * h * w..(c + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let aa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let bb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let ab = filter_valid(&prod(&pa, &pb), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = (aa[i] - ma * ma).max(0.0);
            let vb = (bb[i] - mb * mb).max(0.0);
            let cov = ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}

pub fn raw_psnr(a: &BayerImage, b: &BayerImage) -> Result<f64> {
    same_size(a, b)?;
    psnr(a.data(), b.data(), 1.0)
}

pub fn raw_ssim(a: &BayerImage, b: &BayerImage) -> Result<f64> {
    same_size(a, b)?;
    ssim_planes(
        a.data(),
        b.data(),
        1,
        a.height(),
        a.width(),
        &SsimParams::default(),
    )
}

fn same_size(a: &BayerImage, b: &BayerImage) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(shape_err!(
            "{}x{} vs {}x{} frames",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

/// PSNR serialized as a number, or the string `"inf"` for identical pairs.
pub mod psnr_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Num {
            F(f64),
            S(String),
        }
        match Num::deserialize(d)? {
            Num::F(v) => Ok(v),
            Num::S(s) if s == "inf" => Ok(f64::INFINITY),
            Num::S(s) => Err(serde::de::Error::custom(format!("bad PSNR value {s:?}"))),
        }
    }
}

/// The four quality numbers for one image or a dataset mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(with = "psnr_serde")]
    pub raw_psnr: f64,
    pub raw_ssim: f64,
    #[serde(with = "psnr_serde")]
    pub rgb_psnr: f64,
    pub rgb_ssim: f64,
}

impl MetricRow {
    fn mean(rows: &[MetricRow]) -> MetricRow {
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        MetricRow {
            raw_psnr: avg(|r| r.raw_psnr),
            raw_ssim: avg(|r| r.raw_ssim),
            rgb_psnr: avg(|r| r.rgb_psnr),
            rgb_ssim: avg(|r| r.rgb_ssim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub name: String,
    pub a: f64,
    pub b: f64,
    /// Array slot that handled the image (0 for a single model).
    pub model_index: usize,
    /// Noise level fell outside the array's range and was clamped.
    pub clamped: bool,
    pub model: MetricRow,
    pub input: MetricRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Dataset means of the denoised output.
    pub model: MetricRow,
    /// Dataset means of the noisy input.
    pub input: MetricRow,
    pub gmacs_per_mp: f64,
    pub images: Vec<ImageRow>,
}

pub const CSV_HEADER: &str = "name,kind,raw_psnr,raw_ssim,rgb_psnr,rgb_ssim,gmacs_per_mp";

impl MetricReport {
    /// One row per image and kind (`model` / `input`), then the two means.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(CSV_HEADER);
        s.push('\n');
        let mut row = |name: &str, kind: &str, m: &MetricRow| {
            let _ = writeln!(
                s,
                "{name},{kind},{},{},{},{},{}",
                fmt_psnr(m.raw_psnr),
                m.raw_ssim,
                fmt_psnr(m.rgb_psnr),
                m.rgb_ssim,
                self.gmacs_per_mp
            );
        };
        for img in &self.images {
            row(&img.name, "model", &img.model);
            row(&img.name, "input", &img.input);
        }
        row("mean", "model", &self.model);
        row("mean", "input", &self.input);
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(self)?,
        )?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        v.to_string()
    }
}

/// A single model or a noise-subrange array.
#[derive(Clone, Debug)]
pub enum Denoiser {
    Single(Model),
    Array(ModelArray),
}

impl Denoiser {
    /// Model for noise level `a`, its array slot, and whether `a` was clamped.
    pub fn route(&self, a: f64) -> (&Model, usize, bool) {
        match self {
            Denoiser::Single(m) => (m, 0, false),
            Denoiser::Array(arr) => {
                let sel = arr.partition.select(a);
                (&arr.models[sel.index], sel.index, sel.clamped)
            }
        }
    }

    pub fn bayer_multiple(&self) -> usize {
        match self {
            Denoiser::Single(m) => m.config.bayer_multiple(),
            Denoiser::Array(arr) => arr
                .models
                .iter()
                .map(|m| m.config.bayer_multiple())
                .max()
                .unwrap_or(2),
        }
    }

    pub fn gmacs_per_mp(&self) -> f64 {
        let m = match self {
            Denoiser::Single(m) => m,
            Denoiser::Array(arr) => &arr.models[0],
        };
        m.gmacs_per_mp(256, 256)
    }
}

/// Noise level of a capture: its `(a, b)` annotation, else the gain mapped
/// through `sensor`.
pub fn noise_of(img: &BayerImage, sensor: Option<&SensorNoiseModel>) -> Result<NoiseParams> {
    if let Some(p) = img.meta.noise {
        return Ok(p);
    }
    match sensor {
        Some(s) => Ok(gain_to_params(s, img.meta.gain as f64)?.params),
        None => Err(config_err!(
            "frame carries no (a, b) annotation and no sensor model was given"
        )),
    }
}

/// Crops to the RGGB phase and to sides divisible by `multiple`.
pub fn prepare(img: &BayerImage, multiple: usize) -> Result<BayerImage> {
    let u = unify_bayer(img)?;
    let (h, w) = (
        u.height() / multiple * multiple,
        u.width() / multiple * multiple,
    );
    if h == 0 || w == 0 {
        return Err(shape_err!(
            "{}x{} frame is smaller than {multiple}",
            u.height(),
            u.width()
        ));
    }
    u.crop(0, 0, h, w)
}

/// Runs a model on one RGGB frame whose sides fit the model: k-sigma in,
/// network, inverse k-sigma out, clipped to `[0, 1]`.
pub fn denoise_frame(model: &Model, noisy: &BayerImage, p: &NoiseParams) -> Result<BayerImage> {
    let x = ksigma(&pack(noisy)?, p)?;
    let y = ksigma_inv(&model.denoise(&x)?, p)?;
    let mut out = unpack_sample(&y, 0, noisy.meta.clone())?;
    out.clip();
    Ok(out)
}

/// Four metrics of `test` against `reference`.
pub fn metric_row(
    test: &BayerImage,
    reference: &BayerImage,
    isp_params: &IspParams,
) -> Result<MetricRow> {
    let (rt, rr) = (isp(test, isp_params)?, isp(reference, isp_params)?);
    Ok(MetricRow {
        raw_psnr: raw_psnr(test, reference)?,
        raw_ssim: raw_ssim(test, reference)?,
        rgb_psnr: psnr(&rt.data, &rr.data, 1.0)?,
        rgb_ssim: ssim_planes(
            &rt.data,
            &rr.data,
            3,
            rt.height,
            rt.width,
            &SsimParams::default(),
        )?,
    })
}

/// Denoises every pair and reports model and noisy-input metrics against the
/// clean frames. Rows are sorted by name so the result does not depend on
/// input order.
pub fn evaluate(
    denoiser: &Denoiser,
    pairs: &[Pair],
    isp_params: &IspParams,
    sensor: Option<&SensorNoiseModel>,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let mut sorted: Vec<&Pair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let multiple = denoiser.bayer_multiple();
    let mut images = Vec::with_capacity(sorted.len());
    for pair in sorted {
        let p = noise_of(&pair.noisy, sensor).map_err(|e| config_err!("{}: {e}", pair.name))?;
        let noisy = prepare(&pair.noisy, multiple)?;
        let clean = prepare(&pair.clean, multiple)?;
        same_size(&noisy, &clean).map_err(|e| shape_err!("{}: {e}", pair.name))?;
        let (model, model_index, clamped) = denoiser.route(p.a);
        let out = denoise_frame(model, &noisy, &p)?;
        images.push(ImageRow {
            name: pair.name.clone(),
            a: p.a,
            b: p.b,
            model_index,
            clamped,
            model: metric_row(&out, &clean, isp_params)?,
            input: metric_row(&noisy, &clean, isp_params)?,
        });
    }
    let model_rows: Vec<MetricRow> = images.iter().map(|r| r.model).collect();
    let input_rows: Vec<MetricRow> = images.iter().map(|r| r.input).collect();
    Ok(MetricReport {
        model: MetricRow::mean(&model_rows),
        input: MetricRow::mean(&input_rows),
        gmacs_per_mp: denoiser.gmacs_per_mp(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayer::CfaPattern;
    use crate::dataset::{make_pairs, synthetic_dataset};
    use crate::fanet::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn psnr_closed_forms() {
        let a = vec![0.5f32; 64];
        let b = vec![0.6f32; 64];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        let c = vec![0.55f32; 64];
        let half = psnr(&a, &c, 1.0).unwrap();
        assert!((half - p - 20.0 * 2f64.log10()).abs() < 1e-4);
        assert!(psnr(&a, &b[..3], 1.0).is_err());
    }

    #[test]
    fn ssim_closed_forms() {
        let p = SsimParams::default();
        let a = vec![0.5f32; 16 * 16];
        let b = vec![0.6f32; 16 * 16];
        assert!((ssim_planes(&a, &a, 1, 16, 16, &p).unwrap() - 1.0).abs() < 1e-12);
        let (m1, m2, c1) = (0.5f64, 0.6f64, 1e-4);
        let want = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        let got = ssim_planes(&a, &b, 1, 16, 16, &p).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!(ssim_planes(&a[..100], &b[..100], 1, 10, 10, &p).is_err());
    }

    fn textured(seed: u64, amp: f32) -> Vec<f32> {
        (0..24 * 24)
            .map(|i| {
                0.5 + amp * ((i as f32 * 0.37 + seed as f32).sin() + ((i / 24) as f32 * 0.21).cos())
                    / 2.0
            })
            .collect()
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let p = SsimParams::default();
        let a = textured(1, 0.3);
        let b = textured(2, 0.2);
        let ab = ssim_planes(&a, &b, 1, 24, 24, &p).unwrap();
        let ba = ssim_planes(&b, &a, 1, 24, 24, &p).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..1.0).contains(&ab));
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = textured(3, 0.2);
        let mut prev = f64::INFINITY;
        for k in 1..6 {
            let noisy: Vec<f32> = base
                .iter()
                .enumerate()
                .map(|(i, v)| v + 0.01 * k as f32 * if i % 2 == 0 { 1.0 } else { -1.0 })
                .collect();
            let p = psnr(&base, &noisy, 1.0).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    proptest! {
        #[test]
        fn ssim_never_exceeds_one(seed in 0u64..1000, amp in 0.0f32..0.4) {
            let a = textured(seed, 0.3);
            let b = textured(seed + 1, amp);
            let s = ssim_planes(&a, &b, 1, 24, 24, &SsimParams::default()).unwrap();
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        }
    }

    #[test]
    fn report_serializes_infinite_psnr() {
        let row = MetricRow {
            raw_psnr: f64::INFINITY,
            raw_ssim: 1.0,
            rgb_psnr: 31.5,
            rgb_ssim: 0.9,
        };
        let s = serde_json::to_string(&row).unwrap();
        assert!(s.contains("\"raw_psnr\":\"inf\""), "{s}");
        let back: MetricRow = serde_json::from_str(&s).unwrap();
        assert_eq!(back, row);
    }

    fn pairs(n: usize) -> Vec<Pair> {
        let clean = synthetic_dataset(n, 32, 40, 2).unwrap();
        make_pairs(&clean, &SensorNoiseModel::default(), 4).unwrap()
    }

    #[test]
    fn identity_model_reproduces_input_rows() {
        let model = Model::init(ModelConfig::default(), 1).unwrap();
        let report = evaluate(
            &Denoiser::Single(model),
            &pairs(3),
            &IspParams::default(),
            None,
        )
        .unwrap();
        assert_eq!(report.images.len(), 3);
        for r in &report.images {
            assert!((r.model.raw_psnr - r.input.raw_psnr).abs() < 1e-4, "{r:?}");
            assert!((r.model.rgb_ssim - r.input.rgb_ssim).abs() < 1e-5);
        }
        let mean: f64 = report.images.iter().map(|r| r.input.raw_ssim).sum::<f64>() / 3.0;
        assert!((mean - report.input.raw_ssim).abs() < 1e-12);
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 1 + 3 * 2 + 2);
    }

    #[test]
    fn clean_against_itself_is_perfect() {
        let mut ps = pairs(2);
        for p in &mut ps {
            let meta = p.noisy.meta.clone();
            p.noisy = p.clean.clone();
            p.noisy.meta = meta;
        }
        let model = Model::init(ModelConfig::default(), 1).unwrap();
        let report = evaluate(&Denoiser::Single(model), &ps, &IspParams::default(), None).unwrap();
        assert_eq!(report.input.raw_psnr, f64::INFINITY);
        assert!((report.input.raw_ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_order_independent_and_checks_annotations() {
        let model = Model::init(ModelConfig::default(), 1).unwrap();
        let d = Denoiser::Single(model);
        let mut ps = pairs(3);
        let a = evaluate(&d, &ps, &IspParams::default(), None).unwrap();
        ps.reverse();
        let b = evaluate(&d, &ps, &IspParams::default(), None).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            evaluate(&d, &[], &IspParams::default(), None),
            Err(Error::Usage(_))
        ));
        ps[0].noisy.meta.noise = None;
        assert!(evaluate(&d, &ps, &IspParams::default(), None).is_err());
        ps[0].noisy.meta.gain = 4.0;
        evaluate(
            &d,
            &ps,
            &IspParams::default(),
            Some(&SensorNoiseModel::default()),
        )
        .unwrap();
    }

    #[test]
    fn prepare_crops_phase_and_multiple() {
        let img = BayerImage::from_fn(37, 45, CfaPattern::Gbrg, |y, x| (y + x) as f32 / 100.0);
        let p = prepare(&img, 8).unwrap();
        assert_eq!((p.height(), p.width()), (32, 40));
        assert_eq!(p.pattern, CfaPattern::Rggb);
    }
}
