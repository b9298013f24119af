//! RAW frames on disk: 16-bit PGM plus a JSON sidecar; RGB as PPM.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{BayerImage, BayerMeta, CfaPattern, RgbImage};
use crate::error::{config_err, Error, Result};
use crate::noise::NoiseParams;

/// Capture description stored next to each PGM as `<stem>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub pattern: CfaPattern,
    #[serde(default = "one")]
    pub gain: f32,
    #[serde(default)]
    pub black_level: u16,
    #[serde(default = "white")]
    pub white_level: u16,
    #[serde(default = "default_wb")]
    pub wb_gains: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseParams>,
}

fn one() -> f32 {
    1.0
}

fn white() -> u16 {
    u16::MAX
}

fn default_wb() -> [f32; 3] {
    super::IspParams::DEFAULT_WB
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

/// Reads a 16-bit PGM and its sidecar, normalizing DNs to `[0, 1]`.
pub fn read_raw(pgm: &Path) -> Result<BayerImage> {
    let side: RawSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(pgm))?)?;
    if side.white_level <= side.black_level {
        return Err(config_err!(
            "{}: white level {} must exceed black level {}",
            pgm.display(),
            side.white_level,
            side.black_level
        ));
    }
    let img = image::open(pgm)?.into_luma16();
    let (w, h) = img.dimensions();
    let range = (side.white_level - side.black_level) as f32;
    let data = img
        .into_raw()
        .into_iter()
        .map(|dn| ((dn.saturating_sub(side.black_level)) as f32 / range).clamp(0.0, 1.0))
        .collect();
    BayerImage::new(
        h as usize,
        w as usize,
        data,
        side.pattern,
        BayerMeta {
            gain: side.gain,
            noise: side.noise,
            wb_gains: side.wb_gains,
        },
    )
}

/// Writes a frame as a full-range 16-bit PGM (black 0, white 65535) plus sidecar.
pub fn write_raw(img: &BayerImage, pgm: &Path) -> Result<()> {
    let data: Vec<u16> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * u16::MAX as f32).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, data)
            .ok_or_else(|| Error::Format("bayer buffer size mismatch".into()))?;
    buf.save_with_format(pgm, image::ImageFormat::Pnm)?;
    let side = RawSidecar {
        pattern: img.pattern,
        gain: img.meta.gain,
        black_level: 0,
        white_level: u16::MAX,
        wb_gains: img.meta.wb_gains,
        noise: img.meta.noise,
    };
    fs::write(sidecar_path(pgm), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

/// Writes RGB as binary PPM, 8 or 16 bits per channel.
pub fn write_ppm(rgb: &RgbImage, path: &Path, sixteen_bit: bool) -> Result<()> {
    let (h, w) = (rgb.height, rgb.width);
    let interleaved =
        (0..h * w).flat_map(|i| (0..3).map(move |c| rgb.data[c * h * w + i].clamp(0.0, 1.0)));
    if sixteen_bit {
        let data: Vec<u16> = interleaved.map(|v| (v * 65535.0).round() as u16).collect();
        let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data)
            .ok_or_else(|| Error::Format("rgb buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Pnm)?;
    } else {
        let data: Vec<u8> = interleaved.map(|v| (v * 255.0).round() as u8).collect();
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, data)
            .ok_or_else(|| Error::Format("rgb buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Pnm)?;
    }
    Ok(())
}
