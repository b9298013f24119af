//! Clean RAW datasets, noisy/clean pairs, and the procedural scene generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayer::io::{read_raw, write_raw};
use crate::bayer::{simple_unprocess, BayerImage, IspParams, RgbImage};
use crate::error::{config_err, Error, Result};
use crate::noise::{sample_noise, sample_training_params_with, SensorNoiseModel};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub image: BayerImage,
}

/// Noisy capture and its clean reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub noisy: BayerImage,
    pub clean: BayerImage,
}

/// One line of a pair manifest; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub name: String,
    pub noisy: PathBuf,
    pub clean: PathBuf,
}

pub const PAIR_MANIFEST: &str = "pairs.json";

/// Smooth gradients, flat-colored rectangles and disks, and low-frequency
/// ripples, in display-referred RGB.
pub fn scene(seed: u64, height: usize, width: usize) -> RgbImage {
    let mut r = rng::seeded(seed);
    let color = |r: &mut rng::Rng| [0; 3].map(|_: i32| r.random_range(0.05f32..0.95));
    let base = color(&mut r);
    let gx = [0; 3].map(|_: i32| r.random_range(-0.3f32..0.3));
    let gy = [0; 3].map(|_: i32| r.random_range(-0.3f32..0.3));
    enum Shape {
        Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
        Disk { cy: f32, cx: f32, rad: f32 },
    }
    let shapes: Vec<(Shape, [f32; 3])> = (0..r.random_range(6..14))
        .map(|_| {
            let (cy, cx) = (
                r.random_range(0.0..height as f32),
                r.random_range(0.0..width as f32),
            );
            let size = r.random_range(0.05f32..0.35) * height.min(width) as f32;
            let shape = if r.random_bool(0.5) {
                let aspect = r.random_range(0.5f32..2.0);
                Shape::Rect {
                    y0: cy - size / 2.0,
                    x0: cx - size * aspect / 2.0,
                    y1: cy + size / 2.0,
                    x1: cx + size * aspect / 2.0,
                }
            } else {
                Shape::Disk {
                    cy,
                    cx,
                    rad: size / 2.0,
                }
            };
            (shape, color(&mut r))
        })
        .collect();
    let ripples: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                r.random_range(0.01f32..0.06),
                r.random_range(0.01f32..0.06),
                r.random_range(0.0f32..std::f32::consts::TAU),
                r.random_range(0.02f32..0.06),
            )
        })
        .collect();
    let mut data = vec![0.0f32; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f32 / height as f32, x as f32 / width as f32);
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = base[c] + gx[c] * (fx - 0.5) + gy[c] * (fy - 0.5);
            }
            for (shape, col) in &shapes {
                let (yy, xx) = (y as f32 + 0.5, x as f32 + 0.5);
                let inside = match *shape {
                    Shape::Rect { y0, x0, y1, x1 } => yy >= y0 && yy < y1 && xx >= x0 && xx < x1,
                    Shape::Disk { cy, cx, rad } => {
                        (yy - cy).powi(2) + (xx - cx).powi(2) < rad * rad
                    }
                };
                if inside {
                    px = *col;
                }
            }
            let ripple: f32 = ripples
                .iter()
                .map(|&(ky, kx, ph, amp)| amp * (ky * y as f32 + kx * x as f32 + ph).sin())
                .sum();
            for c in 0..3 {
                data[c * height * width + y * width + x] = (px[c] + ripple).clamp(0.02, 0.98);
            }
        }
    }
    RgbImage {
        height,
        width,
        data,
    }
}

/// Clean RGGB frame unprocessed from [`scene`].
pub fn clean_raw(seed: u64, height: usize, width: usize) -> Result<BayerImage> {
    simple_unprocess(&scene(seed, height, width), &IspParams::default())
}

/// `count` clean frames named `synth_0000`, `synth_0001`, ...
pub fn synthetic_dataset(
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<NamedImage>> {
    (0..count)
        .map(|i| {
            Ok(NamedImage {
                name: format!("synth_{i:04}"),
                image: clean_raw(rng::derive(seed, 0x5ce7e, i as u64), height, width)?,
            })
        })
        .collect()
}

/// Noisy copies with noise drawn from `model`; the noisy frames carry their
/// `(a, b)` annotation.
pub fn make_pairs(clean: &[NamedImage], model: &SensorNoiseModel, seed: u64) -> Result<Vec<Pair>> {
    clean
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut r = rng::seeded(rng::derive(seed, 0x9a125, i as u64));
            let p = sample_training_params_with(model, &mut r);
            let noisy = sample_noise(&img.image, &p, r.random())?;
            Ok(Pair {
                name: img.name.clone(),
                noisy,
                clean: img.image.clone(),
            })
        })
        .collect()
}

/// True for names in the held-out tenth (first hash byte divisible by 10).
pub fn is_held_out(name: &str) -> bool {
    Sha256::digest(name.as_bytes())[0] % 10 == 0
}

/// Splits into (train, held-out) by name hash.
pub fn split(images: Vec<NamedImage>) -> (Vec<NamedImage>, Vec<NamedImage>) {
    images.into_iter().partition(|i| !is_held_out(&i.name))
}

/// Every `*.pgm` in `dir` (with its sidecar), sorted by file name.
pub fn load_raw_dir(dir: &Path) -> Result<Vec<NamedImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| config_err!("unreadable file name {}", p.display()))?
                .to_string();
            Ok(NamedImage {
                name,
                image: read_raw(&p)?,
            })
        })
        .collect()
}

pub fn write_raw_dir(dir: &Path, images: &[NamedImage]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    images
        .iter()
        .map(|i| {
            let p = dir.join(format!("{}.pgm", i.name));
            write_raw(&i.image, &p)?;
            Ok(p)
        })
        .collect()
}

/// Writes `<name>_noisy.pgm`, `<name>_clean.pgm` and a `pairs.json` manifest.
pub fn write_pairs(dir: &Path, pairs: &[Pair]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        let noisy = PathBuf::from(format!("{}_noisy.pgm", p.name));
        let clean = PathBuf::from(format!("{}_clean.pgm", p.name));
        write_raw(&p.noisy, &dir.join(&noisy))?;
        write_raw(&p.clean, &dir.join(&clean))?;
        entries.push(PairEntry {
            name: p.name.clone(),
            noisy,
            clean,
        });
    }
    let manifest = dir.join(PAIR_MANIFEST);
    fs::write(&manifest, serde_json::to_string_pretty(&entries)?)?;
    Ok(manifest)
}

/// Reads a pair manifest file, or `pairs.json` inside a directory.
pub fn load_pairs(path: &Path) -> Result<Vec<Pair>> {
    let manifest = if path.is_dir() {
        path.join(PAIR_MANIFEST)
    } else {
        path.to_path_buf()
    };
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries: Vec<PairEntry> = serde_json::from_str(&fs::read_to_string(&manifest)?)?;
    entries
        .into_iter()
        .map(|e| {
            let noisy = read_raw(&base.join(&e.noisy))?;
            let clean = read_raw(&base.join(&e.clean))?;
            if (noisy.height(), noisy.width()) != (clean.height(), clean.width()) {
                return Err(Error::Shape(format!(
                    "pair {}: noisy {}x{} vs clean {}x{}",
                    e.name,
                    noisy.height(),
                    noisy.width(),
                    clean.height(),
                    clean.width()
                )));
            }
            Ok(Pair {
                name: e.name,
                noisy,
                clean,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayer::CfaPattern;

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = scene(3, 32, 48);
        assert_eq!(a, scene(3, 32, 48));
        assert_ne!(a, scene(4, 32, 48));
        assert!(a.data.iter().all(|v| (0.02..=0.98).contains(v)));
        let raw = clean_raw(3, 32, 48).unwrap();
        assert_eq!(raw.pattern, CfaPattern::Rggb);
        assert!(raw.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn split_is_stable_and_roughly_a_tenth() {
        let names: Vec<String> = (0..1000).map(|i| format!("synth_{i:04}")).collect();
        let held = names.iter().filter(|n| is_held_out(n)).count();
        assert!((60..=140).contains(&held), "{held}");
        let imgs = synthetic_dataset(64, 16, 16, 1).unwrap();
        let (tr, ho) = split(imgs.clone());
        assert_eq!(tr.len() + ho.len(), 64);
        assert!(!ho.is_empty());
        assert_eq!(split(imgs), (tr, ho));
    }

    #[test]
    fn pairs_round_trip_on_disk() {
        let clean = synthetic_dataset(2, 16, 20, 5).unwrap();
        let pairs = make_pairs(&clean, &SensorNoiseModel::default(), 9).unwrap();
        assert!(pairs.iter().all(|p| p.noisy.meta.noise.is_some()));
        let dir = tempfile::tempdir().unwrap();
        write_pairs(dir.path(), &pairs).unwrap();
        let back = load_pairs(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].name, pairs[1].name);
        assert_eq!(back[0].noisy.meta.noise, pairs[0].noisy.meta.noise);
        let err = back[0]
            .clean
            .data()
            .iter()
            .zip(pairs[0].clean.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err <= 1.0 / 65535.0);
        let raws = write_raw_dir(&dir.path().join("clean"), &clean).unwrap();
        assert_eq!(raws.len(), 2);
        assert_eq!(
            load_raw_dir(&dir.path().join("clean")).unwrap()[0].name,
            "synth_0000"
        );
    }
}
