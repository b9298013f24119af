//! Noise subrange model arrays: log-uniform partition of the `a` range,
//! hard routing by annotated noise level, and per-subrange training.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::fanet::Model;
use crate::train::{train, TrainConfig, TrainOutcome};

/// `n` contiguous log-uniform subranges of `[a_min, a_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubrangePartition {
    pub a_min: f64,
    pub a_max: f64,
    pub n: usize,
    /// `n + 1` ascending bounds; the ends equal `a_min` and `a_max` exactly.
    pub bounds: Vec<f64>,
}

/// Result of routing one noise level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selection {
    pub index: usize,
    /// The level fell outside the partition and was clamped to an end slot.
    pub clamped: bool,
}

pub fn partition(a_min: f64, a_max: f64, n: usize) -> Result<SubrangePartition> {
    if !(a_min > 0.0 && a_min < a_max && a_max.is_finite()) {
        return Err(config_err!(
            "noise range must satisfy 0 < a_min < a_max, got ({a_min}, {a_max})"
        ));
    }
    if n == 0 {
        return Err(config_err!("model count must be >= 1"));
    }
    let (lo, hi) = (a_min.ln(), a_max.ln());
    let mut bounds: Vec<f64> = (0..=n)
        .map(|i| (lo + i as f64 / n as f64 * (hi - lo)).exp())
        .collect();
    bounds[0] = a_min;
    bounds[n] = a_max;
    Ok(SubrangePartition {
        a_min,
        a_max,
        n,
        bounds,
    })
}

impl SubrangePartition {
    /// `(a_min_i, a_max_i)` of slot `i`.
    pub fn range(&self, i: usize) -> (f64, f64) {
        (self.bounds[i], self.bounds[i + 1])
    }

    /// Half-open slots `[b_i, b_{i+1})`, the last one closed; levels outside
    /// the range clamp to the nearest end.
    pub fn select(&self, a: f64) -> Selection {
        if a < self.bounds[0] {
            return Selection {
                index: 0,
                clamped: true,
            };
        }
        if a > self.bounds[self.n] {
            return Selection {
                index: self.n - 1,
                clamped: true,
            };
        }
        let index = self.bounds[1..self.n].partition_point(|&b| b <= a);
        Selection {
            index,
            clamped: false,
        }
    }
}

pub fn select_model(a: f64, p: &SubrangePartition) -> Selection {
    p.select(a)
}

/// On-disk description of a trained array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayManifest {
    pub partition: SubrangePartition,
    /// Checkpoint directories, relative to the manifest when not absolute.
    pub checkpoints: Vec<PathBuf>,
}

pub const ARRAY_MANIFEST: &str = "array.json";

impl ArrayManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.checkpoints.len() != m.partition.n || m.partition.bounds.len() != m.partition.n + 1 {
            return Err(config_err!(
                "{}: {} checkpoints and {} bounds for n = {}",
                path.display(),
                m.checkpoints.len(),
                m.partition.bounds.len(),
                m.partition.n
            ));
        }
        Ok(m)
    }
}

/// Loaded models with their routing partition.
#[derive(Clone, Debug)]
pub struct ModelArray {
    pub partition: SubrangePartition,
    pub models: Vec<Model>,
}

impl ModelArray {
    pub fn load(manifest: &Path) -> Result<Self> {
        let m = ArrayManifest::read(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let models = m
            .checkpoints
            .iter()
            .map(|c| Model::load(&base.join(c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            partition: m.partition,
            models,
        })
    }

    pub fn route(&self, a: f64) -> (&Model, Selection) {
        let s = self.partition.select(a);
        (&self.models[s.index], s)
    }
}

/// Trains one model per subrange into `<out_dir>/model_<i>` and writes the
/// array manifest. Each run uses the base config with the noise range
/// replaced by its slot.
pub fn train_array(
    base: &TrainConfig,
    p: &SubrangePartition,
) -> Result<(ArrayManifest, Vec<TrainOutcome>)> {
    let mut outcomes = Vec::with_capacity(p.n);
    let mut checkpoints = Vec::with_capacity(p.n);
    for i in 0..p.n {
        let (lo, hi) = p.range(i);
        let mut cfg = base.clone();
        cfg.noise.a_min = lo;
        cfg.noise.a_max = hi;
        cfg.out_dir = base.out_dir.join(format!("model_{i}"));
        let outcome = train(&cfg).map_err(|e| config_err!("subrange {i} ({lo:e}, {hi:e}): {e}"))?;
        checkpoints.push(
            outcome
                .checkpoint
                .strip_prefix(&base.out_dir)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| outcome.checkpoint.clone()),
        );
        outcomes.push(outcome);
    }
    let manifest = ArrayManifest {
        partition: p.clone(),
        checkpoints,
    };
    manifest.write(&base.out_dir.join(ARRAY_MANIFEST))?;
    Ok((manifest, outcomes))
}
