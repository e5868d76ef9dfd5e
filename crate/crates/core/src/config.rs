//! Codec and training configuration, read from plain `key=value` text.
//!
//! One key per line; `#` starts a comment. A bit interval can be given
//! either as `triple = c,m,f` or through the endpoints `n`, `n1_prime`,
//! `n1`, `n2`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::QuantStep;
use crate::metrics::LossConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

const CODEC_KEYS: &[&str] = &[
    "triple", "n", "n1_prime", "n1", "n2", "c_point", "c_voxel", "c_latent", "k_points", "k_group", "gamma",
    "evt_k", "evt_c", "evt_blocks", "latent_gain", "lambda", "alpha", "beta", "seed",
];
const TRAIN_KEYS: &[&str] = &[
    "epochs", "lr", "batch_size", "samples_per_epoch", "lambda_grid", "shape", "bits", "points", "data_seed",
    "dataset", "augment", "loss_log",
];

/// Parsed `key=value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("expected key=value, got {line:?}"),
                });
            };
            let k = k.trim().to_string();
            if !CODEC_KEYS.contains(&k.as_str()) && !TRAIN_KEYS.contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey(k));
            }
            entries.insert(k, v.trim().to_string());
        }
        Ok(ConfigMap { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
            }),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.value(key)?.unwrap_or(default))
    }
}

/// Channel widths and stage hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub c_point: usize,
    pub c_voxel: usize,
    pub c_latent: usize,
    /// Points generated per voxel at point synthesis.
    pub k_points: usize,
    /// Neighbors grouped per voxel at point analysis.
    pub k_group: usize,
    /// Offset scale of point synthesis.
    pub gamma: f64,
    pub evt_k: usize,
    pub evt_c: f64,
    pub evt_blocks: usize,
    /// Latents are scaled by this before quantization (a finer step).
    pub latent_gain: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            c_point: 64,
            c_voxel: 64,
            c_latent: 32,
            k_points: 4,
            k_group: 16,
            gamma: 1.5,
            evt_k: 16,
            evt_c: 1.0,
            evt_blocks: 3,
            latent_gain: 8.0,
        }
    }
}

/// One rate point: bit-interval endpoints plus model hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub n: u8,
    pub n1_prime: u8,
    pub n1: u8,
    pub n2: u8,
    pub stage: StageConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl CodecConfig {
    /// Interval `[c, m, f]` with `n = c + m + f`. `[n, 0, 0]` is pure octree coding.
    pub fn from_triple(c: u8, m: u8, f: u8) -> Result<Self, ConfigError> {
        let n = c as u32 + m as u32 + f as u32;
        if n == 0 || n > 30 {
            return Err(ConfigError::Invalid(format!("bit depth {n} out of range 1..=30")));
        }
        let (n1, n2) = (c, c + m);
        let pure = m == 0 && f == 0;
        if !pure && c == 0 {
            return Err(ConfigError::Invalid("the octree interval needs at least one bit".into()));
        }
        let cfg = CodecConfig {
            n: n as u8,
            n1_prime: if pure { n1 } else { n1 - 1 },
            n1,
            n2,
            stage: StageConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn triple(&self) -> (u8, u8, u8) {
        (self.n1, self.n2 - self.n1, self.n - self.n2)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.n1_prime <= self.n1 && self.n1 <= self.n2 && self.n2 <= self.n) {
            return bad(format!(
                "need n1' <= n1 <= n2 <= n, got {} {} {} {}",
                self.n1_prime, self.n1, self.n2, self.n
            ));
        }
        if self.pure_octree() {
            if self.n1_prime != self.n1 {
                return bad("pure octree configuration needs n1' = n1".into());
            }
        } else if self.n1 != self.n1_prime + 1 {
            return bad(format!("feature stream needs n1 - n1' = 1, got {}", self.n1 - self.n1_prime));
        }
        let s = &self.stage;
        if s.c_point == 0 || s.c_voxel == 0 || s.c_latent == 0 || s.k_points == 0 || s.k_group == 0 || s.evt_k == 0 {
            return bad("widths and neighbor counts must be positive".into());
        }
        if !(s.gamma > 0.0 && s.evt_c > 0.0 && s.latent_gain > 0.0) {
            return bad("gamma, evt_c and latent_gain must be positive".into());
        }
        let l = &self.loss;
        if !(l.alpha > 0.0 && l.beta > 0.0 && l.lambda >= 0.0) {
            return bad("alpha, beta must be positive and lambda non-negative".into());
        }
        Ok(())
    }

    pub fn point_stage(&self) -> bool {
        self.n2 < self.n
    }

    pub fn voxel_stage(&self) -> bool {
        self.n1 < self.n2
    }

    pub fn pure_octree(&self) -> bool {
        self.n1 == self.n && self.n2 == self.n
    }

    pub fn s1(&self) -> QuantStep {
        QuantStep::from_bits(self.n - self.n2)
    }

    pub fn s2(&self) -> QuantStep {
        QuantStep::from_bits(self.n2 - self.n1)
    }

    pub fn s3(&self) -> QuantStep {
        QuantStep::from_bits(self.n1 - self.n1_prime)
    }

    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        let mut cfg = if let Some(t) = map.get("triple") {
            let parts: Vec<u8> = t
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| ConfigError::BadValue {
                    key: "triple".into(),
                    value: t.into(),
                })?;
            if parts.len() != 3 {
                return Err(ConfigError::BadValue {
                    key: "triple".into(),
                    value: t.into(),
                });
            }
            CodecConfig::from_triple(parts[0], parts[1], parts[2])?
        } else {
            let need = |k: &str| -> Result<u8, ConfigError> {
                map.value(k)?.ok_or_else(|| ConfigError::Invalid(format!("missing key {k} (or triple)")))
            };
            CodecConfig {
                n: need("n")?,
                n1_prime: need("n1_prime")?,
                n1: need("n1")?,
                n2: need("n2")?,
                stage: StageConfig::default(),
                loss: LossConfig::default(),
                seed: 0,
            }
        };
        let d = StageConfig::default();
        cfg.stage = StageConfig {
            c_point: map.or("c_point", d.c_point)?,
            c_voxel: map.or("c_voxel", d.c_voxel)?,
            c_latent: map.or("c_latent", d.c_latent)?,
            k_points: map.or("k_points", d.k_points)?,
            k_group: map.or("k_group", d.k_group)?,
            gamma: map.or("gamma", d.gamma)?,
            evt_k: map.or("evt_k", d.evt_k)?,
            evt_c: map.or("evt_c", d.evt_c)?,
            evt_blocks: map.or("evt_blocks", d.evt_blocks)?,
            latent_gain: map.or("latent_gain", d.latent_gain)?,
        };
        let l = LossConfig::default();
        cfg.loss = LossConfig {
            lambda: map.or("lambda", l.lambda)?,
            alpha: map.or("alpha", l.alpha)?,
            beta: map.or("beta", l.beta)?,
        };
        cfg.seed = map.or("seed", 0)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        CodecConfig::from_map(&ConfigMap::parse(text)?)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let s = &self.stage;
        let mut out = String::new();
        let _ = writeln!(out, "n={}\nn1_prime={}\nn1={}\nn2={}", self.n, self.n1_prime, self.n1, self.n2);
        let _ = writeln!(
            out,
            "c_point={}\nc_voxel={}\nc_latent={}\nk_points={}\nk_group={}\ngamma={}\nevt_k={}\nevt_c={}\nevt_blocks={}\nlatent_gain={}",
            s.c_point, s.c_voxel, s.c_latent, s.k_points, s.k_group, s.gamma, s.evt_k, s.evt_c, s.evt_blocks, s.latent_gain
        );
        let _ = writeln!(
            out,
            "lambda={}\nalpha={}\nbeta={}\nseed={}",
            self.loss.lambda, self.loss.alpha, self.loss.beta, self.seed
        );
        out
    }
}

/// Synthetic training shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Torus,
    Plane,
    LidarRings,
}

impl FromStr for Shape {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "sphere" => Ok(Shape::Sphere),
            "torus" => Ok(Shape::Torus),
            "plane" => Ok(Shape::Plane),
            "lidar_rings" | "lidar" => Ok(Shape::LidarRings),
            _ => Err(ConfigError::BadValue {
                key: "shape".into(),
                value: s.into(),
            }),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Shape::Sphere => "sphere",
            Shape::Torus => "torus",
            Shape::Plane => "plane",
            Shape::LidarRings => "lidar_rings",
        })
    }
}

/// Where training clouds come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Synthetic {
        shape: Shape,
        bits: u8,
        points: usize,
        seed: u64,
    },
    /// A PLY file or a directory of PLY files.
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Augmented samples drawn per epoch.
    pub samples_per_epoch: usize,
    /// Random axis flips and permutations of each sample.
    pub augment: bool,
    pub lambda_grid: Vec<f64>,
    pub seed: u64,
    pub dataset: Dataset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 8e-4,
            batch_size: 8,
            samples_per_epoch: 8,
            augment: true,
            lambda_grid: Vec::new(),
            seed: 0,
            dataset: Dataset::Synthetic {
                shape: Shape::Sphere,
                bits: 8,
                points: 2000,
                seed: 7,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(ConfigError::Invalid("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.samples_per_epoch == 0 {
            return Err(ConfigError::Invalid("batch_size and samples_per_epoch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        let d = TrainConfig::default();
        let dataset = if let Some(p) = map.get("dataset") {
            Dataset::Path(PathBuf::from(p))
        } else {
            Dataset::Synthetic {
                shape: map.or("shape", Shape::Sphere)?,
                bits: map.or("bits", 8)?,
                points: map.or("points", 2000)?,
                seed: map.or("data_seed", 7)?,
            }
        };
        let lambda_grid = match map.get("lambda_grid") {
            None => Vec::new(),
            Some(v) => v
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| ConfigError::BadValue {
                    key: "lambda_grid".into(),
                    value: v.into(),
                })?,
        };
        let cfg = TrainConfig {
            epochs: map.or("epochs", d.epochs)?,
            lr: map.or("lr", d.lr)?,
            batch_size: map.or("batch_size", d.batch_size)?,
            samples_per_epoch: map.or("samples_per_epoch", d.samples_per_epoch)?,
            augment: map.or("augment", d.augment)?,
            lambda_grid,
            seed: map.or("seed", d.seed)?,
            dataset,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
