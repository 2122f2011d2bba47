//! Plain-text run configuration: one `key = value` per line, `#` comments.
//!
//! ```text
//! # training
//! slices = 3
//! patch = 39
//! beta = 0.5
//! synth.structure = rings
//! ablate.seeds = 0, 1, 2
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::ALLOWED_SLICE_COUNTS;
use crate::metrics::BettiProtocol;
use crate::synth::{Structure, SyntheticSpec};
use crate::train::{Refinement, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    /// Dataset directory written by `gen-data`.
    pub data_dir: PathBuf,
    /// The last `test_slices` slices of the volume are held out.
    pub test_slices: usize,
    pub threshold: f64,
    pub min_component: usize,
    pub betti: BettiProtocol,
    pub ablate_seeds: Vec<u64>,
    pub ablate_slices: Vec<usize>,
    tiling: bool,
    rings: usize,
    cell: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SyntheticSpec { depth: 16, ..SyntheticSpec::default() },
            data_dir: PathBuf::from("data"),
            test_slices: 4,
            threshold: 0.5,
            min_component: 10,
            betti: BettiProtocol::default(),
            ablate_seeds: vec![0, 1, 2],
            ablate_slices: vec![1, 3, 5],
            tiling: false,
            rings: 4,
            cell: 12,
        }
    }
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "slices",
    "patch",
    "beta",
    "sigma",
    "epsilon",
    "lr",
    "lr_halving_period",
    "epochs",
    "batch",
    "momentum",
    "fine_tune_lr",
    "fine_tune_epochs",
    "hidden",
    "kernel",
    "refinement",
    "synth.depth",
    "synth.height",
    "synth.width",
    "synth.structure",
    "synth.rings",
    "synth.cell",
    "synth.jitter",
    "synth.noise",
    "synth.break_prob",
    "synth.gap",
    "synth.flips",
    "data.dir",
    "data.test_slices",
    "eval.threshold",
    "eval.min_component",
    "eval.betti_patch",
    "eval.betti_samples",
    "eval.betti_seed",
    "eval.include_beta0",
    "ablate.seeds",
    "ablate.slices",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("`{key}`: empty list")));
    }
    Ok(items)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.synth.structure {
            Structure::Rings { count } => (self.tiling, self.rings) = (false, count),
            Structure::Tiling { cell } => (self.tiling, self.cell) = (true, cell),
        }
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => {
                t.seed = parse(key, value)?;
                s.seed = t.seed;
            }
            "slices" => t.slices = parse(key, value)?,
            "patch" => t.patch = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "sigma" => t.sigma = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "lr_halving_period" => t.lr_halving_period = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "fine_tune_lr" => t.fine_tune_lr = parse(key, value)?,
            "fine_tune_epochs" => t.fine_tune_epochs = parse(key, value)?,
            "hidden" => t.hidden = parse(key, value)?,
            "kernel" => t.kernel = parse(key, value)?,
            "refinement" => {
                t.refinement = match value {
                    "attention" => Refinement::Attention,
                    "none" => Refinement::None,
                    _ => return Err(Error::Config(format!("`{key}`: expected attention or none, got `{value}`"))),
                }
            }
            "synth.depth" => s.depth = parse(key, value)?,
            "synth.height" => s.height = parse(key, value)?,
            "synth.width" => s.width = parse(key, value)?,
            "synth.structure" => {
                self.tiling = match value {
                    "rings" => false,
                    "tiling" => true,
                    _ => return Err(Error::Config(format!("`{key}`: expected rings or tiling, got `{value}`"))),
                }
            }
            "synth.rings" => self.rings = parse(key, value)?,
            "synth.cell" => self.cell = parse(key, value)?,
            "synth.jitter" => s.jitter = parse(key, value)?,
            "synth.noise" => s.noise = parse(key, value)?,
            "synth.break_prob" => s.break_prob = parse(key, value)?,
            "synth.gap" => s.gap = parse(key, value)?,
            "synth.flips" => s.flips = parse_bool(key, value)?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.test_slices" => self.test_slices = parse(key, value)?,
            "eval.threshold" => self.threshold = parse(key, value)?,
            "eval.min_component" => self.min_component = parse(key, value)?,
            "eval.betti_patch" => self.betti.patch = parse(key, value)?,
            "eval.betti_samples" => self.betti.samples = parse(key, value)?,
            "eval.betti_seed" => self.betti.seed = parse(key, value)?,
            "eval.include_beta0" => self.betti.include_beta0 = parse_bool(key, value)?,
            "ablate.seeds" => self.ablate_seeds = parse_list(key, value)?,
            "ablate.slices" => self.ablate_slices = parse_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        self.synth.structure = if self.tiling {
            Structure::Tiling { cell: self.cell }
        } else {
            Structure::Rings { count: self.rings }
        };
        Ok(())
    }

    /// Serializes every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let list = |v: Vec<String>| v.join(", ");
        let values: Vec<String> = vec![
            t.seed.to_string(),
            t.slices.to_string(),
            t.patch.to_string(),
            t.beta.to_string(),
            t.sigma.to_string(),
            t.epsilon.to_string(),
            t.lr.to_string(),
            t.lr_halving_period.to_string(),
            t.epochs.to_string(),
            t.batch.to_string(),
            t.momentum.to_string(),
            t.fine_tune_lr.to_string(),
            t.fine_tune_epochs.to_string(),
            t.hidden.to_string(),
            t.kernel.to_string(),
            match t.refinement {
                Refinement::Attention => "attention".into(),
                Refinement::None => "none".into(),
            },
            s.depth.to_string(),
            s.height.to_string(),
            s.width.to_string(),
            match s.structure {
                Structure::Tiling { .. } => "tiling".into(),
                Structure::Rings { .. } => "rings".into(),
            },
            match s.structure {
                Structure::Rings { count } => count.to_string(),
                Structure::Tiling { .. } => self.rings.to_string(),
            },
            match s.structure {
                Structure::Tiling { cell } => cell.to_string(),
                Structure::Rings { .. } => self.cell.to_string(),
            },
            s.jitter.to_string(),
            s.noise.to_string(),
            s.break_prob.to_string(),
            s.gap.to_string(),
            s.flips.to_string(),
            self.data_dir.display().to_string(),
            self.test_slices.to_string(),
            self.threshold.to_string(),
            self.min_component.to_string(),
            self.betti.patch.to_string(),
            self.betti.samples.to_string(),
            self.betti.seed.to_string(),
            self.betti.include_beta0.to_string(),
            list(self.ablate_seeds.iter().map(|v| v.to_string()).collect()),
            list(self.ablate_slices.iter().map(|v| v.to_string()).collect()),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.test_slices == 0 || self.test_slices >= self.synth.depth {
            return Err(Error::param("data.test_slices", "must leave slices on both sides of the split"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::param("eval.threshold", "must lie in [0, 1]"));
        }
        if self.betti.patch == 0 || self.betti.samples == 0 {
            return Err(Error::param("eval.betti_patch", "patch size and sample count must be >= 1"));
        }
        if let Some(&l) = self.ablate_slices.iter().find(|l| !ALLOWED_SLICE_COUNTS.contains(l)) {
            return Err(Error::param("ablate.slices", format!("{l} not in {{1,3,5}}")));
        }
        Ok(())
    }
}
