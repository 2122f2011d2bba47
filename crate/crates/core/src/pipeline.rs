//! End-to-end commands: data generation, training, attention export,
//! evaluation and the ablation grid.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::attention::{tile_and_stitch, tile_origins, TopologyAttention};
use crate::config::RunConfig;
use crate::convlstm::{forward, ConvLSTMParams};
use crate::error::{Error, Result};
use crate::field::{threshold, BinaryMask2D, ScalarField2D, SliceStack};
use crate::io::{
    history_csv, metrics_csv, read_checkpoint, read_tensor, write_checkpoint, write_pgm, write_ppm_overlay,
    write_tensor, write_text, CheckpointMeta, MetricRow, RawTensor,
};
use crate::metrics::{adapted_rand_index, betti_error, dice, label_regions, remove_small_components, variation_of_information};
use crate::synth::{gen_data, SyntheticVolume, IMAGE_FILE, MEMBRANE_FILE};
use crate::train::{predict_center, train_backbone, train_tacnet, Refinement, Sample, Stage, TrainConfig};

pub const BACKBONE_CHECKPOINT: &str = "backbone.ckpt";
pub const TACNET_CHECKPOINT: &str = "tacnet.ckpt";

/// Image and ground-truth membrane volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image: Vec<ScalarField2D<f64>>,
    pub membrane: Vec<ScalarField2D<f64>>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let image = read_tensor(dir.join(IMAGE_FILE))?.to_fields()?;
        let membrane = read_tensor(dir.join(MEMBRANE_FILE))?.to_fields()?;
        Self::new(image, membrane)
    }

    pub fn new(image: Vec<ScalarField2D<f64>>, membrane: Vec<ScalarField2D<f64>>) -> Result<Self> {
        if image.is_empty() || image.len() != membrane.len() {
            return Err(Error::Shape(format!("{} image slices vs {} membrane slices", image.len(), membrane.len())));
        }
        let dims = image[0].dims();
        if image.iter().chain(&membrane).any(|f| f.dims() != dims) {
            return Err(Error::Shape("slices differ in size".into()));
        }
        if membrane.iter().any(|m| m.values().iter().any(|&v| v != 0.0 && v != 1.0)) {
            return Err(Error::Value("membrane volume must be binary".into()));
        }
        Ok(Self { image, membrane })
    }

    pub fn from_volume(v: &SyntheticVolume) -> Result<Self> {
        Self::new(v.image.clone(), v.membrane_fields())
    }

    pub fn depth(&self) -> usize {
        self.image.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image[0].dims()
    }

    pub fn masks(&self, range: std::ops::Range<usize>) -> Vec<BinaryMask2D> {
        self.membrane[range].iter().map(|m| threshold(m, 0.5)).collect()
    }
}

/// `l` slices centered on `z`, replicate-padded at the ends of `lo..hi`.
pub fn window<T: crate::Real>(
    volume: &[ScalarField2D<T>],
    z: usize,
    slices: usize,
    lo: usize,
    hi: usize,
) -> Result<SliceStack<T>> {
    let half = slices as isize / 2;
    let picked = (-half..=half)
        .map(|d| {
            let i = (z as isize + d).clamp(lo as isize, hi as isize - 1) as usize;
            volume[i].clone()
        })
        .collect();
    SliceStack::new(picked)
}

fn check_patch(patch: usize, (h, w): (usize, usize)) -> Result<()> {
    if patch > h || patch > w {
        return Err(Error::param("patch", format!("{patch} exceeds the {h}x{w} slices")));
    }
    Ok(())
}

/// Training samples: every slice in `range` as a window center, cut into
/// the fixed tile grid.
pub fn build_samples(data: &Dataset, range: std::ops::Range<usize>, slices: usize, patch: usize) -> Result<Vec<Sample<f64>>> {
    let (h, w) = data.dims();
    check_patch(patch, (h, w))?;
    let (lo, hi) = (range.start, range.end);
    let mut out = Vec::new();
    for z in range {
        let input = window(&data.image, z, slices, lo, hi)?;
        let target = window(&data.membrane, z, slices, lo, hi)?;
        for &r in &tile_origins(h, patch) {
            for &c in &tile_origins(w, patch) {
                out.push(Sample { input: input.crop(r, c, patch, patch)?, target: target.crop(r, c, patch, patch)? });
            }
        }
    }
    Ok(out)
}

fn split(config: &RunConfig, data: &Dataset) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let d = data.depth();
    if config.test_slices == 0 || config.test_slices >= d {
        return Err(Error::param("data.test_slices", format!("{} of {d} slices", config.test_slices)));
    }
    Ok((0..d - config.test_slices, d - config.test_slices..d))
}

fn meta_for(config: &TrainConfig, stage: u32) -> CheckpointMeta {
    CheckpointMeta {
        stage,
        slices: config.slices,
        patch: config.patch,
        beta: config.beta,
        sigma: config.sigma,
        epsilon: config.epsilon,
    }
}

pub fn cmd_gen_data(config: &RunConfig, out: impl AsRef<Path>) -> Result<()> {
    gen_data(&config.synth, out).map(|_| ())
}

/// Files written by [`cmd_train`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

/// Runs one training stage on the non-held-out slices. The `tacnet` stage
/// starts from `backbone.ckpt` in `out`.
pub fn cmd_train(config: &RunConfig, stage: Stage, out: impl AsRef<Path>) -> Result<TrainArtifacts> {
    config.validate()?;
    let out = out.as_ref();
    let data = Dataset::load(&config.data_dir)?;
    let (train_range, _) = split(config, &data)?;
    let samples = build_samples(&data, train_range, config.train.slices, config.train.patch)?;
    let (outcome, name, stage_no) = match stage {
        Stage::Backbone => (train_backbone(&config.train, &samples)?, BACKBONE_CHECKPOINT, 1),
        Stage::Tacnet => {
            let path = out.join(BACKBONE_CHECKPOINT);
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "stage tacnet needs a backbone checkpoint at {}; run the backbone stage first",
                    path.display()
                )));
            }
            let (start, _) = read_checkpoint(&path)?;
            (train_tacnet(&config.train, &start, &samples)?, TACNET_CHECKPOINT, 2)
        }
    };
    let artifacts = TrainArtifacts {
        checkpoint: out.join(name),
        history: out.join(format!("{}_history.csv", stage.name())),
    };
    write_checkpoint(&artifacts.checkpoint, &outcome.params, &meta_for(&config.train, stage_no))?;
    write_text(&artifacts.history, &history_csv(&outcome.history))?;
    Ok(artifacts)
}

/// Per-slice attention artifacts for one center slice.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSlice {
    pub probability: ScalarField2D<f64>,
    pub critical: ScalarField2D<f64>,
    pub attention: ScalarField2D<f64>,
    pub refined: ScalarField2D<f64>,
}

/// Backbone output, critical-point map, attention output and refined map of
/// the center slice, computed per tile and stitched.
pub fn attend_stack(params: &ConvLSTMParams<f64>, meta: &CheckpointMeta, stack: &SliceStack<f64>) -> Result<AttentionSlice> {
    check_patch(meta.patch, stack.dims())?;
    let probs = forward(params, stack)?;
    let att = TopologyAttention { epsilon: meta.epsilon, sigma: meta.sigma };
    let alpha = params.attention_weight;
    let stitched = tile_and_stitch(&probs, meta.patch, |tile| {
        let maps = att.maps(tile)?;
        let center = tile.center_index();
        let refined = crate::attention::sta_combine(tile.center(), &maps.o, alpha)?;
        SliceStack::new(vec![maps.cp_maps[center].field.clone(), maps.o, refined])
    })?;
    let mut parts = stitched.into_slices().into_iter();
    let (critical, attention, refined) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
    Ok(AttentionSlice { probability: probs.center().clone(), critical, attention, refined })
}

/// Writes `p`, `cp`, `o` and `phat` volumes plus per-slice PGM/PPM images.
pub fn cmd_attend(config: &RunConfig, checkpoint: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<Vec<AttentionSlice>> {
    let out = out.as_ref();
    let (params, meta) = read_checkpoint(checkpoint)?;
    let data = Dataset::load(&config.data_dir)?;
    check_patch(meta.patch, data.dims())?;
    let d = data.depth();
    let slices = (0..d)
        .into_par_iter()
        .map(|z| attend_stack(&params, &meta, &window(&data.image, z, meta.slices, 0, d)?))
        .collect::<Result<Vec<_>>>()?;
    let volumes: [(&str, fn(&AttentionSlice) -> &ScalarField2D<f64>); 4] = [
        ("p", |s| &s.probability),
        ("cp", |s| &s.critical),
        ("o", |s| &s.attention),
        ("phat", |s| &s.refined),
    ];
    for (name, pick) in volumes {
        let fields: Vec<ScalarField2D<f64>> = slices.iter().map(|s| pick(s).clone()).collect();
        write_tensor(out.join(format!("{name}.tact")), &RawTensor::from_fields(&fields)?)?;
        for (z, f) in fields.iter().enumerate() {
            write_pgm(out.join(format!("{name}_{z:03}.pgm")), f)?;
        }
    }
    for (z, s) in slices.iter().enumerate() {
        write_ppm_overlay(out.join(format!("overlay_{z:03}.ppm")), &data.image[z], &s.critical)?;
    }
    Ok(slices)
}

/// Metrics of one predicted slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceMetrics {
    pub dice: f64,
    pub ari: f64,
    pub voi: f64,
    pub betti_error: f64,
}

/// Thresholds, removes small components, and scores against the membrane.
pub fn evaluate_slice(pred: &ScalarField2D<f64>, gt: &BinaryMask2D, config: &RunConfig) -> Result<SliceMetrics> {
    let mask = remove_small_components(&threshold(pred, config.threshold), config.min_component);
    let (pl, gl) = (label_regions(&mask), label_regions(gt));
    Ok(SliceMetrics {
        dice: dice(&mask, gt)?,
        ari: adapted_rand_index(&pl, &gl)?,
        voi: variation_of_information(&pl, &gl)?,
        betti_error: betti_error(&mask, gt, &config.betti)?,
    })
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(rows: &[SliceMetrics]) -> Vec<MetricRow> {
    let pick: [(&str, fn(&SliceMetrics) -> f64); 4] = [
        ("dice", |m| m.dice),
        ("ari", |m| m.ari),
        ("voi", |m| m.voi),
        ("betti_error", |m| m.betti_error),
    ];
    pick.iter()
        .map(|(name, f)| {
            let (value, stddev) = mean_sd(rows.iter().map(f));
            MetricRow { metric: name.to_string(), value, stddev }
        })
        .collect()
}

/// Scores a predicted probability volume against a membrane volume and
/// writes `metrics.csv`.
pub fn cmd_eval(
    config: &RunConfig,
    pred: impl AsRef<Path>,
    gt: impl AsRef<Path>,
    out: impl AsRef<Path>,
) -> Result<Vec<MetricRow>> {
    let pred = read_tensor(pred)?.to_fields::<f64>()?;
    let gt = read_tensor(gt)?.to_fields::<f64>()?;
    if pred.len() != gt.len() || pred[0].dims() != gt[0].dims() {
        return Err(Error::Shape(format!(
            "prediction {}x{:?} vs ground truth {}x{:?}",
            pred.len(),
            pred[0].dims(),
            gt.len(),
            gt[0].dims()
        )));
    }
    let per_slice = pred
        .par_iter()
        .zip(&gt)
        .map(|(p, g)| evaluate_slice(p, &threshold(g, 0.5), config))
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize(&per_slice);
    write_text(out.as_ref().join("metrics.csv"), &metrics_csv(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    ConvLstm,
    Sta,
    StaIta,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::ConvLstm, Variant::Sta, Variant::StaIta];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ConvLstm => "convlstm",
            Variant::Sta => "convlstm+sta",
            Variant::StaIta => "convlstm+sta+ita",
        }
    }

    /// Stage-2 settings: no attention, attention without smoothing, or
    /// attention with the configured smoothing rate.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        match self {
            Variant::ConvLstm => TrainConfig { refinement: Refinement::None, ..base.clone() },
            Variant::Sta => TrainConfig { refinement: Refinement::Attention, beta: 0.0, ..base.clone() },
            Variant::StaIta => TrainConfig { refinement: Refinement::Attention, ..base.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub slices: usize,
    /// `(mean, stddev)` over seeds and held-out slices.
    pub dice: (f64, f64),
    pub ari: (f64, f64),
    pub voi: (f64, f64),
    pub betti_error: (f64, f64),
    pub seconds_per_epoch: f64,
}

/// Held-out predictions of one trained model.
fn predict_range(
    params: &ConvLSTMParams<f64>,
    config: &TrainConfig,
    data: &Dataset,
    range: std::ops::Range<usize>,
) -> Result<Vec<ScalarField2D<f64>>> {
    let (lo, hi) = (range.start, range.end);
    range
        .into_par_iter()
        .map(|z| predict_center(params, &window(&data.image, z, config.slices, lo, hi)?, config))
        .collect()
}

/// Trains and scores every variant for every slice count and seed.
pub fn run_ablation(config: &RunConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let (train_range, test_range) = split(config, data)?;
    let gts = data.masks(test_range.clone());
    let mut rows = Vec::new();
    for &slices in &config.ablate_slices {
        let samples = build_samples(data, train_range.clone(), slices, config.train.patch)?;
        let mut scores: Vec<Vec<SliceMetrics>> = vec![Vec::new(); Variant::ALL.len()];
        let mut seconds = vec![0.0; Variant::ALL.len()];
        for &seed in &config.ablate_seeds {
            let base = TrainConfig { seed, slices, ..config.train.clone() };
            let t0 = Instant::now();
            let backbone = train_backbone(&base, &samples)?;
            let backbone_secs = t0.elapsed().as_secs_f64();
            for (k, variant) in Variant::ALL.iter().enumerate() {
                let tc = variant.apply(&base);
                let t1 = Instant::now();
                let tuned = train_tacnet(&tc, &backbone.params, &samples)?;
                seconds[k] += (backbone_secs + t1.elapsed().as_secs_f64()) / (tc.epochs + tc.fine_tune_epochs) as f64;
                let preds = predict_range(&tuned.params, &tc, data, test_range.clone())?;
                for (p, g) in preds.iter().zip(&gts) {
                    scores[k].push(evaluate_slice(p, g, config)?);
                }
            }
        }
        for (k, variant) in Variant::ALL.iter().enumerate() {
            let s = &scores[k];
            rows.push(AblationRow {
                variant: *variant,
                slices,
                dice: mean_sd(s.iter().map(|m| m.dice)),
                ari: mean_sd(s.iter().map(|m| m.ari)),
                voi: mean_sd(s.iter().map(|m| m.voi)),
                betti_error: mean_sd(s.iter().map(|m| m.betti_error)),
                seconds_per_epoch: seconds[k] / config.ablate_seeds.len() as f64,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,slices,dice,dice_sd,ari,ari_sd,voi,voi_sd,betti_error,betti_error_sd\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant.name(),
            r.slices,
            r.dice.0,
            r.dice.1,
            r.ari.0,
            r.ari.1,
            r.voi.0,
            r.voi.1,
            r.betti_error.0,
            r.betti_error.1
        )
        .unwrap();
    }
    out
}

pub fn timing_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,slices,seconds_per_epoch\n");
    for r in rows {
        writeln!(out, "{},{},{:.6}", r.variant.name(), r.slices, r.seconds_per_epoch).unwrap();
    }
    out
}

/// Writes `ablation.csv` (deterministic) and `ablation_timing.csv`.
pub fn cmd_ablate(config: &RunConfig, out: impl AsRef<Path>) -> Result<Vec<AblationRow>> {
    let out = out.as_ref();
    let data = Dataset::load(&config.data_dir)?;
    let rows = run_ablation(config, &data)?;
    write_text(out.join("ablation.csv"), &ablation_csv(&rows))?;
    write_text(out.join("ablation_timing.csv"), &timing_csv(&rows))?;
    Ok(rows)
}
