//! Two-stage training: backbone alone, then the attention-augmented network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{build_query_key, similarity, TopologyAttention};
use crate::convlstm::{backward_trace, forward_trace, AttentionInputs, ConvLSTMParams};
use crate::error::{Error, Result};
use crate::field::{ScalarField2D, SliceStack, ALLOWED_SLICE_COUNTS};
use crate::persistence::critical_point_map;
use crate::scalar::Real;

/// What the second stage attaches on top of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Refinement {
    /// Keep fine-tuning the backbone alone.
    None,
    /// Spatial topology attention; iterative smoothing when `beta > 0`.
    Attention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_halving_period: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub slices: usize,
    pub patch: usize,
    pub beta: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub fine_tune_lr: f64,
    pub fine_tune_epochs: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub momentum: f64,
    pub refinement: Refinement,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            lr_halving_period: 50,
            epochs: 35,
            batch: 15,
            seed: 0,
            slices: 3,
            patch: 39,
            beta: 0.5,
            sigma: 1.0,
            epsilon: 0.01,
            fine_tune_lr: 1e-5,
            fine_tune_epochs: 15,
            hidden: 8,
            kernel: 3,
            momentum: 0.0,
            refinement: Refinement::Attention,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", format!("{} must be a finite non-negative rate", self.lr)));
        }
        if !(self.fine_tune_lr >= 0.0 && self.fine_tune_lr.is_finite()) {
            return Err(Error::param("fine_tune_lr", format!("{}", self.fine_tune_lr)));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be >= 1"));
        }
        if self.batch == 0 {
            return Err(Error::param("batch", "must be >= 1"));
        }
        if self.lr_halving_period == 0 {
            return Err(Error::param("lr_halving_period", "must be >= 1"));
        }
        if !ALLOWED_SLICE_COUNTS.contains(&self.slices) {
            return Err(Error::param("slices", format!("{} not in {{1,3,5}}", self.slices)));
        }
        if self.patch < 3 {
            return Err(Error::param("patch", "must be >= 3"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::param("beta", format!("{} not in [0,1]", self.beta)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::param("sigma", "must be > 0"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::param("epsilon", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must be in [0,1)"));
        }
        ConvLSTMParams::<f64>::zeros(self.hidden, self.kernel).map(|_| ())
    }

    /// Stage-1 rate at a zero-based epoch: halved every `lr_halving_period` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }

    pub fn attention(&self) -> TopologyAttention<f64> {
        TopologyAttention { epsilon: self.epsilon, sigma: self.sigma }
    }
}

/// One training example: an input stack and its binary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub input: SliceStack<T>,
    pub target: SliceStack<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Backbone,
    Tacnet,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Tacnet => "tacnet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ConvLSTMParams<T>,
    pub history: Vec<HistoryRow>,
}

fn check_dataset<T: Real>(config: &TrainConfig, data: &[Sample<T>]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::param("dataset", "no samples"));
    }
    for s in data {
        if s.input.len() != config.slices || s.target.len() != config.slices {
            return Err(Error::Shape(format!(
                "sample has {} slices, config expects {}",
                s.input.len(),
                config.slices
            )));
        }
        if s.input.dims() != s.target.dims() {
            return Err(Error::Shape("sample input and target differ in size".into()));
        }
    }
    Ok(())
}

struct Sgd<T> {
    velocity: Vec<T>,
    momentum: T,
}

impl<T: Real> Sgd<T> {
    fn new(len: usize, momentum: f64) -> Self {
        Self { velocity: vec![T::zero(); len], momentum: T::lit(momentum) }
    }

    fn step(&mut self, params: &mut ConvLSTMParams<T>, grad: &[T], lr: T) {
        let mut i = 0;
        let (velocity, momentum) = (&mut self.velocity, self.momentum);
        params.for_each_mut(|p| {
            let v = momentum * velocity[i] + grad[i];
            velocity[i] = v;
            *p -= lr * v;
            i += 1;
        });
    }
}

/// Per-sample loss and flat gradient for stage 1.
fn backbone_grad<T: Real>(params: &ConvLSTMParams<T>, sample: &Sample<T>) -> Result<(T, Vec<T>)> {
    let trace = forward_trace(params, &sample.input)?;
    let ys: Vec<&[T]> = sample.target.slices().iter().map(|s| s.values()).collect();
    let (eval, grad) = backward_trace(params, &trace, &ys, None)?;
    Ok((eval.loss, grad.flat()))
}

/// Per-sample loss, flat gradient and fresh attention output for stage 2.
fn tacnet_grad<T: Real>(
    params: &ConvLSTMParams<T>,
    sample: &Sample<T>,
    epsilon: T,
    sigma: T,
    beta: T,
    o_prev: Option<&[T]>,
) -> Result<(T, Vec<T>, Vec<T>)> {
    let trace = forward_trace(params, &sample.input)?;
    let probs = trace.to_stack()?;
    let cp_maps = probs
        .slices()
        .iter()
        .map(|p| critical_point_map(p, epsilon, sigma))
        .collect::<Result<Vec<_>>>()?;
    let sm = similarity(&build_query_key(&cp_maps, probs.center_index())?);
    let ys: Vec<&[T]> = sample.target.slices().iter().map(|s| s.values()).collect();
    let att = AttentionInputs { similarity: &sm, o_prev, beta };
    let (eval, grad) = backward_trace(params, &trace, &ys, Some(&att))?;
    let o_curr = eval.o_curr.expect("attention pass yields o");
    Ok((eval.loss, grad.flat(), o_curr))
}

fn sum_grads<T: Real>(grads: &[Vec<T>]) -> Vec<T> {
    let mut total = grads[0].clone();
    for g in &grads[1..] {
        for (a, b) in total.iter_mut().zip(g) {
            *a += *b;
        }
    }
    let n = T::lit(grads.len() as f64);
    total.iter_mut().for_each(|v| *v /= n);
    total
}

fn check_loss<T: Real>(stage: Stage, epoch: usize, loss: f64, params: &ConvLSTMParams<T>) -> Result<()> {
    if loss.is_finite() && params.flat().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { stage: stage.name(), epoch, loss })
    }
}

/// Stage 1: the backbone alone, with the halving learning-rate schedule.
pub fn train_backbone<T: Real>(config: &TrainConfig, data: &[Sample<T>]) -> Result<TrainOutcome<T>> {
    config.validate()?;
    check_dataset(config, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ConvLSTMParams::init(config.hidden, config.kernel, &mut rng)?;
    let mut sgd = Sgd::new(params.len(), config.momentum);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch) {
            let results = batch
                .par_iter()
                .map(|&i| backbone_grad(&params, &data[i]))
                .collect::<Result<Vec<_>>>()?;
            let (losses, grads): (Vec<T>, Vec<Vec<T>>) = results.into_iter().unzip();
            epoch_loss += losses.iter().map(|l| l.as_f64()).sum::<f64>();
            sgd.step(&mut params, &sum_grads(&grads), T::lit(lr));
            check_loss(Stage::Backbone, epoch, epoch_loss, &params)?;
        }
        let loss = epoch_loss / data.len() as f64;
        history.push(HistoryRow { epoch, stage: Stage::Backbone, lr, loss });
    }
    Ok(TrainOutcome { params, history })
}

/// Stage 2: fine-tune from `start` at the constant fine-tune rate, with the
/// refinement selected in the config. ITA history is kept per sample.
pub fn train_tacnet<T: Real>(
    config: &TrainConfig,
    start: &ConvLSTMParams<T>,
    data: &[Sample<T>],
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    check_dataset(config, data)?;
    start.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut params = start.clone();
    let mut sgd = Sgd::new(params.len(), config.momentum);
    let mut history = Vec::with_capacity(config.fine_tune_epochs);
    let mut o_prev: Vec<Option<Vec<T>>> = vec![None; data.len()];
    let (epsilon, sigma, beta) = (T::lit(config.epsilon), T::lit(config.sigma), T::lit(config.beta));
    let lr = config.fine_tune_lr;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.fine_tune_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch) {
            let (losses, grads) = match config.refinement {
                Refinement::None => {
                    let results = batch
                        .par_iter()
                        .map(|&i| backbone_grad(&params, &data[i]))
                        .collect::<Result<Vec<_>>>()?;
                    results.into_iter().unzip::<T, Vec<T>, Vec<T>, Vec<Vec<T>>>()
                }
                Refinement::Attention => {
                    let results = batch
                        .par_iter()
                        .map(|&i| tacnet_grad(&params, &data[i], epsilon, sigma, beta, o_prev[i].as_deref()))
                        .collect::<Result<Vec<_>>>()?;
                    let mut losses = Vec::with_capacity(batch.len());
                    let mut grads = Vec::with_capacity(batch.len());
                    for (&i, (loss, grad, o_curr)) in batch.iter().zip(results) {
                        // ITA: remember the blended output for the next epoch
                        let blended = match &o_prev[i] {
                            Some(prev) => prev.iter().zip(&o_curr).map(|(a, b)| beta * *a + (T::one() - beta) * *b).collect(),
                            None => o_curr,
                        };
                        o_prev[i] = Some(blended);
                        losses.push(loss);
                        grads.push(grad);
                    }
                    (losses, grads)
                }
            };
            epoch_loss += losses.iter().map(|l| l.as_f64()).sum::<f64>();
            sgd.step(&mut params, &sum_grads(&grads), T::lit(lr));
            check_loss(Stage::Tacnet, epoch, epoch_loss, &params)?;
        }
        let loss = epoch_loss / data.len() as f64;
        history.push(HistoryRow { epoch, stage: Stage::Tacnet, lr, loss });
    }
    Ok(TrainOutcome { params, history })
}

/// Both stages back to back.
pub fn train<T: Real>(config: &TrainConfig, data: &[Sample<T>]) -> Result<TrainOutcome<T>> {
    let stage1 = train_backbone(config, data)?;
    let stage2 = train_tacnet(config, &stage1.params, data)?;
    let mut history = stage1.history;
    history.extend(stage2.history);
    Ok(TrainOutcome { params: stage2.params, history })
}

/// Center-slice prediction for one stack: the raw backbone map, or the
/// attention-refined one when `refinement` is set. Attention is applied per
/// `patch` tile.
pub fn predict_center<T: Real>(
    params: &ConvLSTMParams<T>,
    stack: &SliceStack<T>,
    config: &TrainConfig,
) -> Result<ScalarField2D<T>> {
    let probs = crate::convlstm::forward(params, stack)?;
    match config.refinement {
        Refinement::None => Ok(probs.center().clone()),
        Refinement::Attention => {
            let att = TopologyAttention { epsilon: T::lit(config.epsilon), sigma: T::lit(config.sigma) };
            let alpha = params.attention_weight;
            let patch = config.patch.min(stack.height()).min(stack.width());
            let out = crate::attention::tile_and_stitch(&probs, patch, |tile| {
                SliceStack::new(vec![att.refine(tile, alpha)?])
            })?;
            Ok(out.center().clone())
        }
    }
}
