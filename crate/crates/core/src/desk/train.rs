//! Two-stage driver: gated search, then retraining of the retained pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::bcm::{run_search, BankSpec, Branch, Phase, RetainedPair, SearchResult, SearchSchedule};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::operators::{OperatorConfig, OperatorKind, PairDims};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::data::{Attribute, DataConfig, SyntheticPair};
use super::labels::{make_labels, Labels};
use super::model::{BranchModel, GateSettings, SiameseModel};

/// A synthetic pair with its training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair<S> {
    pub sample: SyntheticPair<S>,
    pub labels: Labels<S>,
}

impl<S: Scalar> LabeledPair<S> {
    pub fn new(sample: SyntheticPair<S>) -> Self {
        let d = sample.pair.dims();
        let labels = make_labels(&sample.gt_box, d.hx, d.wx);
        Self { sample, labels }
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.sample.attributes
    }
}

pub fn label_all<S: Scalar>(samples: Vec<SyntheticPair<S>>) -> Vec<LabeledPair<S>> {
    samples.into_iter().map(LabeledPair::new).collect()
}

fn dims_of<S: Scalar>(pairs: &[LabeledPair<S>]) -> Result<PairDims> {
    let d = pairs
        .first()
        .ok_or_else(|| Error::Data("empty dataset".into()))?
        .sample
        .pair
        .dims();
    if pairs.iter().any(|p| p.sample.pair.dims() != d) {
        return Err(Error::Data("pairs disagree on grid dimensions".into()));
    }
    Ok(d)
}

fn batches<T>(items: &[T], batch_size: usize) -> Result<Vec<&[T]>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(items.chunks(batch_size).collect())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Inner step `ε` at the first step.
    pub lr_theta: f64,
    pub lr_theta_final: f64,
    pub lr_w: f64,
    /// Global gradient-norm bound on the weight step; 0 disables.
    pub clip_norm: f64,
    pub lambda: f64,
    pub gate: GateSettings,
    pub operators: OperatorConfig,
    /// Operators under search, canonical order.
    pub kinds: Vec<OperatorKind>,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            lr_theta: 0.05,
            lr_theta_final: 0.005,
            lr_w: 0.5,
            clip_norm: 5.0,
            lambda: 1.0,
            gate: GateSettings::default(),
            operators: OperatorConfig::default(),
            kinds: OperatorKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// Result of stage 1: one search result per branch and the gated model.
#[derive(Debug, Clone)]
pub struct Stage1<S> {
    pub cls: SearchResult,
    pub reg: SearchResult,
    pub model: SiameseModel<S>,
}

/// Gated search over both branches, each with its own operator copies and
/// manipulator bank.
pub fn stage1_search<S: Scalar>(
    train: &[LabeledPair<S>],
    val: &[LabeledPair<S>],
    cfg: &SearchConfig,
) -> Result<Stage1<S>> {
    let dims = dims_of(train)?;
    let mut rng = rng_for(cfg.seed, 0);
    let mut model = SiameseModel::new(
        BranchModel::gated(Branch::Cls, &cfg.kinds)?,
        BranchModel::gated(Branch::Reg, &cfg.kinds)?,
        dims,
        cfg.operators,
        cfg.gate,
        &mut rng,
    )?;
    let banks: Vec<BankSpec> = [Branch::Cls, Branch::Reg]
        .into_iter()
        .map(|branch| BankSpec {
            branch,
            kinds: model.cls.operators.kinds(),
        })
        .collect();
    let schedule = SearchSchedule {
        epochs: cfg.epochs,
        lr_theta: S::lit(cfg.lr_theta),
        lr_theta_final: S::lit(cfg.lr_theta_final),
        lr_w: S::lit(cfg.lr_w),
        clip_norm: S::lit(cfg.clip_norm),
    };
    let lambda = S::lit(cfg.lambda);
    let train_b = batches(train, cfg.batch_size)?;
    let val_b = batches(val, cfg.batch_size)?;
    let mut theta = std::mem::take(&mut model.theta);
    let mut arch = std::mem::take(&mut model.arch);
    let results = {
        let view = &model;
        run_search(
            &mut theta,
            &mut arch,
            &banks,
            &train_b,
            &val_b,
            &schedule,
            cfg.seed,
            |tape, tb, ab, batch, ctx| {
                let noise_step = 2 * ctx.step + u64::from(ctx.phase == Phase::Val);
                view.batch_loss(
                    tape,
                    tb,
                    ab,
                    batch.iter().map(|p| (&p.sample.pair, &p.labels)),
                    lambda,
                    Some(noise_step),
                )
            },
        )?
    };
    model.theta = theta;
    model.arch = arch;
    let mut results = results.into_iter();
    let (cls, reg) = (results.next(), results.next());
    Ok(Stage1 {
        cls: cls.ok_or_else(|| Error::Data("missing cls search result".into()))?,
        reg: reg.ok_or_else(|| Error::Data("missing reg search result".into()))?,
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Learning rate reached at the last step.
    pub lr_final: f64,
    /// Leading epochs run at `warmup_factor · lr`.
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    /// Gradients with a larger global norm are rescaled to it; 0 disables.
    pub clip_norm: f64,
    pub lambda: f64,
    pub operators: OperatorConfig,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 0.1,
            lr_final: 0.001,
            warmup_epochs: 2,
            warmup_factor: 0.2,
            clip_norm: 5.0,
            lambda: 1.0,
            operators: OperatorConfig::default(),
            seed: 0,
        }
    }
}

impl RetrainConfig {
    /// Learning rate at `epoch`: flat warmup, then exponential decay from
    /// `lr` to `lr_final`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr * self.warmup_factor;
        }
        let span = self.epochs.saturating_sub(self.warmup_epochs + 1);
        if span == 0 || self.lr <= 0.0 {
            return self.lr;
        }
        let t = (epoch - self.warmup_epochs) as f64 / span as f64;
        self.lr * (self.lr_final / self.lr).powf(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    /// Mean training loss per epoch.
    pub train_losses: Vec<f64>,
    /// Validation loss after each epoch.
    pub val_losses: Vec<f64>,
}

/// Mean loss over `pairs` without gradients or gate noise.
pub fn validation_loss<S: Scalar>(model: &SiameseModel<S>, pairs: &[LabeledPair<S>], lambda: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("empty validation split".into()));
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(32) {
        let mut tape = Tape::new();
        let tb = model.theta.bind_frozen(&mut tape);
        let ab = model.arch.bind_frozen(&mut tape);
        let l = model.batch_loss(
            &mut tape,
            &tb,
            &ab,
            chunk.iter().map(|p| (&p.sample.pair, &p.labels)),
            S::lit(lambda),
            None,
        )?;
        total += tape.value(l).data()[0].to_f64_lossy() * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Plain minibatch SGD on every weight of `model` (manipulators, if any,
/// stay fixed).
pub fn train_model<S: Scalar>(
    model: &mut SiameseModel<S>,
    train: &[LabeledPair<S>],
    val: &[LabeledPair<S>],
    cfg: &RetrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let lambda = S::lit(cfg.lambda);
    let initial_val_loss = validation_loss(model, val, cfg.lambda)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut train_losses = Vec::with_capacity(cfg.epochs);
    let mut val_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, 1 + epoch as u64));
        let lr = S::lit(cfg.lr_at(epoch));
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let tb = model.theta.bind(&mut tape);
            let ab = model.arch.bind_frozen(&mut tape);
            let loss = model.batch_loss(
                &mut tape,
                &tb,
                &ab,
                idx.iter().map(|&i| (&train[i].sample.pair, &train[i].labels)),
                lambda,
                None,
            )?;
            let v = tape.value(loss).data()[0].to_f64_lossy();
            if !v.is_finite() {
                return Err(Error::Diverged(format!(
                    "training loss is {v} at epoch {epoch} (lr {})",
                    cfg.lr_at(epoch)
                )));
            }
            sum += v * idx.len() as f64;
            tape.backward(loss)?;
            model.theta.sgd_step_clipped(&tape, &tb, lr, S::lit(cfg.clip_norm));
        }
        if !model.theta.is_finite() {
            return Err(Error::Diverged(format!("non-finite weights after epoch {epoch}")));
        }
        train_losses.push(sum / train.len() as f64);
        val_losses.push(validation_loss(model, val, cfg.lambda)?);
        log::debug!(
            "epoch {epoch}: train {:.5} val {:.5}",
            train_losses[epoch],
            val_losses[epoch]
        );
    }
    Ok(TrainReport {
        initial_val_loss,
        final_val_loss: val_losses.last().copied().unwrap_or(initial_val_loss),
        train_losses,
        val_losses,
    })
}

/// Builds a freshly initialized model from two branch wirings.
pub fn fresh_model<S: Scalar>(
    cls: BranchModel,
    reg: BranchModel,
    dims: PairDims,
    cfg: &RetrainConfig,
) -> Result<SiameseModel<S>> {
    let mut rng = rng_for(cfg.seed, 0);
    SiameseModel::new(cls, reg, dims, cfg.operators, GateSettings::default(), &mut rng)
}

/// Stage 2: fresh weights for the retained pair of each branch, trained
/// with SGD.
pub fn stage2_retrain<S: Scalar>(
    cls: &RetainedPair,
    reg: &RetainedPair,
    train: &[LabeledPair<S>],
    val: &[LabeledPair<S>],
    cfg: &RetrainConfig,
) -> Result<(SiameseModel<S>, TrainReport)> {
    let mut model = fresh_model(
        BranchModel::retained(Branch::Cls, *cls)?,
        BranchModel::retained(Branch::Reg, *reg)?,
        dims_of(train)?,
        cfg,
    )?;
    let report = train_model(&mut model, train, val, cfg)?;
    Ok((model, report))
}

/// A model with one operator in both branches, trained like stage 2.
pub fn train_single<S: Scalar>(
    kind: OperatorKind,
    train: &[LabeledPair<S>],
    val: &[LabeledPair<S>],
    cfg: &RetrainConfig,
) -> Result<(SiameseModel<S>, TrainReport)> {
    let mut model = fresh_model(
        BranchModel::single(Branch::Cls, kind)?,
        BranchModel::single(Branch::Reg, kind)?,
        dims_of(train)?,
        cfg,
    )?;
    let report = train_model(&mut model, train, val, cfg)?;
    Ok((model, report))
}

/// Predicted box for every pair.
pub fn predict_boxes<S: Scalar>(model: &SiameseModel<S>, pairs: &[LabeledPair<S>]) -> Result<Vec<BBox>> {
    pairs.iter().map(|p| model.predict_box(&p.sample.pair)).collect()
}

/// IoU of the predicted box against ground truth, per pair.
pub fn pair_ious<S: Scalar>(model: &SiameseModel<S>, pairs: &[LabeledPair<S>]) -> Result<Vec<f64>> {
    Ok(predict_boxes(model, pairs)?
        .iter()
        .zip(pairs)
        .map(|(b, p)| b.iou(&p.sample.gt_box))
        .collect())
}

/// Dataset whose classification targets come from the Pointwise-Addition
/// response: a cell is positive when `a · (pool(f_z) + F_x) > 0` for a
/// fixed random readout `a`. Regression targets are empty, so only the
/// classification term is active.
pub fn planted_pointwise_add<S: Scalar>(cfg: &DataConfig, readout_seed: u64) -> Result<Vec<LabeledPair<S>>> {
    let samples = super::data::gen_synthetic::<S>(cfg)?;
    let c = cfg.grid.c;
    let mut rng = rng_for(readout_seed, 0);
    let a: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut out = Vec::with_capacity(samples.len());
    for sample in samples {
        let p = &sample.pair;
        let d = p.dims();
        let mut tape = Tape::new();
        let vars = p.record(&mut tape, false);
        let r = crate::operators::pointwise_add(&mut tape, &vars)?;
        let resp = tape.value(r);
        let cls: Vec<S> = resp
            .data()
            .chunks(c)
            .map(|cell| {
                let s: f64 = cell.iter().zip(&a).map(|(x, w)| x.to_f64_lossy() * w).sum();
                if s > 0.0 { S::one() } else { S::zero() }
            })
            .collect();
        let cls_target = Tensor::from_vec(&[d.hx, d.wx, 1], cls)?;
        let labels = Labels {
            cls_target,
            reg_target: Tensor::zeros(&[d.hx, d.wx, 4])?,
            valid_mask: Tensor::zeros(&[d.hx, d.wx, 1])?,
        };
        out.push(LabeledPair { sample, labels });
    }
    Ok(out)
}

/// Split by sequence id into train/validation.
pub fn split<S: Scalar>(
    pairs: Vec<LabeledPair<S>>,
    n_sequences: usize,
    ratio: f64,
) -> Result<(Vec<LabeledPair<S>>, Vec<LabeledPair<S>>)> {
    super::data::split_by_sequence(&pairs, |p| p.sample.sequence_id, n_sequences, ratio)
}

/// Weights of a stored model, for persistence.
pub fn weights<S: Scalar>(model: &SiameseModel<S>) -> ParamStore<S> {
    let mut all = model.theta.clone();
    all.extend(model.arch.clone());
    all
}
