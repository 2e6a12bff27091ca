//! Three-stage training: main branch alone, branches on a frozen backbone
//! with soft labels, then everything jointly.

use std::fmt;

use branchy_tensor::{Binding, ParamStore, Sgd, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::model::{argmax, points_tensor, BranchyNet, Noise};
use crate::pointcloud::{Dataset, PointCloud};
use crate::rng::{self, Purpose, Seeds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    MainOnly,
    BranchesFrozenBackbone,
    JointFineTune,
}

impl Stage {
    pub const ORDER: [Stage; 3] = [Stage::MainOnly, Stage::BranchesFrozenBackbone, Stage::JointFineTune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::MainOnly => "main_only",
            Stage::BranchesFrozenBackbone => "branches_frozen_backbone",
            Stage::JointFineTune => "joint_fine_tune",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub main: StagePlan,
    pub branches: StagePlan,
    pub joint: StagePlan,
    pub momentum: f64,
    pub batch_size: usize,
    pub soft_label_temperature: f64,
    /// Weight of the soft-label term in stage 2; the hard-label term gets `1 − w`.
    pub soft_label_weight: f64,
    /// Channel SNR during stages 2 and 3.
    pub snr_db: f64,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        TrainingPlan {
            main: StagePlan { epochs: 30, learning_rate: 0.01 },
            branches: StagePlan { epochs: 30, learning_rate: 0.01 },
            joint: StagePlan { epochs: 10, learning_rate: 0.001 },
            momentum: 0.9,
            batch_size: 16,
            soft_label_temperature: 2.0,
            soft_label_weight: 0.5,
            snr_db: 20.0,
        }
    }
}

impl TrainingPlan {
    pub fn stage(&self, stage: Stage) -> StagePlan {
        match stage {
            Stage::MainOnly => self.main,
            Stage::BranchesFrozenBackbone => self.branches,
            Stage::JointFineTune => self.joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for stage in Stage::ORDER {
            let p = self.stage(stage);
            if !(p.learning_rate >= 0.0 && p.learning_rate.is_finite()) {
                return Err(Error::Config(format!("training.{}.learning_rate must be finite and non-negative", field(stage))));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("training.momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(self.soft_label_temperature > 0.0 && self.soft_label_temperature.is_finite()) {
            return Err(Error::Config("training.soft_label_temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.soft_label_weight) {
            return Err(Error::Config("training.soft_label_weight must be in [0, 1]".into()));
        }
        if self.snr_db.is_nan() {
            return Err(Error::Config("training.snr_db must be a number".into()));
        }
        Ok(())
    }
}

fn field(stage: Stage) -> &'static str {
    match stage {
        Stage::MainOnly => "main",
        Stage::BranchesFrozenBackbone => "branches",
        Stage::JointFineTune => "joint",
    }
}

/// One row of the training log. Test accuracies are fractions in `[0, 1]`;
/// branch accuracies are `None` while the branches are untrained.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub main_accuracy: f64,
    pub branch_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub main: f64,
    pub branches: Vec<f64>,
}

fn is_branch_param(name: &str) -> bool {
    name.starts_with("branch")
}

fn one_hot_logits(logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(logits.reshape(&[1, logits.len()])?)
}

fn ce(logits: &Tensor<f32>, label: usize) -> Result<Tensor<f32>> {
    Ok(one_hot_logits(logits)?.cross_entropy(&[label])?)
}

/// `softmax(z / T)`.
pub fn soften(logits: &[f32], temperature: f64) -> Vec<f32> {
    let t = temperature as f32;
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f32> = logits.iter().map(|&z| ((z - m) / t).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `(1 − w)·CE(branch, y) + w·T²·KL(softmax(main/T) ‖ softmax(branch/T))`.
pub fn distillation_loss(branch: &Tensor<f32>, main: &[f32], label: usize, temperature: f64, weight: f64) -> Result<Tensor<f32>> {
    let hard = ce(branch, label)?;
    if weight == 0.0 {
        return Ok(hard);
    }
    let target = soften(main, temperature);
    let soft = one_hot_logits(branch)?.scale(1.0 / temperature).kl_div(&target)?;
    Ok(hard.scale(1.0 - weight).add(&soft.scale(weight * temperature * temperature))?)
}

/// Backbone outputs of one cloud, computed once while the backbone is frozen.
struct Frozen {
    features: Vec<Tensor<f32>>,
    main: Vec<f32>,
}

fn freeze_all(net: &BranchyNet, store: &ParamStore<f32>, clouds: &[PointCloud]) -> Result<Vec<Frozen>> {
    let bind = Binding::frozen(store);
    clouds
        .iter()
        .map(|c| {
            let out = net.backbone.forward(&bind, &points_tensor(c)?)?;
            Ok(Frozen { features: out.features, main: out.logits.to_vec() })
        })
        .collect()
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Noise used for every test-set evaluation. The same draws are reused at
/// every SNR, so accuracy differences between grid points come from the
/// noise level alone.
pub fn eval_noise(seeds: &Seeds) -> Noise {
    Noise::Seeded { seed: seeds.channel, purpose: Purpose::EvalNoise, tag: 0 }
}

/// Main-exit test accuracy (no channel involved).
pub fn evaluate_main(net: &BranchyNet, store: &ParamStore<f32>, clouds: &[PointCloud]) -> Result<f64> {
    let bind = Binding::frozen(store);
    let mut hits = 0;
    for c in clouds {
        let logits = net.main_logits(&bind, &points_tensor(c)?)?;
        hits += usize::from(argmax(logits.data()) == c.label);
    }
    Ok(fraction(hits, clouds.len()))
}

/// Accuracy of every exit at each channel setting. The backbone runs once
/// per cloud; `noise = Noise::Off` evaluates a noiseless link.
pub fn evaluate_grid(
    net: &BranchyNet,
    store: &ParamStore<f32>,
    clouds: &[PointCloud],
    channels: &[ChannelConfig],
    noise: Noise,
) -> Result<Vec<Accuracy>> {
    let bind = Binding::frozen(store);
    let mut main_hits = 0;
    let mut hits = vec![vec![0usize; net.branches.len()]; channels.len()];
    for c in clouds {
        let out = net.backbone.forward(&bind, &points_tensor(c)?)?;
        main_hits += usize::from(argmax(out.logits.data()) == c.label);
        for (ch, row) in channels.iter().zip(&mut hits) {
            let (logits, _) = net.exits(&bind, &out.features, c.id, ch, noise)?;
            for (h, l) in row.iter_mut().zip(&logits) {
                *h += usize::from(argmax(l.data()) == c.label);
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|row| Accuracy {
            main: fraction(main_hits, clouds.len()),
            branches: row.into_iter().map(|h| fraction(h, clouds.len())).collect(),
        })
        .collect())
}

pub fn evaluate(net: &BranchyNet, store: &ParamStore<f32>, clouds: &[PointCloud], channel: &ChannelConfig, noise: Noise) -> Result<Accuracy> {
    Ok(evaluate_grid(net, store, clouds, std::slice::from_ref(channel), noise)?.remove(0))
}

fn evaluate_frozen(net: &BranchyNet, store: &ParamStore<f32>, frozen: &[Frozen], clouds: &[PointCloud], channel: &ChannelConfig, noise: Noise) -> Result<Accuracy> {
    let bind = Binding::frozen(store);
    let mut main_hits = 0;
    let mut hits = vec![0usize; net.branches.len()];
    for (f, c) in frozen.iter().zip(clouds) {
        main_hits += usize::from(argmax(&f.main) == c.label);
        let (logits, _) = net.exits(&bind, &f.features, c.id, channel, noise)?;
        for (h, l) in hits.iter_mut().zip(&logits) {
            *h += usize::from(argmax(l.data()) == c.label);
        }
    }
    Ok(Accuracy {
        main: fraction(main_hits, clouds.len()),
        branches: hits.into_iter().map(|h| fraction(h, clouds.len())).collect(),
    })
}

/// Runs the stages in order, each exactly once.
pub struct Trainer<'a> {
    net: &'a BranchyNet,
    data: &'a Dataset,
    plan: &'a TrainingPlan,
    channel: ChannelConfig,
    seeds: Seeds,
    next: usize,
}

impl<'a> Trainer<'a> {
    /// `channel` supplies bandwidth and power; its SNR is replaced by the
    /// plan's training SNR.
    pub fn new(net: &'a BranchyNet, data: &'a Dataset, plan: &'a TrainingPlan, channel: ChannelConfig, seeds: Seeds) -> Result<Self> {
        plan.validate()?;
        if data.train.is_empty() || data.test.is_empty() {
            return Err(Error::Config("training needs non-empty train and test splits".into()));
        }
        Ok(Trainer { net, data, plan, channel: channel.with_snr(plan.snr_db), seeds, next: 0 })
    }

    /// The stage that may run next, if any.
    pub fn next_stage(&self) -> Option<Stage> {
        Stage::ORDER.get(self.next).copied()
    }

    pub fn run(&mut self, stage: Stage, store: &mut ParamStore<f32>) -> Result<Vec<EpochRecord>> {
        match self.next_stage() {
            Some(expected) if expected == stage => {}
            Some(expected) => return Err(Error::StageOrder(format!("{stage} requested, {expected} must run next"))),
            None => return Err(Error::StageOrder(format!("{stage} requested after all stages completed"))),
        }
        let log = match stage {
            Stage::MainOnly => self.main_only(store)?,
            Stage::BranchesFrozenBackbone => self.branches_frozen(store)?,
            Stage::JointFineTune => self.joint(store)?,
        };
        self.next += 1;
        Ok(log)
    }

    pub fn train_main(&mut self, store: &mut ParamStore<f32>) -> Result<Vec<EpochRecord>> {
        self.run(Stage::MainOnly, store)
    }

    pub fn train_branches(&mut self, store: &mut ParamStore<f32>) -> Result<Vec<EpochRecord>> {
        self.run(Stage::BranchesFrozenBackbone, store)
    }

    pub fn fine_tune_all(&mut self, store: &mut ParamStore<f32>) -> Result<Vec<EpochRecord>> {
        self.run(Stage::JointFineTune, store)
    }

    fn order(&self, stage: Stage, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.train.len()).collect();
        idx.shuffle(&mut rng::stream(self.seeds.data, Purpose::Shuffle, &[stage.index() as u64, epoch as u64]));
        idx
    }

    fn train_noise(&self, stage: Stage, epoch: usize) -> Noise {
        Noise::Seeded { seed: self.seeds.channel, purpose: Purpose::TrainNoise, tag: ((stage.index() as u64) << 32) | epoch as u64 }
    }

    /// Shared epoch loop. `sample_loss` returns the loss of one training
    /// sample and its number of correct exits out of `exits_per_sample`.
    fn epochs(
        &self,
        stage: Stage,
        store: &mut ParamStore<f32>,
        trainable: fn(&str) -> bool,
        exits_per_sample: usize,
        mut sample_loss: impl FnMut(&Binding<f32>, usize, Noise) -> Result<(Tensor<f32>, usize)>,
        mut test: impl FnMut(&ParamStore<f32>) -> Result<(f64, Vec<Option<f64>>)>,
    ) -> Result<Vec<EpochRecord>> {
        let plan = self.plan.stage(stage);
        let mut opt = Sgd::new(plan.learning_rate as f32, self.plan.momentum as f32);
        let mut log = Vec::with_capacity(plan.epochs);
        for epoch in 1..=plan.epochs {
            let noise = self.train_noise(stage, epoch);
            let (mut total, mut hits) = (0.0f64, 0usize);
            for batch in self.order(stage, epoch).chunks(self.plan.batch_size) {
                let grads = {
                    let bind = Binding::new(store, |p| trainable(&p.name));
                    for &i in batch {
                        let (loss, correct) = sample_loss(&bind, i, noise)?;
                        let value = loss.item()? as f64;
                        if !value.is_finite() {
                            return Err(Error::Diverged { stage: stage.name(), epoch, loss: value });
                        }
                        total += value;
                        hits += correct;
                        loss.scale(1.0 / batch.len() as f64).backward()?;
                    }
                    bind.grads()
                };
                opt.step(store, &grads);
            }
            let n = self.data.train.len();
            let (main_accuracy, branch_accuracy) = test(store)?;
            log.push(EpochRecord {
                stage,
                epoch,
                loss: total / n as f64,
                train_accuracy: fraction(hits, n * exits_per_sample),
                main_accuracy,
                branch_accuracy,
            });
        }
        Ok(log)
    }

    fn main_only(&self, store: &mut ParamStore<f32>) -> Result<Vec<EpochRecord>> {
        let (net, data) = (self.net, self.data);
        let points: Vec<Tensor<f32>> = data.train.iter().map(points_tensor).collect::<Result<_>>()?;
        let nb = net.branches.len();
        self.epochs(
            Stage::MainOnly,
            store,
            |name| !is_branch_param(name),
            1,
            |bind, i, _| {
                let logits = net.main_logits(bind, &points[i])?;
                let label = data.train[i].label;
                Ok((ce(&logits, label)?, usize::from(argmax(logits.data()) == label)))
            },
            |store| Ok((evaluate_main(net, store, &data.test)?, vec![None; nb])),
        )
    }

    fn branches_frozen(&self, store: &mut ParamStore<f32>) -> Result<Vec<EpochRecord>> {
        let (net, data, plan, channel) = (self.net, self.data, self.plan, self.channel);
        let train = freeze_all(net, store, &data.train)?;
        let test = freeze_all(net, store, &data.test)?;
        let nb = net.branches.len();
        let eval = eval_noise(&self.seeds);
        self.epochs(
            Stage::BranchesFrozenBackbone,
            store,
            is_branch_param,
            nb,
            |bind, i, noise| {
                let (f, c) = (&train[i], &data.train[i]);
                let (logits, _) = net.exits(bind, &f.features, c.id, &channel, noise)?;
                let mut loss = Tensor::scalar(0.0);
                let mut hits = 0;
                for l in &logits {
                    loss = loss.add(&distillation_loss(l, &f.main, c.label, plan.soft_label_temperature, plan.soft_label_weight)?)?;
                    hits += usize::from(argmax(l.data()) == c.label);
                }
                Ok((loss, hits))
            },
            |store| {
                let acc = evaluate_frozen(net, store, &test, &data.test, &channel, eval)?;
                Ok((acc.main, acc.branches.into_iter().map(Some).collect()))
            },
        )
    }

    fn joint(&self, store: &mut ParamStore<f32>) -> Result<Vec<EpochRecord>> {
        let (net, data, channel) = (self.net, self.data, self.channel);
        let points: Vec<Tensor<f32>> = data.train.iter().map(points_tensor).collect::<Result<_>>()?;
        let eval = eval_noise(&self.seeds);
        self.epochs(
            Stage::JointFineTune,
            store,
            |_| true,
            1,
            |bind, i, noise| {
                let c = &data.train[i];
                let out = net.forward(bind, &points[i], c.id, &channel, noise)?;
                let mut loss = ce(&out.main, c.label)?;
                for l in &out.branches {
                    loss = loss.add(&ce(l, c.label)?)?;
                }
                Ok((loss, usize::from(argmax(out.main.data()) == c.label)))
            },
            |store| {
                let acc = evaluate(net, store, &data.test, &channel, eval)?;
                Ok((acc.main, acc.branches.into_iter().map(Some).collect()))
            },
        )
    }
}
