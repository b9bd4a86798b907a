//! Training loops: behavior cloning and Expectation-Gradient option discovery.
//!
//! Each epoch takes a parameter snapshot, runs the E-step against it, turns
//! the posteriors into a gradient and applies one optimizer step per batch
//! unit (one trajectory, or the whole dataset in full-batch mode).

pub mod gradient;
pub mod optimizer;
pub mod vq;

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gradient::{bc_gradient, eg_gradient};
pub use optimizer::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use vq::{kmeans, vq_initialize, KMeans, VqInit};

use crate::approx::{Approximator, Architecture, Head};
use crate::error::{Error, Result};
use crate::inference::{dataset_loglikelihood, forward_backward};
use crate::policy::{FlatPolicy, HeadMode, HierarchicalPolicy};
use crate::types::{Dataset, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batch {
    /// One optimizer step per trajectory, in a freshly shuffled order each epoch.
    PerTrajectory,
    /// One optimizer step per epoch on the summed gradient.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    Vq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Joint,
    /// Options first under a fixed uniform selector, then the high level.
    Layerwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub head_mode: HeadMode,
    pub sigma: f64,
    pub epochs: usize,
    pub batch: Batch,
    pub seed: u64,
    pub dropout: f64,
    pub init: Init,
    pub schedule: Schedule,
    /// Keep training options while the high level trains in layer-wise phase 2.
    pub finetune_options: bool,
    pub optimizer: OptimizerConfig,
    pub high_arch: Architecture,
    pub option_arch: Architecture,
    pub termination_arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 2,
            head_mode: HeadMode::Categorical,
            sigma: 0.1,
            epochs: 100,
            batch: Batch::PerTrajectory,
            seed: 0,
            dropout: 0.0,
            init: Init::Random,
            schedule: Schedule::Joint,
            finetune_options: false,
            optimizer: OptimizerConfig::default(),
            high_arch: Architecture::Linear,
            option_arch: Architecture::Mlp { hidden: 64 },
            termination_arch: Architecture::Linear,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_mode == HeadMode::Categorical && self.k == 0 {
            return Err(Error::Config("k >= 1 required for the categorical head".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Training statistics of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// 1 for joint training and layer-wise phase 1, 2 for layer-wise phase 2.
    pub phase: u8,
    /// Sum of per-trajectory log-likelihoods at the parameters each was evaluated with.
    pub total_loglik: f64,
    pub heldout_loglik: Option<f64>,
    /// `Σ_{ξ,t} u_t(h)` per option.
    pub usage: Vec<f64>,
    /// Posterior mass on the physical-control branch.
    pub hc_mass: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last_loglik(&self) -> Option<f64> {
        self.records.last().map(|r| r.total_loglik)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(file).map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, out: impl Write) -> std::io::Result<()> {
        let k = self.records.iter().map(|r| r.usage.len()).max().unwrap_or(0);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "epoch".to_string(),
            "phase".into(),
            "total_loglik".into(),
            "heldout_loglik".into(),
        ];
        header.extend((0..k).map(|h| format!("usage_{h}")));
        header.push("hc_mass".into());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.phase.to_string(),
                r.total_loglik.to_string(),
                r.heldout_loglik.map(|x| x.to_string()).unwrap_or_default(),
            ];
            row.extend((0..k).map(|h| r.usage.get(h).map(|u| u.to_string()).unwrap_or_default()));
            row.push(r.hc_mass.to_string());
            w.write_record(&row)?;
        }
        w.flush()
    }
}

/// splitmix64 over a base seed and a list of tags.
pub(crate) fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base;
    for &t in std::iter::once(&0x5eed).chain(tags) {
        x = x
            .wrapping_add(t.wrapping_mul(0x9e37_79b9_7f4a_7c15))
            .wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

struct TrajStats {
    grad: Vec<f64>,
    loglik: f64,
    usage: Vec<f64>,
    hc_mass: f64,
}

/// Something the epoch loop can train.
trait Model: Sync {
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, params: &[f64]) -> Result<()>;
    fn usage_width(&self) -> usize;
    fn trajectory_step(&self, traj: &Trajectory, rng: Option<&mut dyn RngCore>) -> Result<TrajStats>;
    fn heldout(&self, data: &Dataset) -> Result<f64>;
    fn wants_rng(&self) -> bool;
}

impl Model for HierarchicalPolicy {
    fn flat_params(&self) -> Vec<f64> {
        HierarchicalPolicy::flat_params(self)
    }

    fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        HierarchicalPolicy::set_flat_params(self, params)
    }

    fn usage_width(&self) -> usize {
        self.k()
    }

    fn trajectory_step(&self, traj: &Trajectory, rng: Option<&mut dyn RngCore>) -> Result<TrajStats> {
        let post = forward_backward(self, traj)?;
        let mut grad = vec![0.0; self.param_len()];
        gradient::eg_gradient_into(self, traj, &post, &mut grad, rng)?;
        let mut usage = vec![0.0; self.k()];
        for row in &post.u {
            for (u, p) in usage.iter_mut().zip(row) {
                *u += p;
            }
        }
        let hc_mass = post.vc.as_ref().map_or(0.0, |vc| vc.iter().sum());
        Ok(TrajStats {
            grad,
            loglik: post.loglik,
            usage,
            hc_mass,
        })
    }

    fn heldout(&self, data: &Dataset) -> Result<f64> {
        dataset_loglikelihood(self, data)
    }

    fn wants_rng(&self) -> bool {
        self.high().dropout() > 0.0
            || self
                .options()
                .iter()
                .any(|o| o.policy.dropout() > 0.0 || o.termination.dropout() > 0.0)
    }
}

impl Model for FlatPolicy {
    fn flat_params(&self) -> Vec<f64> {
        self.net.params().to_vec()
    }

    fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.net.params().len() {
            return Err(Error::dim(
                "flat policy parameters",
                self.net.params().len(),
                params.len(),
            ));
        }
        self.net.params_mut().copy_from_slice(params);
        Ok(())
    }

    fn usage_width(&self) -> usize {
        0
    }

    fn trajectory_step(&self, traj: &Trajectory, rng: Option<&mut dyn RngCore>) -> Result<TrajStats> {
        let mut grad = vec![0.0; self.net.params().len()];
        let dropout = rng.is_some();
        let mut loglik = gradient::bc_gradient_into(self, traj, &mut grad, rng)?;
        if dropout {
            // log the deterministic likelihood, as the hierarchical path does
            loglik = 0.0;
            for (s, a) in traj.states.iter().zip(&traj.controls) {
                loglik += self.net.log_prob(
                    s,
                    crate::approx::Target::Control {
                        action: a,
                        sigma: self.sigma,
                    },
                )?;
            }
        }
        Ok(TrajStats {
            grad,
            loglik,
            usage: Vec::new(),
            hc_mass: traj.len() as f64,
        })
    }

    fn heldout(&self, data: &Dataset) -> Result<f64> {
        flat_loglikelihood(self, data)
    }

    fn wants_rng(&self) -> bool {
        self.net.dropout() > 0.0
    }
}

/// Total Gaussian log-likelihood of a flat policy on a dataset.
pub fn flat_loglikelihood(policy: &FlatPolicy, data: &Dataset) -> Result<f64> {
    let lls: Result<Vec<f64>> = data
        .trajectories()
        .par_iter()
        .map(|traj| {
            traj.states
                .iter()
                .zip(&traj.controls)
                .map(|(s, a)| {
                    policy.net.log_prob(
                        s,
                        crate::approx::Target::Control {
                            action: a,
                            sigma: policy.sigma,
                        },
                    )
                })
                .sum::<Result<f64>>()
        })
        .collect();
    Ok(lls?.iter().sum())
}

struct Phase<'a> {
    id: u8,
    epochs: usize,
    trainable: Vec<Range<usize>>,
    heldout: Option<&'a Dataset>,
}

fn run_phase<M: Model>(
    model: &mut M,
    data: &Dataset,
    cfg: &TrainConfig,
    phase: Phase<'_>,
    log: &mut TrainLog,
) -> Result<()> {
    let mut params = model.flat_params();
    let trainable_len: usize = phase.trainable.iter().map(|r| r.len()).sum();
    let mut opt = OptimizerState::new(cfg.optimizer, trainable_len)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5a, phase.id as u64]));
    let mut sub_params = vec![0.0; trainable_len];
    let mut sub_grad = vec![0.0; trainable_len];
    let wants_rng = model.wants_rng();
    let traj_rng = |epoch: usize, index: usize| {
        ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[0xd0, phase.id as u64, epoch as u64, index as u64],
        ))
    };

    let mut apply = |model: &mut M, params: &mut Vec<f64>, grad: &[f64]| -> Result<()> {
        let mut at = 0;
        for r in &phase.trainable {
            sub_params[at..at + r.len()].copy_from_slice(&params[r.clone()]);
            sub_grad[at..at + r.len()].copy_from_slice(&grad[r.clone()]);
            at += r.len();
        }
        opt.step(&mut sub_params, &sub_grad)?;
        let mut at = 0;
        for r in &phase.trainable {
            params[r.clone()].copy_from_slice(&sub_params[at..at + r.len()]);
            at += r.len();
        }
        model.set_flat_params(params)
    };

    let epoch_base = log.records.len();
    for epoch in 0..phase.epochs {
        let mut record = EpochRecord {
            epoch: epoch_base + epoch + 1,
            phase: phase.id,
            total_loglik: 0.0,
            heldout_loglik: None,
            usage: vec![0.0; model.usage_width()],
            hc_mass: 0.0,
        };
        let absorb = |record: &mut EpochRecord, stats: &TrajStats| {
            record.total_loglik += stats.loglik;
            for (u, x) in record.usage.iter_mut().zip(&stats.usage) {
                *u += x;
            }
            record.hc_mass += stats.hc_mass;
        };
        match cfg.batch {
            Batch::PerTrajectory => {
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.shuffle(&mut shuffle);
                for &i in &order {
                    let mut rng = traj_rng(epoch, i);
                    let stats = model.trajectory_step(
                        &data.trajectories()[i],
                        wants_rng.then_some(&mut rng as &mut dyn RngCore),
                    )?;
                    absorb(&mut record, &stats);
                    apply(model, &mut params, &stats.grad)?;
                }
            }
            Batch::Full => {
                let snapshot: &M = model;
                let all: Vec<TrajStats> = data
                    .trajectories()
                    .par_iter()
                    .enumerate()
                    .map(|(i, traj)| {
                        let mut rng = traj_rng(epoch, i);
                        snapshot.trajectory_step(traj, wants_rng.then_some(&mut rng as &mut dyn RngCore))
                    })
                    .collect::<Result<_>>()?;
                let mut total = vec![0.0; params.len()];
                for stats in &all {
                    absorb(&mut record, stats);
                    for (t, g) in total.iter_mut().zip(&stats.grad) {
                        *t += g;
                    }
                }
                apply(model, &mut params, &total)?;
            }
        }
        if let Some(h) = phase.heldout {
            record.heldout_loglik = Some(model.heldout(h)?);
        }
        log.records.push(record);
    }
    Ok(())
}

fn init_rng(cfg: &TrainConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x1417]))
}

/// Fits a flat Gaussian policy by maximum likelihood.
pub fn bc_train(data: &Dataset, arch: Architecture, cfg: &TrainConfig) -> Result<(FlatPolicy, TrainLog)> {
    bc_train_with_heldout(data, arch, cfg, None)
}

pub fn bc_train_with_heldout(
    data: &Dataset,
    arch: Architecture,
    cfg: &TrainConfig,
    heldout: Option<&Dataset>,
) -> Result<(FlatPolicy, TrainLog)> {
    let mut rng = init_rng(cfg);
    let net = Approximator::new(
        arch,
        Head::Gaussian {
            dim: data.control_dim(),
        },
        data.state_dim(),
        &mut rng,
    )
    .with_dropout(cfg.dropout)?;
    let mut policy = FlatPolicy::new(net, cfg.sigma)?;
    let mut log = TrainLog::default();
    let len = policy.net.params().len();
    run_phase(
        &mut policy,
        data,
        cfg,
        Phase {
            id: 1,
            epochs: cfg.epochs,
            trainable: std::iter::once(0..len).collect(),
            heldout,
        },
        &mut log,
    )?;
    Ok((policy, log))
}

/// Initial policy for `cfg`: random or vector-quantized options, random high level.
pub fn initial_policy(data: &Dataset, cfg: &TrainConfig) -> Result<HierarchicalPolicy> {
    cfg.validate()?;
    let mut rng = init_rng(cfg);
    let policy = HierarchicalPolicy::init(
        cfg.head_mode,
        cfg.k,
        data.state_dim(),
        data.control_dim(),
        cfg.sigma,
        cfg.high_arch,
        cfg.option_arch,
        cfg.termination_arch,
        &mut rng,
    )?
    .with_dropout(cfg.dropout)?;
    match cfg.init {
        Init::Vq if cfg.k > 0 => {
            let (mode, sigma, high, _) = policy.into_parts();
            let init = vq_initialize(data, cfg.k, cfg)?;
            HierarchicalPolicy::new(mode, sigma, high, init.options)
        }
        _ => Ok(policy),
    }
}

/// Expectation-Gradient training of a hierarchical policy.
pub fn ddco_train(data: &Dataset, cfg: &TrainConfig) -> Result<(HierarchicalPolicy, TrainLog)> {
    ddco_train_with_heldout(data, cfg, None)
}

pub fn ddco_train_with_heldout(
    data: &Dataset,
    cfg: &TrainConfig,
    heldout: Option<&Dataset>,
) -> Result<(HierarchicalPolicy, TrainLog)> {
    let policy = initial_policy(data, cfg)?;
    ddco_train_from(policy, data, cfg, heldout)
}

/// Expectation-Gradient training starting from a given policy.
pub fn ddco_train_from(
    mut policy: HierarchicalPolicy,
    data: &Dataset,
    cfg: &TrainConfig,
    heldout: Option<&Dataset>,
) -> Result<(HierarchicalPolicy, TrainLog)> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    let layerwise = cfg.schedule == Schedule::Layerwise && policy.k() > 0;
    if !layerwise {
        let all = 0..policy.param_len();
        run_phase(
            &mut policy,
            data,
            cfg,
            Phase {
                id: 1,
                epochs: cfg.epochs,
                trainable: vec![all],
                heldout,
            },
            &mut log,
        )?;
        return Ok((policy, log));
    }

    // Phase 1: options under a uniform selector with no physical-control branch.
    let first = cfg.epochs.div_ceil(2);
    let uniform = Approximator::zeros(
        Architecture::Linear,
        Head::Softmax { classes: policy.k() },
        policy.state_dim(),
    );
    let mut lower = HierarchicalPolicy::new(
        HeadMode::Categorical,
        policy.sigma(),
        uniform,
        policy.options().to_vec(),
    )?;
    let options = lower.options_range();
    run_phase(
        &mut lower,
        data,
        cfg,
        Phase {
            id: 1,
            epochs: first,
            trainable: vec![options],
            heldout,
        },
        &mut log,
    )?;
    let (_, _, _, trained) = lower.into_parts();
    policy.replace_options(trained);

    // Phase 2: the high level over the discovered options.
    let mut trainable = vec![policy.high_range()];
    if cfg.finetune_options {
        trainable.push(policy.options_range());
    }
    run_phase(
        &mut policy,
        data,
        cfg,
        Phase {
            id: 2,
            epochs: cfg.epochs - first,
            trainable,
            heldout,
        },
        &mut log,
    )?;
    Ok((policy, log))
}
