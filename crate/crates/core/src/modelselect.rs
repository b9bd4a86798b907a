//! Choosing the number of options and measuring run-to-run consistency.

use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::approx::{HeadOutput, Mode};
use crate::error::{Error, Result};
use crate::inference::{annotate_segments, dataset_loglikelihood, dataset_logliks};
use crate::policy::HierarchicalPolicy;
use crate::training::{ddco_train, derive_seed, Init, Schedule, TrainConfig, TrainLog};
use crate::types::Dataset;

pub const DEFAULT_FOLDS: usize = 10;

/// Held-out fold index lists. Trajectories are shuffled once and cut into
/// contiguous folds; fewer trajectories than folds gives leave-one-out.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let folds = folds.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xf01d])));
    (0..folds)
        .map(|f| order[f * n / folds..(f + 1) * n / folds].to_vec())
        .collect()
}

/// Mean over trajectories of log-likelihood per step.
pub fn heldout_per_step(policy: &HierarchicalPolicy, data: &Dataset) -> Result<f64> {
    let lls = dataset_logliks(policy, data)?;
    let total: f64 = data
        .trajectories()
        .iter()
        .zip(&lls)
        .map(|(t, ll)| ll / t.len() as f64)
        .sum();
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub k: usize,
    pub fold: usize,
    /// `Err` carries the failure message of a fold that could not be trained.
    pub heldout_loglik_per_step: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSummary {
    pub k: usize,
    /// `None` when any fold failed.
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub summary: Vec<KSummary>,
    pub selected_k: usize,
    pub policy: HierarchicalPolicy,
    pub log: TrainLog,
}

impl CvReport {
    pub fn write_folds_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "fold", "heldout_loglik_per_step"])?;
        for r in &self.folds {
            let v = match &r.heldout_loglik_per_step {
                Ok(x) => x.to_string(),
                Err(_) => "NaN".into(),
            };
            w.write_record([r.k.to_string(), r.fold.to_string(), v])?;
        }
        w.flush()
    }

    pub fn write_summary_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "mean", "stderr", "selected"])?;
        let opt = |x: Option<f64>| x.map_or_else(|| "NaN".into(), |v| v.to_string());
        for s in &self.summary {
            w.write_record([
                s.k.to_string(),
                opt(s.mean),
                opt(s.stderr),
                u8::from(s.selected).to_string(),
            ])?;
        }
        w.flush()
    }
}

/// k-fold cross-validation over `k_candidates`, then a final fit of the
/// selected `k` on all data. Ties go to the smaller `k`.
pub fn cross_validate_k(data: &Dataset, k_candidates: &[usize], cfg: &TrainConfig, folds: usize) -> Result<CvReport> {
    if k_candidates.is_empty() {
        return Err(Error::Config("no candidate k values".into()));
    }
    let assignment = fold_assignment(data.len(), folds, cfg.seed);
    let n_folds = assignment.len();
    if n_folds < 2 {
        return Err(Error::Config("cross-validation needs at least two trajectories".into()));
    }
    let splits: Vec<(Dataset, Dataset)> = (0..n_folds)
        .map(|f| {
            let train: Vec<usize> = assignment
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect();
            Ok((data.subset(&train)?, data.subset(&assignment[f])?))
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = k_candidates
        .iter()
        .flat_map(|&k| (0..n_folds).map(move |f| (k, f)))
        .collect();
    let results: Vec<FoldResult> = jobs
        .par_iter()
        .map(|&(k, f)| {
            let (train, test) = &splits[f];
            let fold_cfg = TrainConfig { k, ..cfg.clone() };
            let score = ddco_train(train, &fold_cfg)
                .and_then(|(p, _)| heldout_per_step(&p, test))
                .map_err(|e| e.to_string());
            if let Err(msg) = &score {
                warn!("k = {k}, fold {f} failed: {msg}");
            }
            FoldResult {
                k,
                fold: f,
                heldout_loglik_per_step: score,
            }
        })
        .collect();

    let mut summary: Vec<KSummary> = k_candidates
        .iter()
        .map(|&k| {
            let scores: Option<Vec<f64>> = results
                .iter()
                .filter(|r| r.k == k)
                .map(|r| {
                    r.heldout_loglik_per_step
                        .as_ref()
                        .ok()
                        .copied()
                        .filter(|x| x.is_finite())
                })
                .collect();
            let (mean, stderr) = match scores {
                Some(s) => {
                    let n = s.len() as f64;
                    let mean = s.iter().sum::<f64>() / n;
                    let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                    (Some(mean), Some((var / n).sqrt()))
                }
                None => (None, None),
            };
            KSummary {
                k,
                mean,
                stderr,
                selected: false,
            }
        })
        .collect();
    let best = summary
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.mean.map(|m| (i, s.k, m)))
        .fold(None, |acc: Option<(usize, usize, f64)>, cur| match acc {
            Some(a) if a.2 > cur.2 || (a.2 == cur.2 && a.1 <= cur.1) => Some(a),
            _ => Some(cur),
        })
        .ok_or_else(|| Error::Config("every candidate k failed in cross-validation".into()))?;
    summary[best.0].selected = true;
    let selected_k = best.1;
    let (policy, log) = ddco_train(
        data,
        &TrainConfig {
            k: selected_k,
            ..cfg.clone()
        },
    )?;
    Ok(CvReport {
        folds: results,
        summary,
        selected_k,
        policy,
        log,
    })
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `I(A;B)/sqrt(H(A)H(B))`. Two constant
/// labelings score 1; exactly one constant labeling scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("label sequence", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Config("nmi of empty labelings".into()));
    }
    let index = |labels: &[usize]| {
        let mut distinct: Vec<usize> = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let mapped: Vec<usize> = labels
            .iter()
            .map(|l| distinct.binary_search(l).expect("label present"))
            .collect();
        (mapped, distinct.len())
    };
    let (ia, na) = index(a);
    let (ib, nb) = index(b);
    let n = a.len() as f64;
    let mut joint = vec![0usize; na * nb];
    let mut ca = vec![0usize; na];
    let mut cb = vec![0usize; nb];
    for (&x, &y) in ia.iter().zip(&ib) {
        joint[x * nb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let ha = entropy(ca.iter().copied(), n);
    let hb = entropy(cb.iter().copied(), n);
    match (na == 1, nb == 1) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let hab = entropy(joint.iter().copied(), n);
    let mi = (ha + hb - hab).max(0.0);
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Concatenated most-likely-option labels over a dataset.
pub fn dataset_labels(policy: &HierarchicalPolicy, data: &Dataset) -> Result<Vec<usize>> {
    let per: Vec<Vec<usize>> = data
        .trajectories()
        .par_iter()
        .map(|t| annotate_segments(policy, t))
        .collect::<Result<_>>()?;
    Ok(per.concat())
}

/// Average high-level probability on options and on physical control over all visited states.
pub fn selection_mass(policy: &HierarchicalPolicy, data: &Dataset) -> Result<(f64, f64)> {
    let mut hc = 0.0;
    let mut n = 0usize;
    for traj in data.trajectories() {
        for s in &traj.states[..traj.len()] {
            if let HeadOutput::Hybrid { log_probs, .. } = policy.high().forward(s, Mode::Eval)? {
                hc += log_probs[0].exp();
            }
            n += 1;
        }
    }
    let hc = hc / n as f64;
    Ok((1.0 - hc, hc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeReport {
    pub init: Init,
    pub schedule: Schedule,
    pub seeds: Vec<u64>,
    pub final_logliks: Vec<f64>,
    /// Sample variance (n − 1 denominator) of the final log-likelihoods.
    pub loglik_variance: f64,
    pub mean_pairwise_nmi: f64,
    pub option_mass: f64,
    pub hc_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub regimes: Vec<RegimeReport>,
}

impl StabilityReport {
    pub fn regime(&self, init: Init, schedule: Schedule) -> Option<&RegimeReport> {
        self.regimes.iter().find(|r| r.init == init && r.schedule == schedule)
    }

    pub fn write_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "init",
            "schedule",
            "seeds",
            "mean_loglik",
            "loglik_variance",
            "mean_pairwise_nmi",
            "option_mass",
            "hc_mass",
        ])?;
        for r in &self.regimes {
            let mean = r.final_logliks.iter().sum::<f64>() / r.final_logliks.len() as f64;
            w.write_record([
                format!("{:?}", r.init).to_lowercase(),
                format!("{:?}", r.schedule).to_lowercase(),
                r.seeds.len().to_string(),
                mean.to_string(),
                r.loglik_variance.to_string(),
                r.mean_pairwise_nmi.to_string(),
                r.option_mass.to_string(),
                r.hc_mass.to_string(),
            ])?;
        }
        w.flush()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file).map_err(|e| Error::io(path, e))
    }
}

pub const REGIMES: [(Init, Schedule); 4] = [
    (Init::Random, Schedule::Joint),
    (Init::Random, Schedule::Layerwise),
    (Init::Vq, Schedule::Joint),
    (Init::Vq, Schedule::Layerwise),
];

/// Trains with seeds `0..n_seeds` under each initialization/schedule regime.
pub fn stability_report(data: &Dataset, k: usize, n_seeds: usize, cfg: &TrainConfig) -> Result<StabilityReport> {
    let seeds: Vec<u64> = (0..n_seeds as u64).collect();
    stability_report_with_seeds(data, k, &seeds, &REGIMES, cfg)
}

pub fn stability_report_with_seeds(
    data: &Dataset,
    k: usize,
    seeds: &[u64],
    regimes: &[(Init, Schedule)],
    cfg: &TrainConfig,
) -> Result<StabilityReport> {
    if seeds.len() < 2 {
        return Err(Error::Config("stability needs at least two seeds".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..regimes.len())
        .flat_map(|r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let runs: Vec<(f64, Vec<usize>, (f64, f64))> = jobs
        .par_iter()
        .map(|&(r, seed)| {
            let (init, schedule) = regimes[r];
            let run_cfg = TrainConfig {
                k,
                seed,
                init,
                schedule,
                ..cfg.clone()
            };
            let (policy, _) = ddco_train(data, &run_cfg)?;
            Ok((
                dataset_loglikelihood(&policy, data)?,
                dataset_labels(&policy, data)?,
                selection_mass(&policy, data)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::with_capacity(regimes.len());
    for (r, &(init, schedule)) in regimes.iter().enumerate() {
        let mine = &runs[r * seeds.len()..(r + 1) * seeds.len()];
        let lls: Vec<f64> = mine.iter().map(|m| m.0).collect();
        let n = lls.len() as f64;
        let mean = lls.iter().sum::<f64>() / n;
        let variance = lls.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let mut nmi_sum = 0.0;
        let mut pairs = 0;
        for i in 0..mine.len() {
            for j in i + 1..mine.len() {
                nmi_sum += nmi(&mine[i].1, &mine[j].1)?;
                pairs += 1;
            }
        }
        reports.push(RegimeReport {
            init,
            schedule,
            seeds: seeds.to_vec(),
            final_logliks: lls,
            loglik_variance: variance,
            mean_pairwise_nmi: nmi_sum / pairs as f64,
            option_mass: mine.iter().map(|m| m.2 .0).sum::<f64>() / n,
            hc_mass: mine.iter().map(|m| m.2 .1).sum::<f64>() / n,
        });
    }
    Ok(StabilityReport { regimes: reports })
}
