//! Dataset, label sidecar and checkpoint files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::approx::{Approximator, Architecture, Head};
use crate::error::{Error, Result};
use crate::policy::{FlatPolicy, HeadMode, HierarchicalPolicy, OptionSpec};
use crate::types::{Dataset, Trajectory};

pub const FORMAT_VERSION: u32 = 1;

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, &r).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses one trajectory per line. Line numbers in errors are 1-based.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let trajectories = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str::<Trajectory>(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_lines(path, data.trajectories().iter())
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    labels: Vec<usize>,
}

/// Per-step option labels, one line per trajectory.
pub fn load_labels(path: &Path) -> Result<Vec<Vec<usize>>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str::<LabelRecord>(line)
                .map(|r| r.labels)
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn save_labels(path: &Path, labels: &[Vec<usize>]) -> Result<()> {
    write_lines(path, labels.iter().map(|l| LabelRecord { labels: l.clone() }))
}

/// Checks that labels line up with a dataset, step for step.
pub fn check_labels(data: &Dataset, labels: &[Vec<usize>]) -> Result<()> {
    if labels.len() != data.len() {
        return Err(Error::dim("label records", data.len(), labels.len()));
    }
    for (i, (traj, l)) in data.trajectories().iter().zip(labels).enumerate() {
        if l.len() != traj.len() {
            return Err(Error::InvalidRecord {
                line: i + 1,
                violations: vec![format!("{} labels for {} steps", l.len(), traj.len())],
            });
        }
    }
    Ok(())
}

/// A policy as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Flat(FlatPolicy),
    Hierarchical(HierarchicalPolicy),
}

impl Policy {
    pub fn state_dim(&self) -> usize {
        match self {
            Policy::Flat(p) => p.state_dim(),
            Policy::Hierarchical(p) => p.state_dim(),
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Policy::Flat(p) => p.control_dim(),
            Policy::Hierarchical(p) => p.control_dim(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct NetBlock {
    architecture: Architecture,
    head: Head,
    input_dim: usize,
    #[serde(default)]
    dropout: f64,
    params: Vec<f64>,
}

impl NetBlock {
    fn from_net(net: &Approximator) -> Self {
        NetBlock {
            architecture: net.architecture(),
            head: net.head(),
            input_dim: net.input_dim(),
            dropout: net.dropout(),
            params: net.params().to_vec(),
        }
    }

    fn into_net(self, what: &str) -> Result<Approximator> {
        let expected = Approximator::param_len(self.architecture, self.head, self.input_dim);
        if self.params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{what}: descriptor needs {expected} parameters, found {}",
                self.params.len()
            )));
        }
        Approximator::from_params(self.architecture, self.head, self.input_dim, self.params)?.with_dropout(self.dropout)
    }
}

#[derive(Serialize, Deserialize)]
struct OptionBlock {
    policy: NetBlock,
    termination: NetBlock,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    head_mode: String,
    k: usize,
    sigma: f64,
    d_s: usize,
    d_a: usize,
    high: NetBlock,
    options: Vec<OptionBlock>,
}

fn head_mode_name(mode: HeadMode) -> &'static str {
    match mode {
        HeadMode::Categorical => "categorical",
        HeadMode::Hybrid => "hybrid",
    }
}

pub fn checkpoint_to_string(policy: &Policy) -> String {
    let file = match policy {
        Policy::Flat(p) => CheckpointFile {
            format_version: FORMAT_VERSION,
            head_mode: "flat".into(),
            k: 0,
            sigma: p.sigma,
            d_s: p.state_dim(),
            d_a: p.control_dim(),
            high: NetBlock::from_net(&p.net),
            options: Vec::new(),
        },
        Policy::Hierarchical(p) => CheckpointFile {
            format_version: FORMAT_VERSION,
            head_mode: head_mode_name(p.head_mode()).into(),
            k: p.k(),
            sigma: p.sigma(),
            d_s: p.state_dim(),
            d_a: p.control_dim(),
            high: NetBlock::from_net(p.high()),
            options: p
                .options()
                .iter()
                .map(|o| OptionBlock {
                    policy: NetBlock::from_net(&o.policy),
                    termination: NetBlock::from_net(&o.termination),
                })
                .collect(),
        },
    };
    serde_json::to_string_pretty(&file).expect("checkpoint values are finite")
}

pub fn checkpoint_from_str(text: &str) -> Result<Policy> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| {
        if e.is_eof() {
            Error::Checkpoint("unexpected end of checkpoint".into())
        } else {
            Error::Checkpoint(format!("malformed checkpoint: {e}"))
        }
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    if file.options.len() != file.k {
        return Err(Error::Checkpoint(format!(
            "descriptor declares k = {} but {} option blocks are present",
            file.k,
            file.options.len()
        )));
    }
    let high = file.high.into_net("high")?;
    if high.input_dim() != file.d_s {
        return Err(Error::Checkpoint(format!(
            "high-level input {} disagrees with d_s = {}",
            high.input_dim(),
            file.d_s
        )));
    }
    let policy = match file.head_mode.as_str() {
        "flat" => {
            if high.head() != (Head::Gaussian { dim: file.d_a }) {
                return Err(Error::Checkpoint(
                    "flat policy needs a gaussian head of width d_a".into(),
                ));
            }
            Policy::Flat(FlatPolicy::new(high, file.sigma)?)
        }
        name => {
            let mode = match name {
                "categorical" => HeadMode::Categorical,
                "hybrid" => HeadMode::Hybrid,
                other => return Err(Error::Checkpoint(format!("unknown head mode {other:?}"))),
            };
            let options = file
                .options
                .into_iter()
                .enumerate()
                .map(|(h, o)| {
                    OptionSpec::new(
                        o.policy.into_net(&format!("option {h} policy"))?,
                        o.termination.into_net(&format!("option {h} termination"))?,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let p = HierarchicalPolicy::new(mode, file.sigma, high, options)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            if p.control_dim() != file.d_a {
                return Err(Error::Checkpoint(format!(
                    "control dimension {} disagrees with d_a = {}",
                    p.control_dim(),
                    file.d_a
                )));
            }
            Policy::Hierarchical(p)
        }
    };
    Ok(policy)
}

pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(policy)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}

/// Loads a checkpoint that must hold a hierarchical policy.
pub fn load_hierarchical(path: &Path) -> Result<HierarchicalPolicy> {
    match load_checkpoint(path)? {
        Policy::Hierarchical(p) => Ok(p),
        Policy::Flat(_) => Err(Error::Checkpoint(format!("{} holds a flat policy", path.display()))),
    }
}

/// Per-trajectory log-likelihood CSV: `trajectory,steps,loglik`.
pub fn write_logliks_csv(path: &Path, data: &Dataset, logliks: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut write = || -> csv::Result<()> {
        w.write_record(["trajectory", "steps", "loglik"])?;
        for (i, (traj, ll)) in data.trajectories().iter().zip(logliks).enumerate() {
            w.write_record([i.to_string(), traj.len().to_string(), ll.to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| Error::io(path, e.into()))
}
