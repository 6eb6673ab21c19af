use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use treeik::denoiser::ArchConfig;
use treeik::diffusion::{SampleConfig, TrainConfig};
use treeik::evalbench::BenchConfig;
use treeik::refiner::RefineConfig;

/// Keys that may be overridden without a section prefix.
pub const TOP_LEVEL_KEYS: [&str; 4] = ["robot", "dataset", "checkpoint", "seed"];

/// Environment variable consulted when `--workers` is absent.
pub const WORKERS_ENV: &str = "TREEIK_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub count: usize,
}

impl Default for DatagenSection {
    fn default() -> Self {
        Self { count: 20_000 }
    }
}

/// Test goals for the `sample` stage: fresh configurations pushed through FK.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoalsSection {
    pub count: usize,
    /// End-effector slots left unspecified in every goal.
    pub mask: Vec<usize>,
}

impl Default for GoalsSection {
    fn default() -> Self {
        Self {
            count: 8,
            mask: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    WarmStart { weight: f64, q_prior: Vec<f64> },
    Manipulability { weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub robot: Option<PathBuf>,
    /// Defaults to `<out>/dataset.ikd`.
    pub dataset: Option<PathBuf>,
    /// Defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub datagen: DatagenSection,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub goals: GoalsSection,
    pub sample: SampleConfig,
    pub objectives: Vec<ObjectiveSpec>,
    pub refine: RefineConfig,
    pub eval: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            robot: None,
            dataset: None,
            checkpoint: None,
            seed: 0,
            datagen: DatagenSection::default(),
            arch: ArchConfig::default(),
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            goals: GoalsSection::default(),
            sample: SampleConfig::default(),
            objectives: Vec::new(),
            refine: RefineConfig::default(),
            eval: BenchConfig {
                n_goals: 100,
                ..BenchConfig::default()
            },
        }
    }
}

/// Splits `--key=value` overrides from the remaining arguments.
///
/// An override key either contains a dot (`--train.epochs=5`) or is one of
/// [`TOP_LEVEL_KEYS`].
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some((k, v)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            if k.contains('.') || TOP_LEVEL_KEYS.contains(&k) {
                overrides.push((k.to_string(), v.to_string()));
                continue;
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn parse_value(raw: &str) -> toml::Value {
    // wrap the bare value so TOML parses numbers, booleans and arrays
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for s in sections {
        let entry = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {key}: {s} is not a section"),
        };
    }
    cur.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// Reads the config file (if any), applies overrides, and resolves relative
/// paths against the config file's directory.
pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
    let base = path.and_then(Path::parent).unwrap_or(Path::new(""));
    for p in [&mut cfg.robot, &mut cfg.dataset, &mut cfg.checkpoint]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

/// `--workers`, then the environment, then 1.
pub fn resolve_workers(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .parse()
                .with_context(|| format!("{WORKERS_ENV}={v} is not a worker count"))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        bail!("worker count must be at least 1");
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "robot = \"r.toml\"\nseed = 3\n[train]\nepochs = 7\n").unwrap();
        let (rest, ov) = split_overrides(vec![
            "--train.epochs=2".into(),
            "--seed=9".into(),
            "--goals.mask=[1]".into(),
            "--out".into(),
        ]);
        assert_eq!(rest, vec!["--out".to_string()]);
        let cfg = load(Some(&path), &ov).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.goals.mask, vec![1]);
        assert_eq!(cfg.robot.unwrap(), dir.path().join("r.toml"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load(None, &[("train.epoch".into(), "2".into())]).unwrap_err();
        assert!(format!("{err:#}").contains("epoch"));
    }

    #[test]
    fn bare_strings_survive() {
        let cfg = load(None, &[("eval.scenario".into(), "task2_seeding".into())]).unwrap();
        assert_eq!(cfg.eval.scenario.name(), "task2_seeding");
    }
}
