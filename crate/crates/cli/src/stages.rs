use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use treeik::datagen;
use treeik::denoiser::{init_params, load_params, save_params, GoalSet, GoalSlot};
use treeik::diffusion::{log_csv, sample, train, NoiseSchedule, SampleConfig};
use treeik::evalbench::{run_benchmark, test_goals, write_report, BenchModel};
use treeik::guidance::Objective;
use treeik::kinematics::{parse_robot, RobotModel};
use treeik::refiner::{solve_batch, RefineResult, SeedSource};

use crate::config::{ObjectiveSpec, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Datagen,
    Train,
    Sample,
    Refine,
    Eval,
}

impl Stage {
    pub const PIPELINE: [Stage; 5] = [Stage::Datagen, Stage::Train, Stage::Sample, Stage::Refine, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Datagen => "datagen",
            Stage::Train => "train",
            Stage::Sample => "sample",
            Stage::Refine => "refine",
            Stage::Eval => "eval",
        }
    }
}

/// Everything a stage needs: the effective config, the run directory and the worker bound.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
}

/// Sidecar written next to each stage's outputs; its hash drives skipping.
#[derive(Debug, Serialize, Deserialize)]
struct StageMeta {
    stage: String,
    input_hash: String,
    outputs: Vec<PathBuf>,
    config: RunConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GoalSamples {
    /// Sampler seed used for this goal.
    pub seed: u64,
    pub q_source: Vec<f64>,
    /// Pose features `[x, y, z, qw, qx, qy, qz]` per slot; `None` when masked.
    pub goals: Vec<Option<[f64; 7]>>,
    pub samples: Vec<Vec<f64>>,
    pub guidance_ratio: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SamplesFile {
    pub config: RunConfig,
    pub input_hash: String,
    pub per_goal: Vec<GoalSamples>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GoalRefinement {
    pub best: RefineResult,
    pub successes: usize,
    pub seeds: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RefinedFile {
    pub config: RunConfig,
    pub input_hash: String,
    pub success_rate: f64,
    pub per_goal: Vec<GoalRefinement>,
}

impl Ctx {
    pub fn robot_path(&self) -> Result<&Path> {
        self.cfg
            .robot
            .as_deref()
            .context("no robot description configured (set `robot` in the config or pass --robot=PATH)")
    }

    pub fn robot(&self) -> Result<RobotModel> {
        let path = self.robot_path()?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading robot {}", path.display()))?;
        let model = parse_robot(&text).with_context(|| format!("parsing robot {}", path.display()))?;
        Ok(model)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.cfg.dataset.clone().unwrap_or_else(|| self.out.join("dataset.ikd"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.cfg
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn samples_path(&self) -> PathBuf {
        self.out.join("samples.json")
    }

    pub fn refined_path(&self) -> PathBuf {
        self.out.join("refined.json")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    fn meta_path(&self, stage: Stage) -> PathBuf {
        self.out.join(format!("{}.meta.json", stage.name()))
    }

    fn failed_path(&self, stage: Stage) -> PathBuf {
        self.out.join(format!("{}.failed", stage.name()))
    }

    fn inputs(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        let robot = self.robot_path()?.to_path_buf();
        Ok(match stage {
            Stage::Datagen => vec![robot],
            Stage::Train => vec![robot, self.dataset_path()],
            Stage::Sample | Stage::Eval => vec![robot, self.checkpoint_path()],
            Stage::Refine => vec![robot, self.samples_path()],
        })
    }

    fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Datagen => vec![self.dataset_path()],
            Stage::Train => vec![self.checkpoint_path(), self.out.join("train_log.csv")],
            Stage::Sample => vec![self.samples_path()],
            Stage::Refine => vec![self.refined_path()],
            Stage::Eval => {
                let name = self.cfg.eval.scenario.name();
                vec![
                    self.eval_dir().join(format!("{name}.csv")),
                    self.eval_dir().join(format!("{name}.json")),
                ]
            }
        }
    }

    /// Digest of the stage's input files and the config sections it reads.
    fn input_hash(&self, stage: Stage) -> Result<String> {
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        for p in self.inputs(stage)? {
            let bytes = std::fs::read(&p).with_context(|| format!("missing input {}", p.display()))?;
            h.update(Sha256::digest(&bytes));
        }
        let c = &self.cfg;
        let section = match stage {
            Stage::Datagen => serde_json::json!({ "seed": c.seed, "datagen": c.datagen, "workers": self.workers }),
            Stage::Train => {
                serde_json::json!({ "seed": c.seed, "arch": c.arch, "train": c.train, "workers": self.workers })
            }
            Stage::Sample => serde_json::json!({
                "seed": c.seed,
                "goals": c.goals,
                "sample": SampleConfig { workers: 0, ..c.sample.clone() },
                "objectives": c.objectives,
            }),
            Stage::Refine => serde_json::json!({ "refine": c.refine }),
            Stage::Eval => {
                serde_json::json!({ "seed": c.seed, "eval": treeik::evalbench::BenchConfig { workers: 0, ..c.eval.clone() } })
            }
        };
        h.update(serde_json::to_vec(&section)?);
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    fn up_to_date(&self, stage: Stage, hash: &str) -> bool {
        let Ok(bytes) = std::fs::read(self.meta_path(stage)) else {
            return false;
        };
        let Ok(meta) = serde_json::from_slice::<StageMeta>(&bytes) else {
            return false;
        };
        meta.input_hash == hash && meta.outputs.iter().all(|p| p.exists())
    }

    /// Runs one stage unless its recorded input hash still matches.
    pub fn run(&self, stage: Stage) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let hash = self
            .input_hash(stage)
            .with_context(|| format!("stage {} failed", stage.name()))?;
        if self.up_to_date(stage, &hash) {
            println!("{}: skipped (up-to-date)", stage.name());
            return Ok(());
        }
        let _ = std::fs::remove_file(self.meta_path(stage));
        let start = Instant::now();
        if let Err(e) = self.execute(stage, &hash) {
            let msg = format!("{e:#}");
            let _ = std::fs::write(
                self.failed_path(stage),
                format!("stage {} failed; outputs may be partial\n{msg}\n", stage.name()),
            );
            return Err(e.context(format!("stage {} failed", stage.name())));
        }
        let _ = std::fs::remove_file(self.failed_path(stage));
        let meta = StageMeta {
            stage: stage.name().into(),
            input_hash: hash,
            outputs: self.outputs(stage),
            config: self.cfg.clone(),
        };
        std::fs::write(self.meta_path(stage), serde_json::to_vec_pretty(&meta)?)?;
        println!("{}: done in {:.1} s", stage.name(), start.elapsed().as_secs_f64());
        Ok(())
    }

    fn execute(&self, stage: Stage, hash: &str) -> Result<()> {
        match stage {
            Stage::Datagen => self.datagen(),
            Stage::Train => self.train(),
            Stage::Sample => self.sample(hash),
            Stage::Refine => self.refine(hash),
            Stage::Eval => self.eval(),
        }
    }

    fn datagen(&self) -> Result<()> {
        let model = self.robot()?;
        let (data, report) = datagen::generate(&model, self.cfg.datagen.count, self.cfg.seed, self.workers)?;
        datagen::save(&data, &self.dataset_path())?;
        println!(
            "  {} records, acceptance rate {:.3}",
            data.len(),
            report.acceptance_rate()
        );
        Ok(())
    }

    fn train(&self) -> Result<()> {
        let model = self.robot()?;
        let data = datagen::load(&self.dataset_path())?;
        data.check_robot(&model)?;
        let cfg = treeik::diffusion::TrainConfig {
            seed: self.cfg.seed,
            workers: self.workers,
            ..self.cfg.train.clone()
        };
        let schedule = NoiseSchedule::default();
        // surface architecture errors before the dataset is shuffled
        init_params(self.cfg.arch, data.dof, data.n_ee, data.stats.clone(), cfg.seed)?;
        let out = train(&data, self.cfg.arch, &cfg, &schedule)?;
        save_params(&out.params, &self.checkpoint_path())?;
        std::fs::write(self.out.join("train_log.csv"), log_csv(&out.log))?;
        if let Some(last) = out.log.last() {
            println!("  {} epochs, final loss {:.5}", out.log.len(), last.loss);
        }
        Ok(())
    }

    fn objectives(&self) -> Vec<Objective> {
        self.cfg
            .objectives
            .iter()
            .map(|o| match o {
                ObjectiveSpec::WarmStart { weight, q_prior } => Objective::warm_start(q_prior.clone(), *weight),
                ObjectiveSpec::Manipulability { weight } => Objective::manipulability(*weight),
            })
            .collect()
    }

    fn sample(&self, hash: &str) -> Result<()> {
        let model = self.robot()?;
        let params = load_params(&self.checkpoint_path())?;
        let schedule = NoiseSchedule::default();
        if let Some(&bad) = self.cfg.goals.mask.iter().find(|&&k| k >= model.n_ee()) {
            bail!("goals.mask names slot {bad}, robot has {} end effectors", model.n_ee());
        }
        let objectives = self.objectives();
        let mut per_goal = Vec::new();
        for (i, (q, poses)) in test_goals(&model, self.cfg.goals.count, self.cfg.seed)?
            .into_iter()
            .enumerate()
        {
            let slots: Vec<GoalSlot> = poses
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    if self.cfg.goals.mask.contains(&k) {
                        GoalSlot::Unspecified
                    } else {
                        GoalSlot::Specified(*p)
                    }
                })
                .collect();
            let goals = GoalSet::new(slots);
            let cfg = SampleConfig {
                seed: self.cfg.seed.wrapping_add(i as u64),
                workers: self.workers,
                ..self.cfg.sample.clone()
            };
            let out = sample(&params, &model, &goals, &schedule, &cfg, &objectives)?;
            per_goal.push(GoalSamples {
                seed: cfg.seed,
                q_source: q,
                goals: goals
                    .slots
                    .iter()
                    .map(|s| match s {
                        GoalSlot::Specified(p) => Some(p.to_features()),
                        GoalSlot::Unspecified => None,
                    })
                    .collect(),
                samples: out.samples,
                guidance_ratio: out.guidance_ratio,
            });
        }
        let file = SamplesFile {
            config: self.cfg.clone(),
            input_hash: hash.to_string(),
            per_goal,
        };
        std::fs::write(self.samples_path(), serde_json::to_vec_pretty(&file)?)?;
        println!(
            "  {} goals x {} samples",
            file.per_goal.len(),
            self.cfg.sample.n_samples
        );
        Ok(())
    }

    fn refine(&self, hash: &str) -> Result<()> {
        let model = self.robot()?;
        let samples: SamplesFile = serde_json::from_slice(&std::fs::read(self.samples_path())?)
            .with_context(|| format!("reading {}", self.samples_path().display()))?;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.workers).build()?;
        let mut per_goal = Vec::new();
        for g in &samples.per_goal {
            let goals = GoalSet::new(
                g.goals
                    .iter()
                    .map(|f| match f {
                        Some(f) => GoalSlot::Specified(treeik::kinematics::Pose::from_features(f)),
                        None => GoalSlot::Unspecified,
                    })
                    .collect(),
            );
            let (best, all) =
                pool.install(|| solve_batch(&model, &goals, &g.samples, &self.cfg.refine, SeedSource::Generated))?;
            per_goal.push(GoalRefinement {
                successes: all.iter().filter(|r| r.success).count(),
                seeds: all.len(),
                best,
            });
        }
        let solved = per_goal.iter().filter(|g| g.best.success).count();
        let file = RefinedFile {
            config: self.cfg.clone(),
            input_hash: hash.to_string(),
            success_rate: solved as f64 / per_goal.len().max(1) as f64,
            per_goal,
        };
        std::fs::write(self.refined_path(), serde_json::to_vec_pretty(&file)?)?;
        println!("  solved {solved}/{} goals", file.per_goal.len());
        Ok(())
    }

    fn eval(&self) -> Result<()> {
        let model = self.robot()?;
        let params = load_params(&self.checkpoint_path())?;
        let schedule = NoiseSchedule::default();
        let cfg = treeik::evalbench::BenchConfig {
            seed: self.cfg.seed,
            workers: self.workers,
            ..self.cfg.eval.clone()
        };
        let label = model.name().to_string();
        let bench = [BenchModel {
            label: &label,
            robot: &model,
            params: &params,
            schedule: &schedule,
        }];
        let report = run_benchmark(&cfg, &bench)?;
        let (csv, _) = write_report(&report, &self.eval_dir())?;
        for r in &report.records {
            println!(
                "  {:<16} pos {:.3} mm  ang {:.3} deg  collisions {:.3}",
                r.label, r.pos_mm_mean, r.ang_deg_mean, r.collision_rate
            );
        }
        println!("  report {}", csv.display());
        Ok(())
    }
}
