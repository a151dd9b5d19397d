//! Configured jobs that write their results to a run directory.
//!
//! Every job first writes `manifest.json`, then its outputs. Re-running a
//! manifest with [`rerun`] repeats the job from the recorded configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::ddpg::{
    evaluate, random_baseline, train_curriculum, CurriculumPlan, Environment, InitMode, KvEnv,
    RuntimePolicy, TrainSession,
};
use crate::error::{Error, Result};
use crate::experiments::{
    run_1d_study, run_comparison, scalar_csv, train_1d_agent, ComparisonConfig,
};
use crate::kv::{integrate, Lattice};
use crate::nnet::checkpoint::Checkpoint;
use crate::reward::{failure_reward, penalty};
use crate::runlog::{read_log, Job, Manifest, RunLog};

/// Environment variable naming the directory under which relative output
/// paths are placed.
pub const OUTPUT_ROOT_VAR: &str = "ESDRL_OUTPUT_ROOT";

pub const CURVE_LOG: &str = "curve.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    /// Files written, relative to `dir`, in the order they were written.
    pub files: Vec<String>,
    pub summary: Value,
}

/// `ESDRL_OUTPUT_ROOT`, or `runs` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// The run directory: the explicit path, else `output` from the config,
/// else the job name. Relative paths go under [`output_root`].
pub fn output_dir(explicit: Option<&Path>, cfg: &RunConfig, job: &Job) -> PathBuf {
    let p = explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(job.name()));
    if p.is_absolute() {
        p
    } else {
        output_root().join(p)
    }
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.into());
        }
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(p, text)?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.text(name, &text)
    }
}

/// Validates the configuration, records the manifest in `out` and runs the job.
pub fn execute(job: &Job, cfg: &RunConfig, overrides: &[String], out: &Path) -> Result<RunOutcome> {
    let lattice = cfg.validate()?;
    if *job == Job::Experiment {
        cfg.validate_experiment(&lattice)?;
    }
    std::fs::create_dir_all(out)?;
    let manifest = Manifest::new(job.clone(), cfg, overrides)?;
    manifest.save(out)?;
    let mut w = Writer {
        dir: out.to_path_buf(),
        files: vec![crate::runlog::MANIFEST_FILE.into()],
    };
    let summary = match job {
        Job::Simulate => simulate(cfg, &lattice, &mut w)?,
        Job::Train { resume } => {
            let plan = cfg.validate_training(&lattice)?;
            train(cfg, lattice, plan, resume.as_deref(), &mut w)?
        }
        Job::Evaluate => evaluate_job(cfg, lattice, &mut w)?,
        Job::Experiment => experiment(cfg, &lattice, &mut w)?,
        Job::Export { run } => export(Path::new(run), &mut w)?,
    };
    Ok(RunOutcome {
        dir: w.dir,
        files: w.files,
        summary,
    })
}

/// Repeats the run recorded in a manifest, writing into `out`.
pub fn rerun(manifest: &Path, out: &Path) -> Result<RunOutcome> {
    let m = Manifest::load(manifest)?;
    m.verify_inputs()?;
    execute(&m.job, &m.config, &m.overrides, out)
}

fn simulate(cfg: &RunConfig, lattice: &Lattice, w: &mut Writer) -> Result<Value> {
    let u = lattice.nominal_strengths();
    let traj = integrate(lattice, &u, &cfg.init);
    w.text("trajectory.csv", &traj.to_csv())?;
    let summary = match penalty(&traj, &cfg.reward) {
        Ok(b) => {
            json!({ "feasible": traj.feasible, "reward": b.reward, "breakdown": b, "settings": u })
        }
        Err(e) => json!({
            "feasible": false,
            "reward": failure_reward(&cfg.reward),
            "reason": e.to_string(),
            "settings": u,
        }),
    };
    w.json(SUMMARY_FILE, &summary)?;
    Ok(summary)
}

fn kv_env(cfg: &RunConfig, lattice: Lattice) -> Result<KvEnv> {
    let env = KvEnv::new(
        lattice,
        cfg.reward.clone(),
        cfg.ddpg.observation.clone(),
        cfg.ddpg.action_fraction,
        cfg.ddpg.horizon,
        InitMode::Fixed(cfg.curriculum.init),
    )?;
    match &cfg.disturbance {
        Some(d) => env.with_disturbance(d.clone()),
        None => Ok(env),
    }
}

fn train(
    cfg: &RunConfig,
    lattice: Lattice,
    plan: CurriculumPlan,
    resume: Option<&str>,
    w: &mut Writer,
) -> Result<Value> {
    let mut env = kv_env(cfg, lattice)?;
    let (mut session, mut log) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(Path::new(path))?;
            let session = TrainSession::resume(&ck, &env, &cfg.ddpg)?;
            let curve = w.path(CURVE_LOG);
            let log = if curve.exists() {
                RunLog::append_to(&curve, "curve")?
            } else {
                RunLog::create(&curve, "curve")?
            };
            (session, log)
        }
        None => (
            TrainSession::new(&env, &cfg.ddpg, cfg.seed)?,
            RunLog::create(&w.path(CURVE_LOG), "curve")?,
        ),
    };
    let start = session.episode;
    let mut saved = Vec::new();
    let outcome = train_curriculum(
        &plan,
        &mut env,
        &cfg.ddpg,
        &mut session,
        cfg.train.max_episodes,
        |rec| log.append(rec),
        |label, ck| {
            let name = format!("{label}.ckpt");
            ck.save(&w.dir.join(&name))?;
            saved.push(name);
            Ok(())
        },
    );
    log.finish()?;
    let outcome = outcome?;
    for name in &saved {
        w.path(name);
    }
    let summary = json!({
        "episodes": outcome.episodes,
        "episodes_this_run": outcome.episodes - start,
        "stage_index": session.stage_index,
        "stages": plan.stages.len(),
        "checkpoints": saved,
    });
    w.json(SUMMARY_FILE, &summary)?;
    Ok(summary)
}

fn load_policy(path: Option<&str>, role: &str) -> Result<RuntimePolicy> {
    let path = path.ok_or_else(|| {
        Error::MissingArtifact(format!(
            "{role} needs a trained DRL checkpoint; train one with `esdrl train` and pass it with --checkpoint"
        ))
    })?;
    if !Path::new(path).exists() {
        return Err(Error::MissingArtifact(format!(
            "{role} checkpoint {path} does not exist; train one with `esdrl train` first"
        )));
    }
    RuntimePolicy::load(Path::new(path))
}

fn evaluate_job(cfg: &RunConfig, lattice: Lattice, w: &mut Writer) -> Result<Value> {
    let policy = load_policy(cfg.evaluate.checkpoint.as_deref(), "evaluate.checkpoint")?;
    let mut env = kv_env(cfg, lattice)?;
    env.init_mode = InitMode::Fixed(cfg.init);
    if let Some(obs) = &policy.meta.observation {
        env.observation = obs.clone();
    }
    if policy.meta.q0.len() != env.act_dim() || policy.actor().input_dim() != env.obs_dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {} inputs and {} magnets; the configured lattice gives {} and {}",
            policy.actor().input_dim(),
            policy.meta.q0.len(),
            env.obs_dim(),
            env.act_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mean = evaluate(&mut env, cfg.evaluate.episodes, &mut rng, |s, _| {
        policy.action(s)
    })?;
    let baseline = if cfg.evaluate.random_baseline {
        Some(random_baseline(&mut env, cfg.evaluate.episodes, &mut rng)?)
    } else {
        None
    };
    let summary = json!({
        "episodes": cfg.evaluate.episodes,
        "mean_reward": mean,
        "random_baseline": baseline,
    });
    w.json(SUMMARY_FILE, &summary)?;
    Ok(summary)
}

fn experiment(cfg: &RunConfig, lattice: &Lattice, w: &mut Writer) -> Result<Value> {
    let ex = &cfg.experiment;
    let policy = if ex.variants.iter().any(|v| v.needs_policy()) {
        Some(load_policy(
            ex.checkpoint.as_deref(),
            "experiment.checkpoint",
        )?)
    } else {
        None
    };
    let ccfg = ComparisonConfig {
        schedule: cfg.schedule.clone(),
        es: cfg.es_for(lattice.len())?,
        supervisor: cfg.supervisor.clone(),
        init: cfg.init,
        windows: ex.windows.clone(),
    };
    let cmp = run_comparison(&ex.variants, lattice, &cfg.reward, policy.as_ref(), &ccfg)?;
    for tr in &cmp.traces {
        w.text(&format!("{}.csv", tr.kind), &tr.to_csv())?;
        let mut log = RunLog::create(&w.path(&format!("{}.jsonl", tr.kind)), "trace")?;
        for row in &tr.rows {
            log.append(row)?;
        }
        log.finish()?;
    }
    let mut summary = json!({ "comparison": cmp.summary });
    if ex.scalar_study {
        let agent = train_1d_agent(&cfg.study1d, cfg.seed)?;
        let study = run_1d_study(&cfg.study1d, &agent)?;
        let mut scalar = BTreeMap::new();
        for (band, pair) in [("high", &study.high), ("low", &study.low)] {
            for (who, tr) in [("es", &pair.es), ("drl", &pair.drl)] {
                w.text(&format!("scalar-{band}-{who}.csv"), &scalar_csv(tr))?;
                scalar.insert(
                    format!("{band}-{who}"),
                    json!({ "f": pair.f, "diverged_at": tr.diverged_at }),
                );
            }
        }
        summary["scalar"] = json!(scalar);
    }
    w.json(SUMMARY_FILE, &summary)?;
    Ok(summary)
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Flattens every line-delimited log of a run into a CSV file.
fn export(run: &Path, w: &mut Writer) -> Result<Value> {
    if !run.is_dir() {
        return Err(Error::MissingArtifact(format!(
            "run directory {}",
            run.display()
        )));
    }
    let mut logs: Vec<PathBuf> = std::fs::read_dir(run)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    logs.sort();
    let mut written = Vec::new();
    for log in logs {
        let (_, records): (_, Vec<serde_json::Map<String, Value>>) = read_log(&log)?;
        let columns: Vec<String> = records
            .first()
            .map(|r| r.keys().cloned().collect())
            .unwrap_or_default();
        let mut text = columns.join(",");
        text.push('\n');
        for r in &records {
            let row: Vec<String> = columns
                .iter()
                .map(|c| csv_cell(r.get(c).unwrap_or(&Value::Null)))
                .collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let name = format!(
            "{}.csv",
            log.file_stem().unwrap_or_default().to_string_lossy()
        );
        w.text(&name, &text)?;
        written.push(name);
    }
    let summary = json!({ "run": run.to_string_lossy(), "exported": written });
    w.json(SUMMARY_FILE, &summary)?;
    Ok(summary)
}
