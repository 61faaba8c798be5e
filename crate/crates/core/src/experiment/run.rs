use std::path::Path;

use crate::cluster::{run_training_with, TraceRecord};
use crate::data::gen_synthetic;
use crate::error::{Error, Result};
use crate::experiment::config::{AdaptiveConfig, ExperimentConfig, PolicyConfig};
use crate::experiment::summary::{summarize, write_csv, write_trace, Probe, Summary, PROBE_HEADER};
use crate::mdp::QNetParams;
use crate::model::{dataset_loss, evaluate_accuracy, Batch};
use crate::policy::{calibrate_thresholds, AdaptiveNormPolicy, BitPolicy, FixedPolicy, MqgradPolicy};

/// Offset separating the controller's RNG stream from the data and model seeds.
const CONTROLLER_SEED_OFFSET: u64 = 0x4d51_4772_6164_0001;

/// In-memory results of a run. The same data is written to the output dir.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    /// Config with every calibrated value filled in.
    pub config: ExperimentConfig,
    pub trace: Vec<TraceRecord>,
    pub probes: Vec<Probe>,
    pub summary: Summary,
    pub q_params: Option<QNetParams>,
}

/// Fills in adaptive thresholds from a Fix(8) warmup when the config leaves
/// them out. The warmup's simulated time is not charged to the run.
pub fn resolve_config(cfg: &ExperimentConfig, train: &Batch) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    if let PolicyConfig::Adaptive(AdaptiveConfig {
        thresholds: None,
        warmup_iters,
    }) = &cfg.policy
    {
        let mut warm = cfg.cluster.clone();
        warm.max_iters = *warmup_iters;
        let mut rms = Vec::with_capacity(*warmup_iters);
        run_training_with(&warm, &cfg.model, train, &mut FixedPolicy::new(8)?, cfg.seed, |v| {
            rms.push(v.global_grad_rms);
            Ok(())
        })?;
        out.policy = PolicyConfig::Adaptive(AdaptiveConfig {
            thresholds: Some(calibrate_thresholds(&rms)?.to_vec()),
            warmup_iters: *warmup_iters,
        });
    }
    Ok(out)
}

fn build_policy(cfg: &ExperimentConfig) -> Result<Box<dyn BitPolicy>> {
    Ok(match &cfg.policy {
        PolicyConfig::Fixed(f) => Box::new(FixedPolicy::new(f.bits)?),
        PolicyConfig::Adaptive(a) => {
            let t = a
                .thresholds
                .as_ref()
                .ok_or_else(|| Error::config("policy.thresholds", "unresolved"))?;
            Box::new(AdaptiveNormPolicy::new(t)?)
        }
        PolicyConfig::Mqgrad(h) => Box::new(MqgradPolicy::new(
            h.clone(),
            cfg.cluster.cadence,
            cfg.seed.wrapping_add(CONTROLLER_SEED_OFFSET),
        )?),
    })
}

/// Runs one experiment entirely in memory. A diverged run is not an error:
/// its partial trace is kept and the summary is marked `diverged`.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (train, test) = gen_synthetic(cfg.seed, &cfg.data)?;
    let resolved = resolve_config(cfg, &train)?;
    let mut policy = build_policy(&resolved)?;

    let max_iters = resolved.cluster.max_iters;
    let eval_every = resolved.eval_every;
    let mut probes = Vec::new();
    let result = run_training_with(
        &resolved.cluster,
        &resolved.model,
        &train,
        policy.as_mut(),
        resolved.seed,
        |view| {
            let done = view.record.iter + 1;
            if done == max_iters || (eval_every > 0 && done % eval_every == 0) {
                probes.push(Probe {
                    iter: done,
                    sim_time_ms: view.record.sim_time_ms,
                    test_accuracy: evaluate_accuracy(view.params, &resolved.model, &test)?,
                    train_loss: dataset_loss(view.params, &resolved.model, &train)?,
                });
            }
            Ok(())
        },
    );
    let trace = match result {
        Ok(t) => t,
        Err(Error::Diverged { partial, .. }) => *partial,
        Err(e) => return Err(e),
    };
    let summary = summarize(&resolved, &trace, &probes);
    let q_params = policy.q_params().cloned();
    Ok(RunArtifacts {
        config: resolved,
        trace,
        probes,
        summary,
        q_params,
    })
}

/// Writes `config.toml`, `trace.csv`, `probes.csv`, `summary.json` and, for
/// the learned policy, `qnet.json` into `dir`.
pub fn write_artifacts(dir: &Path, art: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    write("config.toml", art.config.to_toml()?)?;
    write_trace(&dir.join("trace.csv"), &art.trace)?;
    write_csv(&dir.join("probes.csv"), &art.probes, &PROBE_HEADER)?;
    write("summary.json", serde_json::to_string_pretty(&art.summary)? + "\n")?;
    if let Some(q) = &art.q_params {
        write("qnet.json", serde_json::to_string_pretty(q)? + "\n")?;
    }
    Ok(())
}

/// Runs `cfg` and writes its artifacts to `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let art = execute(cfg)?;
    write_artifacts(&cfg.output_dir, &art)?;
    Ok(art)
}
