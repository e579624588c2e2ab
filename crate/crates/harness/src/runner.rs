//! Single runs and seed sweeps with their on-disk artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use iee_core::data::Dataset;
use iee_core::engine::{Audit, Evaluation, RunSpec, Trainer};
use iee_core::events::{Event, EventSink, JsonlSink};
use iee_core::nn::ModelSpec;
use iee_core::sparsity::{Layout, Scope};
use iee_core::structured::LatencyTable;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::{self, Splits};
use crate::error::{HarnessError, Result};

/// Sink that drops every event.
pub struct Discard;

impl EventSink for Discard {
    fn record(&mut self, _event: &Event) -> iee_core::Result<()> {
        Ok(())
    }
}

/// Data, model and latency table for one seed of an experiment.
pub struct Prepared {
    pub splits: Splits,
    pub run: RunSpec,
    pub table: Option<LatencyTable>,
}

/// Final numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub iterations: u64,
    pub diverged: bool,
    pub test: Evaluation,
    pub train_flops_per_sample: f64,
    pub mean_zeta_p: f64,
    pub zeta_d: f64,
    pub psi: f64,
    pub final_resource: f64,
    pub update_steps: usize,
    pub audit: Audit,
    pub wall_seconds: f64,
}

impl RunResult {
    /// Test accuracy, or NaN for a diverged run.
    pub fn accuracy(&self) -> f64 {
        if self.diverged {
            f64::NAN
        } else {
            self.test.accuracy
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub binary_sha256: Option<String>,
    pub config_sha256: String,
    pub results: Vec<RunResult>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the running executable, when it can be read.
pub fn binary_sha256() -> Option<String> {
    let exe = std::env::current_exe().ok()?;
    fs::read(exe).ok().map(|b| sha256_hex(&b))
}

fn load_table(cfg: &ExperimentConfig, spec: &ModelSpec) -> Result<Option<LatencyTable>> {
    if cfg.scope() != Scope::Channels {
        return Ok(None);
    }
    let source = cfg.schedule.latency_table.as_deref().ok_or_else(|| {
        HarnessError::Config("schedule.latency_table: required for channel pruning".into())
    })?;
    let layout = Layout::new(spec, Scope::Channels).map_err(|e| HarnessError::Config(format!("model: {e}")))?;
    let table = if source == "synthetic" {
        LatencyTable::synthetic(&layout, cfg.schedule.quantum_ms)?
    } else {
        let f = File::open(source).map_err(|e| HarnessError::io(source, e))?;
        LatencyTable::from_csv(f)
            .map_err(|e| HarnessError::Data(format!("{source}: {e}")))?
            .0
    };
    Ok(Some(table))
}

/// Load data and assemble the run description for `seed`.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let mut splits = data::load(&cfg.data, seed)?;
    if cfg.model.kind == crate::config::ModelKind::Mlp {
        splits.train = data::flatten(splits.train)?;
        splits.test = data::flatten(splits.test)?;
    }
    let spec = cfg.model_spec(splits.sample_shape(), splits.outputs, splits.regression)?;
    cfg.validate_model(&spec)?;
    let batch = cfg.optimizer.batch_size;
    if batch > splits.train.len() {
        return Err(HarnessError::Config(format!(
            "optimizer.batch_size: {batch} exceeds the {} training samples",
            splits.train.len()
        )));
    }
    let total_iters = (cfg.optimizer.epochs * (splits.train.len() / batch)) as u64;
    let table = load_table(cfg, &spec)?;
    let run = RunSpec {
        model: spec,
        engine: cfg.engine(),
        optim: cfg.optim(),
        batch_size: batch,
        total_iters,
        seed,
    };
    Ok(Prepared { splits, run, table })
}

fn summarize(tr: &mut Trainer, test: &Dataset, seed: u64, diverged: bool, iterations: u64, wall: f64) -> Result<RunResult> {
    let batch = tr.run_spec().batch_size.max(256);
    let eval = tr.evaluate(test, batch)?;
    let ledger = tr.ledger();
    Ok(RunResult {
        seed,
        iterations,
        diverged,
        test: eval,
        train_flops_per_sample: ledger.per_sample(),
        mean_zeta_p: ledger.mean_zeta_p(),
        zeta_d: tr.zeta().1,
        psi: tr.psi(),
        final_resource: tr.resource(),
        update_steps: tr.update_step(),
        audit: tr.audit().clone(),
        wall_seconds: wall,
    })
}

/// Train one prepared run. With `dir`, events go to `dir/events.jsonl` and
/// periodic checkpoints to `dir/checkpoint.bin`.
pub fn run_prepared(p: &Prepared, dir: Option<&Path>, checkpoint_every: Option<u64>) -> Result<RunResult> {
    let start = Instant::now();
    let mut tr = Trainer::new(p.run.clone(), p.splits.train.len(), p.table.clone())?;
    let mut file_sink = match dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| HarnessError::io(d, e))?;
            let path = d.join("events.jsonl");
            let f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
            Some(JsonlSink::new(BufWriter::new(f)))
        }
        None => None,
    };
    let mut discard = Discard;
    {
        let sink: &mut dyn EventSink = match file_sink.as_mut() {
            Some(s) => s,
            None => &mut discard,
        };
        while !tr.is_finished() {
            tr.step(&p.splits.train, sink)?;
            if let (Some(d), Some(every)) = (dir, checkpoint_every) {
                if every > 0 && tr.iteration() % every == 0 {
                    tr.save_checkpoint(&d.join("checkpoint.bin"))?;
                }
            }
        }
    }
    if let (Some(s), Some(d)) = (file_sink, dir) {
        s.into_inner().flush().map_err(|e| HarnessError::io(d.join("events.jsonl"), e))?;
    }
    let (iterations, diverged) = (tr.iteration(), tr.diverged());
    let wall = start.elapsed().as_secs_f64();
    summarize(&mut tr, &p.splits.test, p.run.seed, diverged, iterations, wall)
}

/// Train one prepared run, sending every event to `sink`.
pub fn run_with_sink(p: &Prepared, sink: &mut dyn EventSink) -> Result<RunResult> {
    let start = Instant::now();
    let mut tr = Trainer::new(p.run.clone(), p.splits.train.len(), p.table.clone())?;
    let outcome = tr.run(&p.splits.train, sink)?;
    let wall = start.elapsed().as_secs_f64();
    summarize(&mut tr, &p.splits.test, p.run.seed, outcome.diverged, outcome.iterations, wall)
}

/// Resume a checkpoint written for `seed` and finish the run, appending to
/// `dir/events.jsonl`.
pub fn resume(cfg: &ExperimentConfig, seed: u64, checkpoint: &Path, dir: &Path) -> Result<RunResult> {
    let start = Instant::now();
    let p = prepare(cfg, seed)?;
    let mut tr = Trainer::resume(checkpoint, p.splits.train.len())?;
    if tr.run_spec() != &p.run {
        return Err(HarnessError::Config(format!(
            "{}: checkpoint was written by a different configuration or seed",
            checkpoint.display()
        )));
    }
    let path = dir.join("events.jsonl");
    let f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&path)
        .map_err(|e| HarnessError::io(&path, e))?;
    let mut sink = JsonlSink::new(BufWriter::new(f));
    let outcome = tr.run(&p.splits.train, &mut sink)?;
    sink.into_inner().flush().map_err(|e| HarnessError::io(&path, e))?;
    let wall = start.elapsed().as_secs_f64();
    summarize(&mut tr, &p.splits.test, seed, outcome.diverged, outcome.iterations, wall)
}

/// Directory of one seed's artifacts.
pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(&cfg.name).join(format!("seed-{seed}"))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let mut f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n").map_err(|e| HarnessError::io(&path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Train every seed in parallel. `output_dir/name` receives the config
/// snapshot and a manifest over all seeds; every `seed-<s>` directory gets
/// its event log, config snapshot and single-run manifest.
pub fn train(cfg: &ExperimentConfig) -> Result<Manifest> {
    let root = cfg.output_dir.join(&cfg.name);
    fs::create_dir_all(&root).map_err(|e| HarnessError::io(&root, e))?;
    let snapshot = cfg.to_toml();
    write_file(&root.join("config.toml"), &snapshot)?;
    let binary = binary_sha256();
    let config_sha = sha256_hex(snapshot.as_bytes());
    let results: Vec<Result<RunResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let (snapshot, binary, config_sha) = (&snapshot, &binary, &config_sha);
                s.spawn(move || {
                    let p = prepare(cfg, seed)?;
                    let dir = seed_dir(cfg, seed);
                    let r = run_prepared(&p, Some(&dir), cfg.log.checkpoint_every)?;
                    write_file(&dir.join("config.toml"), snapshot)?;
                    write_manifest(
                        &dir,
                        &Manifest {
                            name: cfg.name.clone(),
                            binary_sha256: binary.clone(),
                            config_sha256: config_sha.clone(),
                            results: vec![r.clone()],
                        },
                    )?;
                    log::info!(
                        "{} seed {seed}: accuracy {:.4}, {:.3e} FLOPs/sample{}",
                        cfg.name,
                        r.test.accuracy,
                        r.train_flops_per_sample,
                        if r.diverged { ", diverged" } else { "" }
                    );
                    Ok(r)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    let manifest = Manifest {
        name: cfg.name.clone(),
        binary_sha256: binary,
        config_sha256: config_sha,
        results: results.into_iter().collect::<Result<Vec<_>>>()?,
    };
    write_manifest(&root, &manifest)?;
    Ok(manifest)
}
