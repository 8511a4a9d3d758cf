//! Experiment execution: a work-stealing [`RoundExecutor`] plus the driver
//! that runs a whole config matrix and writes its report files.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};

use fedgate_core::embedding::{generate_synthetic, FederatedDataset};
use fedgate_core::federation::{
    run_experiment, ClientOutcome, ExperimentResult, Job, RoundExecutor, SequentialExecutor,
};

use crate::config::{FileConfig, RunSpec};
use crate::import;
use crate::output::{self, RunFinal};

/// Runs a round's client jobs on up to `threads` OS threads pulling from a
/// shared queue. Results land in submission order no matter which thread
/// finishes first, and the protocol itself guarantees schedule independence,
/// so output is byte-identical to [`SequentialExecutor`].
#[derive(Debug, Clone, Copy)]
pub struct ThreadedExecutor {
    pub threads: usize,
}

impl RoundExecutor for ThreadedExecutor {
    fn execute<'a>(&self, jobs: Vec<Job<'a>>) -> Vec<fedgate_core::Result<ClientOutcome>> {
        let n = jobs.len();
        let threads = self.threads.min(n);
        if threads <= 1 {
            return SequentialExecutor.execute(jobs);
        }
        // Reversed so `pop` hands out job 0 first.
        let queue: Mutex<Vec<(usize, Job<'a>)>> =
            Mutex::new(jobs.into_iter().enumerate().rev().collect());
        let slots: Mutex<Vec<Option<fedgate_core::Result<ClientOutcome>>>> =
            Mutex::new((0..n).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let next = queue.lock().expect("job queue poisoned").pop();
                    match next {
                        Some((i, job)) => {
                            let out = job();
                            slots.lock().expect("result slots poisoned")[i] = Some(out);
                        }
                        None => break,
                    }
                });
            }
        });
        slots
            .into_inner()
            .expect("result slots poisoned")
            .into_iter()
            .map(|slot| slot.expect("executor ran every job"))
            .collect()
    }
}

#[derive(Debug)]
pub struct CompletedRun {
    pub spec: RunSpec,
    pub result: ExperimentResult,
    pub seconds: f64,
}

/// Runs one experiment against a dataset it takes ownership of.
pub fn run_one(spec: &RunSpec, dataset: FederatedDataset, parallel: usize) -> Result<CompletedRun> {
    let start = Instant::now();
    let result = if parallel > 1 {
        let executor = ThreadedExecutor { threads: parallel };
        run_experiment(spec.config.clone(), dataset, &executor)
    } else {
        run_experiment(spec.config.clone(), dataset, &SequentialExecutor)
    }
    .map_err(|e| anyhow!("running {}: {e}", spec.name))?;
    Ok(CompletedRun {
        spec: spec.clone(),
        result,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn dataset_for(file: &FileConfig, spec: &RunSpec, imported: &Option<FederatedDataset>) -> Result<FederatedDataset> {
    match imported {
        Some(ds) => Ok(ds.clone()),
        None => {
            let synth = file.dataset.to_spec()?;
            generate_synthetic(&synth, spec.seed)
                .map_err(|e| anyhow!("generating dataset for {}: {e}", spec.name))
        }
    }
}

fn write_run(out_dir: &Path, run: &CompletedRun) -> Result<()> {
    let dir = out_dir.join(&run.spec.name);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let rounds = output::rounds_csv(&run.spec, &run.result);
    std::fs::write(dir.join("rounds.csv"), rounds)
        .with_context(|| format!("writing {}/rounds.csv", dir.display()))?;
    let manifest = output::manifest_toml(&run.spec, run.seconds)?;
    std::fs::write(dir.join("manifest.toml"), manifest)
        .with_context(|| format!("writing {}/manifest.toml", dir.display()))?;
    Ok(())
}

/// Runs every experiment in the matrix, writes `<out>/<run>/rounds.csv` and
/// `manifest.toml` per run plus a matrix-level `<out>/summary.csv`, and
/// returns the per-run finals in matrix order. With `parallel > 1` whole
/// runs execute concurrently *and* each run uses the threaded round
/// executor; reports are identical either way.
pub fn execute_matrix(
    file: &FileConfig,
    runs: &[RunSpec],
    parallel: usize,
    out_dir: &Path,
) -> Result<Vec<CompletedRun>> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let imported = match &file.dataset.import {
        Some(path) => Some(import::load_dataset(path)?),
        None => None,
    };

    let work = |idx: usize| -> Result<CompletedRun> {
        let spec = &runs[idx];
        let dataset = dataset_for(file, spec, &imported)?;
        let run = run_one(spec, dataset, parallel)?;
        write_run(out_dir, &run)?;
        Ok(run)
    };

    let mut completed: Vec<Option<Result<CompletedRun>>> = (0..runs.len()).map(|_| None).collect();
    if parallel > 1 && runs.len() > 1 {
        let next = AtomicUsize::new(0);
        let slots = Mutex::new(&mut completed);
        std::thread::scope(|scope| {
            for _ in 0..parallel.min(runs.len()) {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::Relaxed);
                    if idx >= runs.len() {
                        break;
                    }
                    let out = work(idx);
                    slots.lock().expect("run slots poisoned")[idx] = Some(out);
                });
            }
        });
    } else {
        for (idx, slot) in completed.iter_mut().enumerate() {
            *slot = Some(work(idx));
        }
    }

    let mut done = Vec::with_capacity(runs.len());
    for slot in completed {
        done.push(slot.expect("every run executed")?);
    }

    let finals: Vec<RunFinal> =
        done.iter().map(|r| output::run_final(&r.spec, &r.result)).collect();
    std::fs::write(out_dir.join("summary.csv"), output::summary_csv(&finals))
        .with_context(|| format!("writing {}/summary.csv", out_dir.display()))?;
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedgate_core::embedding::SyntheticSpec;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_clients: 3,
            num_classes: 3,
            num_ood_modes: 2,
            dim: 16,
            seed_per_client: 24,
            unlabeled_per_client: 60,
            test_per_client: 30,
            ood_ratio: vec![0.3, 0.3, 0.3],
            ..SyntheticSpec::misaligned_benchmark()
        }
    }

    fn tiny_config() -> FileConfig {
        toml::from_str(
            "[dataset]\nclients = 3\nclasses = 3\nood_modes = 2\ndim = 16\n\
             seed_per_client = 24\nunlabeled_per_client = 60\ntest_per_client = 30\n\
             ood_ratio = [0.3]\n\
             [protocol]\nrounds = 2\nbudget_per_round = 12\n\
             [prompt]\nepochs = 3\n[probe]\nepochs = 3\n",
        )
        .unwrap()
    }

    #[test]
    fn threaded_executor_matches_sequential_bit_for_bit() {
        let cfg = tiny_config();
        let spec = &cfg.expand(None).unwrap()[0];
        let ds = generate_synthetic(&tiny_spec(), spec.seed).unwrap();
        let seq = run_experiment(spec.config.clone(), ds.clone(), &SequentialExecutor).unwrap();
        let par =
            run_experiment(spec.config.clone(), ds, &ThreadedExecutor { threads: 4 }).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn matrix_writes_reports_for_every_run() {
        let cfg: FileConfig = toml::from_str(
            "[dataset]\nclients = 3\nclasses = 3\nood_modes = 2\ndim = 16\n\
             seed_per_client = 24\nunlabeled_per_client = 60\ntest_per_client = 30\n\
             ood_ratio = [0.3]\n\
             [matrix]\nmodes = [\"coldstart\", \"dynamic\"]\nseeds = [0, 1]\n\
             [protocol]\nrounds = 2\nbudget_per_round = 12\n\
             [prompt]\nepochs = 3\n[probe]\nepochs = 3\n",
        )
        .unwrap();
        let runs = cfg.expand(None).unwrap();
        assert_eq!(runs.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let done = execute_matrix(&cfg, &runs, 1, dir.path()).unwrap();
        assert_eq!(done.len(), 4);
        for run in &runs {
            assert!(dir.path().join(&run.name).join("rounds.csv").is_file());
            assert!(dir.path().join(&run.name).join("manifest.toml").is_file());
        }
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.starts_with("mode,variant,random\n"), "{summary}");
        assert_eq!(summary.lines().count(), 3);
    }
}
