//! Release acceptance gate.
//!
//! Each test checks one externally verifiable property of the simulator end
//! to end — against finite differences, brute-force recomputation, closed
//! forms, or benchmark trend windows — and prints a single
//! `criterion NN PASS/FAIL` line with the measured values. Run
//! `cargo test --test acceptance -- --nocapture` to see every line.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedgate_core::acquisition::StrategyKind;
use fedgate_core::config::ExperimentConfig;
use fedgate_core::embedding::{
    generate_synthetic, Embedding, GroundTruth, Sample, SyntheticSpec,
};
use fedgate_core::federation::{
    fedavg_prompts, run_experiment, split_budget, ClientRoundReport, ExperimentResult,
    SequentialExecutor,
};
use fedgate_core::gate::{partition_pool, GateLabeler, GateMode};
use fedgate_core::math::{unit_direction, Matrix};
use fedgate_core::metrics::{
    balanced_multiclass_accuracy, gate_test_metrics, pool_purity, query_precision, QueryHistory,
};
use fedgate_core::probe::{fedavg_linear, LinearProbe, ProbeHyper};
use fedgate_core::prompt::{
    init_prompt_bank, prompt_loss_and_grads, FrozenTextMixer, PromptVariant,
};
use fedgate_core::wire::ClientUpdateMsg;

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    Embedding::new(unit_direction(rng, dim)).expect("unit direction is a valid embedding")
}

fn verdict(criterion: u32, ok: bool, detail: &str) {
    println!(
        "criterion {criterion:02} {}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion:02} failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. Prompt-token gradients against central finite differences.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_analytic_gradients_match_finite_differences() {
    let start = Instant::now();
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut coords = 0usize;

    for i in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4_000 + i);
        let dim = [4, 8, 12, 16][rng.gen_range(0..4)];
        let classes = rng.gen_range(2..=4usize);
        let clients = rng.gen_range(1..=3usize);
        let client = rng.gen_range(0..clients);
        let variant = match i % 3 {
            0 => PromptVariant::Mixed { global_rows: 2, local_rows: 2 },
            1 => PromptVariant::GlobalOnly { global_rows: 3 },
            _ => PromptVariant::LocalOnly { local_rows: 3 },
        };
        let anchors: Vec<Embedding> = (0..=classes).map(|_| unit(&mut rng, dim)).collect();
        let mixer = FrozenTextMixer::new(anchors, 70 + i).unwrap();
        let mut bank = init_prompt_bank(variant, classes, clients, dim, 900 + i).unwrap();
        let batch: Vec<(Embedding, usize)> = (0..rng.gen_range(3..=6))
            .map(|_| (unit(&mut rng, dim), rng.gen_range(0..=classes)))
            .collect();
        let tau = 0.05 + rng.gen::<f64>() * 0.95;

        let (_, grads) =
            prompt_loss_and_grads(&bank, &mixer, client, &batch, tau).unwrap();
        let loss_at = |bank: &fedgate_core::prompt::PromptBank| -> f64 {
            prompt_loss_and_grads(bank, &mixer, client, &batch, tau).unwrap().0
        };

        // (owner, slot, entry) triples spanning every trainable coordinate of
        // the acting client.
        let global_slots = bank.global.len();
        let local_slots = bank.local.get(client).map_or(0, |v| v.len());
        for slot in 0..global_slots + local_slots {
            let (is_global, s) =
                if slot < global_slots { (true, slot) } else { (false, slot - global_slots) };
            let len = if is_global {
                bank.global[s].data().len()
            } else {
                bank.local[client][s].data().len()
            };
            for j in 0..len {
                let set = |bank: &mut fedgate_core::prompt::PromptBank, value: f64| {
                    if is_global {
                        bank.global[s].data_mut()[j] = value;
                    } else {
                        bank.local[client][s].data_mut()[j] = value;
                    }
                };
                let original = if is_global {
                    bank.global[s].data()[j]
                } else {
                    bank.local[client][s].data()[j]
                };
                set(&mut bank, original + h);
                let up = loss_at(&bank);
                set(&mut bank, original - h);
                let down = loss_at(&bank);
                set(&mut bank, original);

                let fd = (up - down) / (2.0 * h);
                let an = if is_global {
                    grads.global[s].data()[j]
                } else {
                    grads.local[s].data()[j]
                };
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
                max_rel = max_rel.max(rel);
                coords += 1;
            }
        }
    }

    let secs = start.elapsed().as_secs_f64();
    let ok = max_rel < 1e-5 && secs < 10.0;
    verdict(
        1,
        ok,
        &format!(
            "max relative gradient error {max_rel:.3e} over {coords} coordinates \
             in 50 instances ({secs:.2}s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Pool partitions: disjoint, exhaustive, ascending, fully recorded.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_pool_partitions_are_exact() {
    let mut checked = 0usize;
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(20_000 + case);
        let dim = 6;
        let classes = rng.gen_range(2..=4usize);
        let n = rng.gen_range(0..40usize);

        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + case).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.gen_range(0..=i));
        }
        let pool: Vec<Sample> = ids
            .iter()
            .map(|&id| Sample {
                id,
                client: 0,
                embedding: unit(&mut rng, dim),
                truth: if rng.gen_bool(0.6) {
                    GroundTruth::Id { class: rng.gen_range(0..classes) }
                } else {
                    GroundTruth::Ood { mode: rng.gen_range(0..2) }
                },
            })
            .collect();
        let texts: Vec<Embedding> = (0..=classes).map(|_| unit(&mut rng, dim)).collect();
        let labeler = match case % 3 {
            0 => GateLabeler::AllId,
            1 => GateLabeler::Oracle,
            _ => GateLabeler::Texts { texts: &texts, num_id_slots: classes, tau: 0.2 },
        };

        let part = partition_pool(&pool, &labeler, classes).unwrap();
        assert!(part.gated.windows(2).all(|w| w[0] < w[1]), "gated not ascending");
        assert!(
            part.exploration.windows(2).all(|w| w[0] < w[1]),
            "exploration not ascending"
        );
        let mut together: Vec<u64> =
            part.gated.iter().chain(part.exploration.iter()).copied().collect();
        together.sort_unstable();
        let mut expected = ids.clone();
        expected.sort_unstable();
        assert_eq!(together, expected, "partition must cover the pool exactly once");

        assert_eq!(part.records.len(), pool.len());
        for r in &part.records {
            let gated = part.gated.binary_search(&r.sample).is_ok();
            if gated {
                assert!(r.slot < classes, "gated record carries a class slot");
            } else {
                assert_eq!(r.slot, classes, "exploration records carry the coarse slot");
            }
        }
        let gated_truths: Vec<GroundTruth> = part
            .gated
            .iter()
            .map(|id| pool.iter().find(|s| s.id == *id).unwrap().truth)
            .collect();
        match labeler {
            GateLabeler::AllId => {
                assert!(part.exploration.is_empty());
                // Coldstart purity is exactly the true ID fraction.
                assert_eq!(pool_purity(&gated_truths), query_precision(
                    &pool.iter().map(|s| s.truth).collect::<Vec<_>>(),
                ));
            }
            GateLabeler::Oracle => {
                let mut id_ids: Vec<u64> = pool
                    .iter()
                    .filter(|s| s.truth.is_id())
                    .map(|s| s.id)
                    .collect();
                id_ids.sort_unstable();
                assert_eq!(part.gated, id_ids, "oracle gate keeps exactly the ID samples");
                if !part.gated.is_empty() {
                    assert_eq!(pool_purity(&gated_truths), Some(1.0), "oracle purity is exact");
                }
            }
            GateLabeler::Texts { .. } => {}
        }
        checked += 1;
    }
    verdict(2, checked == 1000, &format!("{checked}/1000 randomized partitions exact"));
}

// ---------------------------------------------------------------------------
// 3. Federated averaging against brute-force recomputation.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_fedavg_matches_brute_force_recomputation() {
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for case in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(30_000 + case);
        let participants = rng.gen_range(1..=6usize);
        let slots = rng.gen_range(1..=4usize);
        let rows = rng.gen_range(1..=3usize);
        let cols = rng.gen_range(1..=5usize);

        let mut updates: Vec<(Vec<Matrix>, f64)> = Vec::new();
        for p in 0..participants {
            let stack: Vec<Matrix> = (0..slots)
                .map(|_| {
                    Matrix::from_vec(
                        rows,
                        cols,
                        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    )
                })
                .collect();
            // At least one strictly positive weight per case.
            let w = if p == 0 { rng.gen_range(0.1..10.0) } else { rng.gen_range(0.0..10.0) };
            updates.push((stack, w));
        }

        let avg = fedavg_prompts(&updates).unwrap();
        let total: f64 = updates.iter().rev().map(|(_, w)| *w).sum();
        for s in 0..slots {
            for j in 0..rows * cols {
                // Reverse accumulation order: independent of the library's.
                let mut num = 0.0;
                for (stack, w) in updates.iter().rev() {
                    num += w * stack[s].data()[j];
                }
                let diff = (avg[s].data()[j] - num / total).abs();
                worst = worst.max(diff);
                assert!(diff < 1e-12, "prompt fedavg entry off by {diff:.3e}");
            }
        }

        // Probe aggregation against the same brute force.
        let probe_updates: Vec<(LinearProbe, f64)> = updates
            .iter()
            .map(|(stack, w)| {
                let mut probe = LinearProbe::zeros(rows, cols);
                let mut examples = Vec::new();
                for r in 0..rows {
                    examples.push((
                        Embedding::new(stack[0].row(r).to_vec()).unwrap_or_else(|_| {
                            Embedding::new(vec![1.0; cols]).unwrap()
                        }),
                        r,
                    ));
                }
                let mut prng = ChaCha8Rng::seed_from_u64(555 + case);
                probe
                    .train_local(&examples, &ProbeHyper { epochs: 1, ..Default::default() }, &mut prng)
                    .unwrap();
                (probe, *w)
            })
            .collect();
        let avg_probe = fedavg_linear(&probe_updates).unwrap();
        for j in 0..rows * cols {
            let mut num = 0.0;
            for (p, w) in probe_updates.iter().rev() {
                num += w * p.weights().data()[j];
            }
            let diff = (avg_probe.weights().data()[j] - num / total).abs();
            worst = worst.max(diff);
            assert!(diff < 1e-12, "probe fedavg entry off by {diff:.3e}");
        }
        cases += 1;
    }

    // Closed-form anchor: weights 1 and 3 over constant stacks 2 and 6.
    let two = vec![Matrix::from_vec(1, 2, vec![2.0, 2.0])];
    let six = vec![Matrix::from_vec(1, 2, vec![6.0, 6.0])];
    let avg = fedavg_prompts(&[(two, 1.0), (six, 3.0)]).unwrap();
    assert!((avg[0].data()[0] - 5.0).abs() < 1e-15);

    // Aggregating identical inputs is the identity.
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(31_000 + case);
        let stack: Vec<Matrix> = (0..3)
            .map(|_| Matrix::from_vec(2, 4, (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect()))
            .collect();
        let copies: Vec<(Vec<Matrix>, f64)> = (0..rng.gen_range(1..=5))
            .map(|_| (stack.clone(), rng.gen_range(0.1..10.0)))
            .collect();
        let avg = fedavg_prompts(&copies).unwrap();
        for (a, b) in avg.iter().zip(&stack) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12, "identical-input aggregation must be the identity");
            }
        }
    }

    verdict(
        3,
        cases == 200,
        &format!("{cases}/200 randomized aggregations match brute force (worst {worst:.3e})"),
    );
}

// ---------------------------------------------------------------------------
// 4. Metric identities plus recall monotonicity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_metric_identities_and_recall_monotonicity() {
    let mut fixtures = 0usize;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(40_000 + case);

        // Precision / purity against a hand count.
        let n = rng.gen_range(0..50usize);
        let truths: Vec<GroundTruth> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    GroundTruth::Id { class: rng.gen_range(0..4) }
                } else {
                    GroundTruth::Ood { mode: rng.gen_range(0..3) }
                }
            })
            .collect();
        let id_count = truths.iter().filter(|t| t.is_id()).count();
        match query_precision(&truths) {
            None => assert_eq!(n, 0),
            Some(p) => {
                assert!((p - id_count as f64 / n as f64).abs() < 1e-12);
                assert_eq!(Some(p), pool_purity(&truths));
            }
        }

        // Balanced accuracy against an independent tally.
        let classes = rng.gen_range(2..=5usize);
        let pairs: Vec<(usize, usize)> = (0..rng.gen_range(1..=60))
            .map(|_| {
                let truth = rng.gen_range(0..classes);
                let pred = if rng.gen_bool(0.5) { truth } else { rng.gen_range(0..classes) };
                (truth, pred)
            })
            .collect();
        let bma = balanced_multiclass_accuracy(&pairs, classes).unwrap().unwrap();
        let mut tally: std::collections::BTreeMap<usize, (usize, usize)> =
            std::collections::BTreeMap::new();
        for &(truth, pred) in pairs.iter().rev() {
            let e = tally.entry(truth).or_insert((0, 0));
            e.0 += 1;
            if truth == pred {
                e.1 += 1;
            }
        }
        let recount = tally
            .values()
            .map(|&(count, correct)| correct as f64 / count as f64)
            .sum::<f64>()
            / tally.len() as f64;
        assert!((bma - recount).abs() < 1e-12, "bma {bma} vs recount {recount}");

        // Gate-on-test metrics against a hand count.
        let test: Vec<Sample> = (0..rng.gen_range(1..=30))
            .map(|j| Sample {
                id: j,
                client: 0,
                embedding: unit(&mut rng, 6),
                truth: if rng.gen_bool(0.6) {
                    GroundTruth::Id { class: rng.gen_range(0..classes) }
                } else {
                    GroundTruth::Ood { mode: rng.gen_range(0..2) }
                },
            })
            .collect();
        let texts: Vec<Embedding> = (0..=classes).map(|_| unit(&mut rng, 6)).collect();
        let labeler = GateLabeler::Texts { texts: &texts, num_id_slots: classes, tau: 0.3 };
        let gm = gate_test_metrics(&test, &labeler, classes).unwrap();
        let mut ood_total = 0usize;
        let mut ood_rejected = 0usize;
        let mut agree = 0usize;
        for s in test.iter().rev() {
            let d = labeler.label(s).unwrap();
            if !s.truth.is_id() {
                ood_total += 1;
                if !d.is_id {
                    ood_rejected += 1;
                }
            }
            if d.is_id == s.truth.is_id() {
                agree += 1;
            }
        }
        let want_recall =
            if ood_total == 0 { 0.0 } else { ood_rejected as f64 / ood_total as f64 };
        assert!((gm.ood_recall - want_recall).abs() < 1e-12, "OOD recall recount");
        assert!(
            (gm.binary_accuracy - agree as f64 / test.len() as f64).abs() < 1e-12,
            "binary accuracy recount"
        );

        // Accumulated recall equals its recount and can only grow.
        let mut history = QueryHistory::new();
        let initial_id = 30usize;
        let mut id_fed = 0usize;
        let mut last = 0.0;
        for batch in 0..5 {
            for k in 0..rng.gen_range(0..4usize) {
                let id = case * 1000 + batch * 10 + k as u64;
                let truth = if rng.gen_bool(0.5) {
                    GroundTruth::Id { class: 0 }
                } else {
                    GroundTruth::Ood { mode: 0 }
                };
                if truth.is_id() {
                    id_fed += 1;
                }
                history.record(id, &truth).unwrap();
            }
            let recall = history.recall(initial_id).unwrap();
            assert!(
                (recall - id_fed as f64 / initial_id as f64).abs() < 1e-12,
                "recall recount"
            );
            assert!(recall >= last - 1e-15, "recall decreased: {recall} < {last}");
            last = recall;
        }
        fixtures += 1;
    }

    // Closed-form anchors.
    let hand = [
        GroundTruth::Id { class: 0 },
        GroundTruth::Id { class: 2 },
        GroundTruth::Ood { mode: 1 },
        GroundTruth::Id { class: 1 },
    ];
    assert_eq!(query_precision(&hand), Some(0.75));
    assert_eq!(query_precision(&[]), None);
    let bma = balanced_multiclass_accuracy(&[(0, 0), (0, 1), (1, 1)], 2).unwrap().unwrap();
    assert!((bma - 0.75).abs() < 1e-15);

    verdict(4, fixtures == 100, &format!("{fixtures}/100 metric fixtures verified"));
}

// ---------------------------------------------------------------------------
// Shared helpers for the benchmark-level criteria.
// ---------------------------------------------------------------------------

fn macro_mean(
    clients: &[ClientRoundReport],
    f: impl Fn(&ClientRoundReport) -> Option<f64>,
) -> Option<f64> {
    let vals: Vec<f64> = clients.iter().filter_map(&f).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn trend_config(gate_mode: GateMode, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        gate_mode,
        strategy: StrategyKind::Random,
        rounds: 5,
        budget_per_round: 500,
        master_seed: seed,
        ..ExperimentConfig::default()
    }
}

/// Runs one experiment on a synthetic benchmark and enforces the per-run
/// wall-clock bound.
fn run_bench(spec: &SyntheticSpec, config: ExperimentConfig) -> (ExperimentResult, f64) {
    let seed = config.master_seed;
    let dataset = generate_synthetic(spec, seed).unwrap();
    let start = Instant::now();
    let result = run_experiment(config, dataset, &SequentialExecutor).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "experiment exceeded the 120s budget: {secs:.1}s");
    (result, secs)
}

fn purity_of(result: &ExperimentResult, round_idx: usize) -> f64 {
    macro_mean(&result.rounds[round_idx].clients, |c| c.pool_purity)
        .expect("benchmark pools are never empty")
}

fn ood_recall_of(result: &ExperimentResult, round_idx: usize) -> f64 {
    macro_mean(&result.rounds[round_idx].clients, |c| {
        c.gate.as_ref().map(|g| g.ood_recall)
    })
    .expect("benchmark test splits are never empty")
}

const SEEDS: [u64; 3] = [0, 1, 2];

// ---------------------------------------------------------------------------
// 5. Gate-quality trends on the misaligned-template benchmark.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_gate_quality_trends_on_the_misaligned_benchmark() {
    let spec = SyntheticSpec::misaligned_benchmark();
    let mut dyn_purity = 0.0;
    let mut dyn_recall = 0.0;
    let mut static_first = 0.0;
    let mut static_final = 0.0;
    let mut cold_final = 0.0;
    let mut slowest = 0.0f64;

    for &seed in &SEEDS {
        let (result, secs) = run_bench(
            &spec,
            trend_config(
                GateMode::DynamicPromptGate { variant: PromptVariant::default_mixed() },
                seed,
            ),
        );
        slowest = slowest.max(secs);
        let last = result.rounds.len() - 1;
        dyn_purity += purity_of(&result, last) / SEEDS.len() as f64;
        dyn_recall += ood_recall_of(&result, last) / SEEDS.len() as f64;

        let (result, secs) =
            run_bench(&spec, trend_config(GateMode::StaticZeroShot { ood_templates: 4 }, seed));
        slowest = slowest.max(secs);
        let last = result.rounds.len() - 1;
        static_first += purity_of(&result, 0) / SEEDS.len() as f64;
        static_final += purity_of(&result, last) / SEEDS.len() as f64;

        let (result, secs) = run_bench(&spec, trend_config(GateMode::Coldstart, seed));
        slowest = slowest.max(secs);
        let last = result.rounds.len() - 1;
        cold_final += purity_of(&result, last) / SEEDS.len() as f64;
    }

    let drift = (static_final - static_first).abs();
    let ok = dyn_purity >= 0.90
        && dyn_recall >= 0.90
        && (0.55..=0.80).contains(&static_first)
        && drift <= 0.05
        && static_final > cold_final;
    verdict(
        5,
        ok,
        &format!(
            "dynamic final purity {dyn_purity:.3} / OOD recall {dyn_recall:.3}; \
             static purity {static_first:.3} -> {static_final:.3} (drift {drift:.3}); \
             coldstart purity {cold_final:.3}; slowest run {slowest:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Client-private tokens on client-exclusive contamination.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_local_tokens_cover_exclusive_ood_modes() {
    let spec = SyntheticSpec::exclusive_ood_benchmark();
    let mut local_purity = 0.0;
    let mut global_purity = 0.0;

    for &seed in &SEEDS {
        let (result, _) = run_bench(
            &spec,
            trend_config(
                GateMode::DynamicPromptGate { variant: PromptVariant::default_local() },
                seed,
            ),
        );
        local_purity += purity_of(&result, result.rounds.len() - 1) / SEEDS.len() as f64;

        let (result, _) = run_bench(
            &spec,
            trend_config(
                GateMode::DynamicPromptGate { variant: PromptVariant::default_global() },
                seed,
            ),
        );
        global_purity += purity_of(&result, result.rounds.len() - 1) / SEEDS.len() as f64;
    }

    let ok = local_purity >= global_purity - 0.02;
    verdict(
        6,
        ok,
        &format!(
            "final purity with private tokens {local_purity:.3} vs shared-only {global_purity:.3} \
             on client-exclusive contamination"
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. OOD warmup lifts first-round rejection recall.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_ood_warmup_lifts_first_round_recall() {
    let spec = SyntheticSpec::misaligned_benchmark();
    let base = |seed| ExperimentConfig {
        rounds: 1,
        ..trend_config(
            GateMode::DynamicPromptGate { variant: PromptVariant::default_mixed() },
            seed,
        )
    };
    let mut with_warmup = 0.0;
    let mut without = 0.0;

    for &seed in &SEEDS {
        let (result, _) = run_bench(
            &spec,
            ExperimentConfig {
                warmup_shots: 128,
                ood_warmup: true,
                ood_warmup_fraction: 0.25,
                ..base(seed)
            },
        );
        with_warmup += ood_recall_of(&result, 0) / SEEDS.len() as f64;

        let (result, _) = run_bench(&spec, base(seed));
        without += ood_recall_of(&result, 0) / SEEDS.len() as f64;
    }

    let lift = with_warmup - without;
    verdict(
        7,
        lift >= 0.10,
        &format!(
            "first-round OOD recall {without:.3} -> {with_warmup:.3} with warmup (lift {lift:.3})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Parallel and sequential execution produce identical report files.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_parallel_and_sequential_reports_are_identical() {
    let cfg: fedgate::config::FileConfig = toml::from_str(
        "[dataset]\nclients = 3\nclasses = 3\nood_modes = 2\ndim = 16\n\
         seed_per_client = 24\nunlabeled_per_client = 80\ntest_per_client = 30\n\
         ood_ratio = [0.3]\n\
         [matrix]\nmodes = [\"coldstart\", \"dynamic\"]\nseeds = [0, 1]\n\
         [protocol]\nrounds = 3\nbudget_per_round = 15\n\
         [prompt]\nepochs = 4\n[probe]\nepochs = 4\n",
    )
    .unwrap();
    let runs = cfg.expand(None).unwrap();

    let seq_dir = tempfile::tempdir().unwrap();
    let par_dir = tempfile::tempdir().unwrap();
    fedgate::runner::execute_matrix(&cfg, &runs, 1, seq_dir.path()).unwrap();
    fedgate::runner::execute_matrix(&cfg, &runs, 4, par_dir.path()).unwrap();

    let mut compared = 0usize;
    for run in &runs {
        let a = std::fs::read(seq_dir.path().join(&run.name).join("rounds.csv")).unwrap();
        let b = std::fs::read(par_dir.path().join(&run.name).join("rounds.csv")).unwrap();
        assert_eq!(a, b, "{}/rounds.csv differs between schedules", run.name);
        compared += 1;
    }
    let a = std::fs::read(seq_dir.path().join("summary.csv")).unwrap();
    let b = std::fs::read(par_dir.path().join("summary.csv")).unwrap();
    assert_eq!(a, b, "summary.csv differs between schedules");

    verdict(
        8,
        compared == runs.len(),
        &format!("{compared} runs byte-identical between 1 and 4 worker threads"),
    );
}

// ---------------------------------------------------------------------------
// 9. Client updates carry parameters and counts, never samples.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_update_messages_carry_no_raw_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(90_000);
    let dim = 5;
    let probe = {
        let mut p = LinearProbe::zeros(2, dim);
        let examples = vec![
            (unit(&mut rng, dim), 0),
            (unit(&mut rng, dim), 1),
            (unit(&mut rng, dim), 0),
        ];
        let mut prng = ChaCha8Rng::seed_from_u64(91_000);
        p.train_local(&examples, &ProbeHyper { epochs: 2, ..Default::default() }, &mut prng)
            .unwrap();
        p
    };

    let mut checked = 0usize;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(92_000 + case);
        let slots = rng.gen_range(0..=4usize);
        let rows = rng.gen_range(1..=3usize);
        let global: Vec<Matrix> = (0..slots)
            .map(|_| {
                Matrix::from_vec(
                    rows,
                    dim,
                    (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let msg = ClientUpdateMsg {
            client: rng.gen_range(0..10),
            round: rng.gen_range(1..50),
            global: global.clone(),
            probe: probe.clone(),
            prompt_examples: rng.gen_range(0..1_000_000),
            probe_examples: rng.gen_range(0..1_000_000),
        };
        let bytes = msg.encode();

        // Size law: header + matrix list + probe block + two counters. Any
        // field carrying raw samples would break this closed form.
        let expected = 4 + 2 + 4 + 4
            + 4 + slots * (8 + 8 * rows * dim)
            + (4 + 4 + 1 + 8 * probe.num_classes() * dim)
            + 8 + 8;
        assert_eq!(bytes.len(), expected, "update size must depend on shapes only");

        // The example counters must not change the payload size.
        let bigger = ClientUpdateMsg {
            prompt_examples: msg.prompt_examples + 999_999,
            probe_examples: msg.probe_examples + 999_999,
            global: global.clone(),
            probe: probe.clone(),
            ..msg
        };
        assert_eq!(bigger.encode().len(), bytes.len());

        let decoded = ClientUpdateMsg::decode(&bytes).unwrap();
        assert_eq!(decoded, msg, "round trip must be lossless");

        // Corruption must be rejected, never silently accepted.
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            ClientUpdateMsg::decode(&trailing),
            Err(fedgate_core::Error::TrailingBytes)
        ));
        assert!(matches!(
            ClientUpdateMsg::decode(&bytes[..bytes.len() - 1]),
            Err(fedgate_core::Error::Truncated)
        ));
        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xFF;
        assert!(matches!(
            ClientUpdateMsg::decode(&bad_magic),
            Err(fedgate_core::Error::BadMagic)
        ));
        checked += 1;
    }
    verdict(
        9,
        checked == 50,
        &format!("{checked}/50 updates: size is a closed form of shapes, round trip exact, corruption rejected"),
    );
}

// ---------------------------------------------------------------------------
// 10. Oracle budget accounting and pool conservation.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_oracle_budget_and_pool_conservation() {
    // Full benchmark with warmup so the round-one debt path is exercised.
    let spec = SyntheticSpec::misaligned_benchmark();
    let config = ExperimentConfig {
        rounds: 4,
        warmup_shots: 128,
        ood_warmup: true,
        ood_warmup_fraction: 0.25,
        ..trend_config(
            GateMode::DynamicPromptGate { variant: PromptVariant::default_mixed() },
            0,
        )
    };
    let budget = config.budget_per_round;
    let rounds = config.rounds;
    let (result, _) = run_bench(&spec, config);

    let clients = result.initial_unlabeled.len();
    let debts: Vec<usize> = result.warmup_draws.iter().map(|d| d.len()).collect();
    assert!(
        result.warmup_draws.iter().flatten().all(|(_, t)| !t.is_id()),
        "warmup draws charged to the budget are OOD confirmations"
    );

    let mut seen = std::collections::BTreeSet::new();
    let mut total_queries: usize = debts.iter().sum();
    for (r, round) in result.rounds.iter().enumerate() {
        let capacities: Vec<usize> =
            round.clients.iter().map(|c| c.pool_size_start).collect();
        let expected = split_budget(budget, &capacities);
        for (k, c) in round.clients.iter().enumerate() {
            let mut allowed = expected[k];
            if r == 0 {
                allowed = allowed.saturating_sub(debts[k]);
            }
            // Equality whenever the gated pool can fill the allocation.
            let want = allowed.min(c.gated_size);
            assert_eq!(
                c.queried.len(),
                want,
                "round {} client {k}: queried {} but allocation allows {want}",
                round.round,
                c.queried.len()
            );
            for (id, _) in &c.queried {
                assert!(seen.insert(*id), "sample {id} queried twice");
            }
            total_queries += c.queried.len();
        }
    }
    assert!(
        total_queries <= rounds * budget,
        "spent {total_queries} oracle calls with a budget of {}",
        rounds * budget
    );

    // Conservation after every round: every initial pool sample is still in
    // the pool, bought as an ID label, or stored as confirmed OOD.
    for round in &result.rounds {
        for (k, c) in round.clients.iter().enumerate() {
            let bought_id = c.labeled_size - result.seed_sizes[k];
            assert_eq!(
                bought_id + c.ood_store_size + c.pool_size,
                result.initial_unlabeled[k],
                "round {} client {k}: pool conservation violated",
                round.round
            );
        }
    }

    // Exhaustion: once pools run dry the spend stops, never goes negative.
    let tiny = SyntheticSpec {
        num_clients: 3,
        num_classes: 3,
        num_ood_modes: 2,
        dim: 16,
        seed_per_client: 16,
        unlabeled_per_client: 8,
        test_per_client: 12,
        ood_ratio: vec![0.3, 0.3, 0.3],
        ..SyntheticSpec::misaligned_benchmark()
    };
    let config = ExperimentConfig {
        gate_mode: GateMode::Coldstart,
        strategy: StrategyKind::Random,
        rounds: 3,
        budget_per_round: 10,
        master_seed: 0,
        ..ExperimentConfig::default()
    };
    let dataset = generate_synthetic(&tiny, 0).unwrap();
    let drained = run_experiment(config, dataset, &SequentialExecutor).unwrap();
    let spent: usize = drained
        .rounds
        .iter()
        .flat_map(|r| r.clients.iter())
        .map(|c| c.queried.len())
        .sum();
    let available: usize = drained.initial_unlabeled.iter().sum();
    assert_eq!(spent, available, "a generous budget drains the pools exactly");
    let last = drained.rounds.last().unwrap();
    assert!(last.clients.iter().all(|c| c.pool_size == 0));
    for round in &drained.rounds {
        for (k, c) in round.clients.iter().enumerate() {
            let bought_id = c.labeled_size - drained.seed_sizes[k];
            assert_eq!(
                bought_id + c.ood_store_size + c.pool_size,
                drained.initial_unlabeled[k]
            );
        }
    }

    verdict(
        10,
        true,
        &format!(
            "{total_queries}/{} oracle calls accounted for across {clients} clients \
             ({} of them warmup); drained pools conserve every sample",
            rounds * budget,
            debts.iter().sum::<usize>()
        ),
    );
}
