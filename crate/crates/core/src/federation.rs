//! The federated simulation loop.
//!
//! Each round runs in four phases: (A) broadcast and gate every pool
//! sequentially, (B) split the oracle budget, (C) run per-client work as
//! independent jobs through a pluggable executor, (D) commit outcomes and
//! aggregate in client order. Phases A, B, and D are sequential and jobs in
//! phase C are pure functions of round-start state, so results never depend
//! on the execution schedule.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::acquisition::select_queries;
use crate::config::ExperimentConfig;
use crate::embedding::{Embedding, FederatedDataset, GroundTruth, Sample, SampleId};
use crate::error::{Error, Result};
use crate::gate::{partition_pool, static_texts, GateLabeler, GateMode};
use crate::math::Matrix;
use crate::metrics::{
    balanced_multiclass_accuracy, gate_test_metrics, pool_purity, query_precision,
    GateTestMetrics, QueryHistory,
};
use crate::probe::{fedavg_linear, LinearProbe};
use crate::prompt::{
    balanced_subsample, class_text_embeddings, init_prompt_bank, train_prompts, FrozenTextMixer,
    PromptBank,
};
use crate::rng::{self, Stage};
use crate::wire::{BroadcastMsg, ClientUpdateMsg};

/// The labeling oracle: the true class for in-distribution samples, the
/// coarse rejection slot (`num_classes`) for everything else.
pub fn oracle_label(truth: &GroundTruth, num_classes: usize) -> usize {
    match truth {
        GroundTruth::Id { class } => *class,
        GroundTruth::Ood { .. } => num_classes,
    }
}

/// Split a round budget over clients proportionally to their capacities.
///
/// Every client with a nonempty pool is first guaranteed one query (in client
/// order, while the budget lasts); the rest is apportioned to the residual
/// capacities by largest remainder, ties to the lower client index. No client
/// is ever allocated more than its capacity and the total never exceeds the
/// budget.
pub fn split_budget(total: usize, capacities: &[usize]) -> Vec<usize> {
    let mut alloc = vec![0usize; capacities.len()];
    let overall: usize = capacities.iter().sum();
    let mut remaining = total.min(overall);
    for (a, c) in alloc.iter_mut().zip(capacities) {
        if *c > 0 && remaining > 0 {
            *a = 1;
            remaining -= 1;
        }
    }
    if remaining == 0 {
        return alloc;
    }
    let residual: Vec<usize> = capacities.iter().zip(&alloc).map(|(c, a)| c - a).collect();
    let residual_total: usize = residual.iter().sum();
    let mut leftover = remaining;
    let mut remainders: Vec<(usize, usize)> = Vec::new();
    for (i, c) in residual.iter().enumerate() {
        let quota = remaining * c / residual_total;
        alloc[i] += quota;
        leftover -= quota;
        remainders.push((remaining * c % residual_total, i));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (rem, i) in remainders.into_iter().take(leftover) {
        debug_assert!(rem > 0);
        alloc[i] += 1;
    }
    alloc
}

/// Capacity-weighted average of global token matrix lists.
pub fn fedavg_prompts(updates: &[(Vec<Matrix>, f64)]) -> Result<Vec<Matrix>> {
    let (first, _) = updates.first().ok_or(Error::EmptyAggregation)?;
    let total: f64 = updates.iter().map(|(_, w)| *w).sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let mut out: Vec<Matrix> =
        first.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    for (matrices, w) in updates {
        if matrices.len() != out.len() {
            return Err(Error::ShapeMismatch);
        }
        let scale = w / total;
        for (acc, m) in out.iter_mut().zip(matrices) {
            if acc.rows() != m.rows() || acc.cols() != m.cols() {
                return Err(Error::ShapeMismatch);
            }
            for (a, v) in acc.data_mut().iter_mut().zip(m.data()) {
                *a += scale * v;
            }
        }
    }
    Ok(out)
}

/// Everything one client owns during a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client: usize,
    /// Oracle-confirmed in-distribution samples: seed labels plus acquisitions.
    pub labeled: Vec<(SampleId, Embedding, usize)>,
    /// Oracle-confirmed OOD samples; they train the rejection slot but never
    /// enter the probe's training set.
    pub ood_store: Vec<(SampleId, Embedding)>,
    pub pool: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundReport {
    pub client: usize,
    pub queried: Vec<(SampleId, GroundTruth)>,
    pub query_precision: Option<f64>,
    pub accumulated_recall: Option<f64>,
    /// Purity of the gated pool at partition time.
    pub pool_purity: Option<f64>,
    /// Gate quality on the held-out test split, also at partition time.
    pub gate: Option<GateTestMetrics>,
    /// Balanced accuracy of the post-aggregation probe on in-distribution
    /// test samples.
    pub probe_bma: Option<f64>,
    pub gated_size: usize,
    pub exploration_size: usize,
    pub pool_size_start: usize,
    pub pool_size: usize,
    pub labeled_size: usize,
    pub ood_store_size: usize,
    pub prompt_loss_final: Option<f64>,
    pub probe_loss_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundReport>,
    /// Warmup oracle calls per client (charged against round one's budget).
    pub warmup_draws: Vec<Vec<(SampleId, GroundTruth)>>,
    pub seed_sizes: Vec<usize>,
    pub initial_unlabeled: Vec<usize>,
    pub initial_unlabeled_id: Vec<usize>,
}

/// What one phase-C job produces. Local tokens stay out of the update
/// message on purpose: they never travel to the server.
#[derive(Debug)]
pub struct ClientOutcome {
    pub client: usize,
    pub queried: Vec<SampleId>,
    pub update_bytes: Vec<u8>,
    pub local_tokens: Option<Vec<Matrix>>,
    pub prompt_loss_final: Option<f64>,
    pub probe_loss_final: Option<f64>,
}

pub type Job<'a> = Box<dyn FnOnce() -> Result<ClientOutcome> + Send + 'a>;

/// Runs one round's client jobs. Implementations may use any schedule; the
/// protocol guarantees the result cannot depend on it. Results must come
/// back in submission order.
pub trait RoundExecutor {
    fn execute<'a>(&self, jobs: Vec<Job<'a>>) -> Vec<Result<ClientOutcome>>;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct SequentialExecutor;

impl RoundExecutor for SequentialExecutor {
    fn execute<'a>(&self, jobs: Vec<Job<'a>>) -> Vec<Result<ClientOutcome>> {
        jobs.into_iter().map(|job| job()).collect()
    }
}

struct PhaseA {
    gated: Vec<SampleId>,
    gated_size: usize,
    exploration_size: usize,
    pool_size_start: usize,
    purity: Option<f64>,
    gate: Option<GateTestMetrics>,
}

pub struct Experiment {
    config: ExperimentConfig,
    num_classes: usize,
    dim: usize,
    mixer: FrozenTextMixer,
    bank: Option<PromptBank>,
    probe: LinearProbe,
    clients: Vec<ClientState>,
    histories: Vec<QueryHistory>,
    static_text_set: Option<Vec<Embedding>>,
    warmup_draws: Vec<Vec<(SampleId, GroundTruth)>>,
    seed_sizes: Vec<usize>,
    initial_unlabeled: Vec<usize>,
    initial_unlabeled_id: Vec<usize>,
    debt: Vec<usize>,
}

impl Experiment {
    /// Validates inputs, fits the initial probe on seed labels, and (for
    /// prompt-gate modes) runs the optional warmup pass.
    pub fn new(config: ExperimentConfig, dataset: FederatedDataset) -> Result<Self> {
        dataset.validate()?;
        config.validate(dataset.num_clients())?;
        let num_classes = dataset.num_classes;
        let dim = dataset.dim;
        let seed = config.master_seed;

        let mixer = FrozenTextMixer::new(dataset.anchors.clone(), seed)?;
        let bank = match config.gate_mode.prompt_variant() {
            Some(variant) => Some(init_prompt_bank(
                variant,
                num_classes,
                dataset.num_clients(),
                dim,
                seed,
            )?),
            None => None,
        };
        let static_text_set = match config.gate_mode {
            GateMode::StaticZeroShot { ood_templates } => Some(static_texts(
                &dataset.anchors,
                ood_templates,
                config.static_template_spread,
                seed,
            )?),
            _ => None,
        };

        let mut clients = Vec::with_capacity(dataset.clients.len());
        for c in dataset.clients {
            let labeled: Vec<(SampleId, Embedding, usize)> = c
                .seed_labeled
                .iter()
                .map(|s| match s.truth {
                    GroundTruth::Id { class } => Ok((s.id, s.embedding.clone(), class)),
                    GroundTruth::Ood { .. } => {
                        Err(Error::InvalidConfig("seed labels must be in-distribution"))
                    }
                })
                .collect::<Result<_>>()?;
            clients.push(ClientState {
                client: c.client,
                labeled,
                ood_store: Vec::new(),
                pool: c.unlabeled,
                test: c.test,
            });
        }
        let num_clients = clients.len();
        let seed_sizes: Vec<usize> = clients.iter().map(|c| c.labeled.len()).collect();
        let initial_unlabeled: Vec<usize> = clients.iter().map(|c| c.pool.len()).collect();
        let initial_unlabeled_id: Vec<usize> = clients
            .iter()
            .map(|c| c.pool.iter().filter(|s| s.truth.is_id()).count())
            .collect();

        // Initial probe: every client fits the zero probe on its seed labels
        // and the server aggregates by seed-set size.
        let mut probe = LinearProbe::zeros(num_classes, dim);
        let mut fits: Vec<(LinearProbe, f64)> = Vec::new();
        for client in &clients {
            if client.labeled.is_empty() {
                continue;
            }
            let examples: Vec<(Embedding, usize)> =
                client.labeled.iter().map(|(_, z, y)| (z.clone(), *y)).collect();
            let mut local = probe.clone();
            let mut fit_rng = rng::stream(seed, client.client as u64, 0, Stage::InitProbe);
            local.train_local(&examples, &config.probe, &mut fit_rng)?;
            fits.push((local, examples.len() as f64));
        }
        if !fits.is_empty() {
            probe = fedavg_linear(&fits)?;
        }

        let mut experiment = Experiment {
            config,
            num_classes,
            dim,
            mixer,
            bank,
            probe,
            clients,
            histories: vec![QueryHistory::new(); num_clients],
            static_text_set,
            warmup_draws: vec![Vec::new(); num_clients],
            seed_sizes,
            initial_unlabeled,
            initial_unlabeled_id,
            debt: vec![0; num_clients],
        };
        experiment.warmup()?;
        Ok(experiment)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn bank(&self) -> Option<&PromptBank> {
        self.bank.as_ref()
    }

    pub fn probe(&self) -> &LinearProbe {
        &self.probe
    }

    /// Pre-round-one prompt fitting on seed labels, optionally spending part
    /// of round one's budget on oracle-confirmed OOD pool samples so the
    /// rejection slot starts with real examples.
    fn warmup(&mut self) -> Result<()> {
        let shots = self.config.warmup_shots;
        if shots == 0 || self.bank.is_none() {
            return Ok(());
        }
        let seed = self.config.master_seed;
        let mut updates: Vec<(Vec<Matrix>, f64)> = Vec::new();
        for k in 0..self.clients.len() {
            let mut draw_rng = rng::stream(seed, k as u64, 0, Stage::WarmupDraw);
            let labels: Vec<usize> = self.clients[k].labeled.iter().map(|(_, _, y)| *y).collect();
            let picked = balanced_subsample(&labels, self.num_classes, shots, &mut draw_rng);
            let mut examples: Vec<(Embedding, usize)> = picked
                .into_iter()
                .map(|i| {
                    let (_, z, y) = &self.clients[k].labeled[i];
                    (z.clone(), *y)
                })
                .collect();

            if self.config.ood_warmup {
                let want = (shots as f64 * self.config.ood_warmup_fraction + 0.5) as usize;
                let mut ood_ids: Vec<SampleId> = self.clients[k]
                    .pool
                    .iter()
                    .filter(|s| !s.truth.is_id())
                    .map(|s| s.id)
                    .collect();
                ood_ids.sort_unstable();
                let (chosen, _) = ood_ids.partial_shuffle(&mut draw_rng, want);
                let mut chosen = chosen.to_vec();
                chosen.sort_unstable();
                for id in chosen {
                    let pos = self.clients[k]
                        .pool
                        .iter()
                        .position(|s| s.id == id)
                        .expect("drawn from this pool");
                    let sample = self.clients[k].pool.remove(pos);
                    self.histories[k].record(sample.id, &sample.truth)?;
                    self.warmup_draws[k].push((sample.id, sample.truth));
                    self.debt[k] += 1;
                    examples.push((sample.embedding.clone(), self.num_classes));
                    self.clients[k].ood_store.push((sample.id, sample.embedding));
                }
            }

            if examples.is_empty() {
                continue;
            }
            let bank = self.bank.as_mut().expect("warmup requires a bank");
            let mut view = PromptBank::from_parts(
                bank.variant(),
                self.dim,
                bank.global.clone(),
                vec![bank.local[k].clone()],
            )?;
            let mut train_rng = rng::stream(seed, k as u64, 0, Stage::WarmupTrain);
            train_prompts(
                &mut view,
                &self.mixer,
                0,
                &examples,
                &self.config.prompt,
                self.config.tau,
                &mut train_rng,
            )?;
            bank.local[k] = view.local.swap_remove(0);
            let used = self.config.prompt.shot_cap.min(examples.len()) as u64;
            updates.push((view.global, prompt_weight(self.config.uniform_prompt_weights, used)));
        }
        let active: Vec<(Vec<Matrix>, f64)> =
            updates.into_iter().filter(|(_, w)| *w > 0.0).collect();
        if !active.is_empty() {
            self.bank.as_mut().unwrap().global = fedavg_prompts(&active)?;
        }
        Ok(())
    }

    pub fn run_round(&mut self, round: usize, executor: &dyn RoundExecutor) -> Result<RoundReport> {
        let num_clients = self.clients.len();
        let tau = self.config.tau;

        // Phase A: broadcast, gate, and measure gate quality.
        let broadcast = BroadcastMsg {
            round: round as u32,
            global: self.bank.as_ref().map(|b| b.global.clone()).unwrap_or_default(),
            probe: self.probe.clone(),
        };
        let broadcast_bytes = broadcast.encode();
        let echoed = BroadcastMsg::decode(&broadcast_bytes)?;
        debug_assert_eq!(echoed.global, broadcast.global);

        let mut phase_a = Vec::with_capacity(num_clients);
        for k in 0..num_clients {
            let client = &self.clients[k];
            let dynamic_texts;
            let labeler = match self.config.gate_mode {
                GateMode::Coldstart => GateLabeler::AllId,
                GateMode::OracleUpperBound => GateLabeler::Oracle,
                GateMode::StaticZeroShot { .. } => GateLabeler::Texts {
                    texts: self.static_text_set.as_ref().expect("built at construction"),
                    num_id_slots: self.num_classes,
                    tau,
                },
                GateMode::DynamicPromptGate { .. } => {
                    let bank = self.bank.as_ref().expect("built at construction");
                    dynamic_texts = class_text_embeddings(bank, &self.mixer, k)?;
                    GateLabeler::Texts {
                        texts: &dynamic_texts,
                        num_id_slots: self.num_classes,
                        tau,
                    }
                }
            };
            let partition = partition_pool(&client.pool, &labeler, self.num_classes)?;
            let by_id: BTreeMap<SampleId, &Sample> =
                client.pool.iter().map(|s| (s.id, s)).collect();
            let gated_truths: Vec<GroundTruth> =
                partition.gated.iter().map(|id| by_id[id].truth).collect();
            let gate = if client.test.is_empty() {
                None
            } else {
                Some(gate_test_metrics(&client.test, &labeler, self.num_classes)?)
            };
            phase_a.push(PhaseA {
                gated_size: partition.gated.len(),
                exploration_size: partition.exploration.len(),
                pool_size_start: client.pool.len(),
                purity: pool_purity(&gated_truths),
                gate,
                gated: partition.gated,
            });
        }

        // Phase B: split the budget.
        let capacities: Vec<usize> = if self.config.redistribute_budget {
            phase_a.iter().map(|p| p.gated_size).collect()
        } else {
            self.clients.iter().map(|c| c.pool.len()).collect()
        };
        let mut budgets = split_budget(self.config.budget_per_round, &capacities);
        if round == 1 {
            for (b, d) in budgets.iter_mut().zip(&self.debt) {
                *b = b.saturating_sub(*d);
            }
        }

        // Phase C: independent client jobs.
        let config = &self.config;
        let mixer = &self.mixer;
        let num_classes = self.num_classes;
        let dim = self.dim;
        let bytes = &broadcast_bytes;
        let mut jobs: Vec<Job> = Vec::with_capacity(num_clients);
        for (k, (client, phase)) in self.clients.iter().zip(&phase_a).enumerate() {
            let locals = self.bank.as_ref().map(|b| b.local[k].clone());
            let gated = phase.gated.clone();
            let budget = budgets[k];
            jobs.push(Box::new(move || {
                client_round_job(client, config, mixer, bytes, locals, gated, budget, round, num_classes, dim)
            }));
        }
        let results = executor.execute(jobs);
        if results.len() != num_clients {
            return Err(Error::InvalidConfig("executor dropped or duplicated jobs"));
        }
        let mut outcomes = Vec::with_capacity(num_clients);
        for r in results {
            outcomes.push(r?);
        }
        outcomes.sort_by_key(|o| o.client);

        // Phase D: commit and aggregate in client order.
        let mut prompt_updates: Vec<(Vec<Matrix>, f64)> = Vec::new();
        let mut probe_updates: Vec<(LinearProbe, f64)> = Vec::new();
        let mut queried_per_client: Vec<Vec<(SampleId, GroundTruth)>> = Vec::new();
        for (k, outcome) in outcomes.iter().enumerate() {
            if outcome.client != k {
                return Err(Error::InvalidConfig("executor returned the wrong client set"));
            }
            let update = ClientUpdateMsg::decode(&outcome.update_bytes)?;
            if update.client as usize != k || update.round as usize != round {
                return Err(Error::InvalidConfig("client update does not match this round"));
            }
            let client = &mut self.clients[k];
            let mut queried = Vec::with_capacity(outcome.queried.len());
            for id in &outcome.queried {
                let pos = client
                    .pool
                    .iter()
                    .position(|s| s.id == *id)
                    .ok_or(Error::InvalidConfig("selected sample is not in the pool"))?;
                let sample = client.pool.remove(pos);
                self.histories[k].record(sample.id, &sample.truth)?;
                queried.push((sample.id, sample.truth));
                match sample.truth {
                    GroundTruth::Id { class } => {
                        client.labeled.push((sample.id, sample.embedding, class))
                    }
                    GroundTruth::Ood { .. } => {
                        client.ood_store.push((sample.id, sample.embedding))
                    }
                }
            }
            queried_per_client.push(queried);
            if let (Some(bank), Some(tokens)) = (self.bank.as_mut(), &outcome.local_tokens) {
                bank.local[k] = tokens.clone();
            }
            if self.bank.is_some() {
                let w = prompt_weight(self.config.uniform_prompt_weights, update.prompt_examples);
                prompt_updates.push((update.global, w));
            }
            probe_updates.push((update.probe, update.probe_examples as f64));
        }
        if let Some(bank) = self.bank.as_mut() {
            let active: Vec<(Vec<Matrix>, f64)> =
                prompt_updates.into_iter().filter(|(_, w)| *w > 0.0).collect();
            if !active.is_empty() {
                bank.global = fedavg_prompts(&active)?;
            }
        }
        let active_probes: Vec<(LinearProbe, f64)> =
            probe_updates.into_iter().filter(|(_, w)| *w > 0.0).collect();
        if !active_probes.is_empty() {
            self.probe = fedavg_linear(&active_probes)?;
        }

        // Reports, including the post-aggregation probe's balanced accuracy.
        let mut reports = Vec::with_capacity(num_clients);
        for (k, (phase, queried)) in phase_a.into_iter().zip(queried_per_client).enumerate() {
            let client = &self.clients[k];
            let probe_bma = if self.probe.is_trained() {
                let mut pairs = Vec::new();
                for s in &client.test {
                    if let GroundTruth::Id { class } = s.truth {
                        pairs.push((class, self.probe.predict_class(&s.embedding)?));
                    }
                }
                balanced_multiclass_accuracy(&pairs, self.num_classes)?
            } else {
                None
            };
            let truths: Vec<GroundTruth> = queried.iter().map(|(_, t)| *t).collect();
            reports.push(ClientRoundReport {
                client: k,
                query_precision: query_precision(&truths),
                accumulated_recall: self.histories[k].recall(self.initial_unlabeled_id[k]),
                pool_purity: phase.purity,
                gate: phase.gate,
                probe_bma,
                gated_size: phase.gated_size,
                exploration_size: phase.exploration_size,
                pool_size_start: phase.pool_size_start,
                pool_size: client.pool.len(),
                labeled_size: client.labeled.len(),
                ood_store_size: client.ood_store.len(),
                prompt_loss_final: outcomes[k].prompt_loss_final,
                probe_loss_final: outcomes[k].probe_loss_final,
                queried,
            });
        }
        Ok(RoundReport { round, clients: reports })
    }

    pub fn finish(self, rounds: Vec<RoundReport>) -> ExperimentResult {
        ExperimentResult {
            config: self.config,
            rounds,
            warmup_draws: self.warmup_draws,
            seed_sizes: self.seed_sizes,
            initial_unlabeled: self.initial_unlabeled,
            initial_unlabeled_id: self.initial_unlabeled_id,
        }
    }
}

fn prompt_weight(uniform: bool, examples: u64) -> f64 {
    if examples == 0 {
        0.0
    } else if uniform {
        1.0
    } else {
        examples as f64
    }
}

#[allow(clippy::too_many_arguments)]
fn client_round_job(
    client: &ClientState,
    config: &ExperimentConfig,
    mixer: &FrozenTextMixer,
    broadcast_bytes: &[u8],
    locals: Option<Vec<Matrix>>,
    gated: Vec<SampleId>,
    budget: usize,
    round: usize,
    num_classes: usize,
    dim: usize,
) -> Result<ClientOutcome> {
    let k = client.client;
    let seed = config.master_seed;
    let decoded = BroadcastMsg::decode(broadcast_bytes)?;

    let by_id: BTreeMap<SampleId, &Sample> = client.pool.iter().map(|s| (s.id, s)).collect();
    let candidates: Vec<&Sample> = gated
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or(Error::InvalidConfig("gated sample is not in the pool"))
        })
        .collect::<Result<_>>()?;

    let mut select_rng = rng::stream(seed, k as u64, round as u64, Stage::Selection);
    let queried = select_queries(config.strategy, &candidates, budget, &decoded.probe, &mut select_rng)?;

    // Oracle answers for this round's queries.
    let mut acquired_id: Vec<(Embedding, usize)> = Vec::new();
    let mut acquired_ood: Vec<Embedding> = Vec::new();
    for id in &queried {
        let sample = by_id[id];
        match oracle_label(&sample.truth, num_classes) {
            slot if slot < num_classes => acquired_id.push((sample.embedding.clone(), slot)),
            _ => acquired_ood.push(sample.embedding.clone()),
        }
    }

    // Post-commit training views.
    let mut probe_set: Vec<(Embedding, usize)> =
        client.labeled.iter().map(|(_, z, y)| (z.clone(), *y)).collect();
    probe_set.extend(acquired_id.iter().cloned());
    let mut prompt_set = probe_set.clone();
    prompt_set.extend(client.ood_store.iter().map(|(_, z)| (z.clone(), num_classes)));
    prompt_set.extend(acquired_ood.into_iter().map(|z| (z, num_classes)));

    let mut update_global: Vec<Matrix> = Vec::new();
    let mut prompt_examples = 0u64;
    let mut prompt_loss_final = None;
    let mut local_tokens = None;
    if let Some(variant) = config.gate_mode.prompt_variant() {
        update_global = decoded.global.clone();
        if !queried.is_empty() && !prompt_set.is_empty() {
            let locals = locals.ok_or(Error::InvalidConfig("prompt gate without local tokens"))?;
            let mut view =
                PromptBank::from_parts(variant, dim, decoded.global.clone(), vec![locals])?;
            let mut train_rng = rng::stream(seed, k as u64, round as u64, Stage::PromptTrain);
            let trace = train_prompts(
                &mut view,
                mixer,
                0,
                &prompt_set,
                &config.prompt,
                config.tau,
                &mut train_rng,
            )?;
            prompt_loss_final = trace.last().copied();
            prompt_examples = config.prompt.shot_cap.min(prompt_set.len()) as u64;
            update_global = view.global;
            local_tokens = Some(view.local.swap_remove(0));
        }
    }

    let mut update_probe = decoded.probe.clone();
    let mut probe_examples = 0u64;
    let mut probe_loss_final = None;
    if !probe_set.is_empty() {
        let mut train_rng = rng::stream(seed, k as u64, round as u64, Stage::ProbeTrain);
        let trace = update_probe.train_local(&probe_set, &config.probe, &mut train_rng)?;
        probe_examples = probe_set.len() as u64;
        probe_loss_final = trace.last().copied();
    }

    let update = ClientUpdateMsg {
        client: k as u32,
        round: round as u32,
        global: update_global,
        probe: update_probe,
        prompt_examples,
        probe_examples,
    };
    Ok(ClientOutcome {
        client: k,
        queried,
        update_bytes: update.encode(),
        local_tokens,
        prompt_loss_final,
        probe_loss_final,
    })
}

/// Convenience driver: construct, run every round, collect the result.
pub fn run_experiment(
    config: ExperimentConfig,
    dataset: FederatedDataset,
    executor: &dyn RoundExecutor,
) -> Result<ExperimentResult> {
    let mut experiment = Experiment::new(config, dataset)?;
    let total = experiment.config.rounds;
    let mut rounds = Vec::with_capacity(total);
    for round in 1..=total {
        rounds.push(experiment.run_round(round, executor)?);
    }
    Ok(experiment.finish(rounds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::StrategyKind;
    use crate::embedding::{generate_synthetic, SyntheticSpec};
    use crate::math::standard_normal;
    use crate::prompt::PromptVariant;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn oracle_labels_follow_truth() {
        assert_eq!(oracle_label(&GroundTruth::Id { class: 1 }, 7), 1);
        assert_eq!(oracle_label(&GroundTruth::Ood { mode: 3 }, 7), 7);
    }

    #[test]
    fn budget_split_matches_worked_examples() {
        assert_eq!(split_budget(500, &[2000, 2000, 2000, 2000]), vec![125, 125, 125, 125]);
        assert_eq!(split_budget(10, &[5, 100]), vec![1, 9]);
        assert_eq!(split_budget(0, &[10, 10]), vec![0, 0]);
        assert_eq!(split_budget(50, &[3, 4]), vec![3, 4]);
        assert_eq!(split_budget(6, &[0, 5, 0, 9]), vec![0, 2, 0, 4]);
        assert_eq!(split_budget(3, &[9, 9, 9, 9, 9]), vec![1, 1, 1, 0, 0]);
        assert_eq!(split_budget(5, &[0, 0]), vec![0, 0]);
    }

    proptest! {
        #[test]
        fn budget_split_invariants(total in 0usize..400, caps in proptest::collection::vec(0usize..120, 1..8)) {
            let alloc = split_budget(total, &caps);
            let capacity: usize = caps.iter().sum();
            prop_assert_eq!(alloc.iter().sum::<usize>(), total.min(capacity));
            for (a, c) in alloc.iter().zip(&caps) {
                prop_assert!(a <= c);
            }
            let nonempty = caps.iter().filter(|c| **c > 0).count();
            if total >= nonempty {
                for (a, c) in alloc.iter().zip(&caps) {
                    prop_assert!(*c == 0 || *a >= 1);
                }
            }
        }
    }

    #[test]
    fn prompt_fedavg_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let updates: Vec<(Vec<Matrix>, f64)> = (0..3)
            .map(|i| {
                let mats: Vec<Matrix> = (0..2)
                    .map(|_| {
                        Matrix::from_vec(
                            2,
                            2,
                            (0..4).map(|_| standard_normal(&mut rng)).collect(),
                        )
                    })
                    .collect();
                (mats, (i + 1) as f64)
            })
            .collect();
        let avg = fedavg_prompts(&updates).unwrap();
        let total = 6.0;
        for slot in 0..2 {
            for idx in 0..4 {
                let expect: f64 = updates
                    .iter()
                    .map(|(m, w)| w / total * m[slot].data()[idx])
                    .sum();
                assert!((avg[slot].data()[idx] - expect).abs() < 1e-12);
            }
        }
        assert_eq!(fedavg_prompts(&[]), Err(Error::EmptyAggregation));
        assert_eq!(
            fedavg_prompts(&[(vec![Matrix::zeros(1, 1)], 0.0)]),
            Err(Error::ZeroWeightSum)
        );
        assert_eq!(
            fedavg_prompts(&[
                (vec![Matrix::zeros(1, 1)], 1.0),
                (vec![Matrix::zeros(1, 2)], 1.0)
            ]),
            Err(Error::ShapeMismatch)
        );
    }

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_clients: 2,
            num_classes: 3,
            num_ood_modes: 2,
            dim: 16,
            class_separation: 1.0,
            within_class_std: 0.06,
            ood_mode_std: 0.08,
            ood_direction_spread: 0.4,
            client_shift: 0.1,
            seed_per_client: 30,
            unlabeled_per_client: 120,
            test_per_client: 60,
            ood_ratio: vec![0.3, 0.35],
            template_misalignment: 0.6,
            exclusive_ood_modes: false,
        }
    }

    fn tiny_config() -> ExperimentConfig {
        let mut config =
            ExperimentConfig { rounds: 3, budget_per_round: 20, ..ExperimentConfig::default() };
        config.prompt.epochs = 4;
        config.probe.epochs = 4;
        config
    }

    #[test]
    fn experiment_smoke_runs_and_conserves_samples() {
        let dataset = generate_synthetic(&tiny_spec(), 5).unwrap();
        let result =
            run_experiment(tiny_config(), dataset, &SequentialExecutor).unwrap();
        assert_eq!(result.rounds.len(), 3);
        let mut total_queried = 0;
        for (r, round) in result.rounds.iter().enumerate() {
            assert_eq!(round.round, r + 1);
            assert_eq!(round.clients.len(), 2);
            for report in &round.clients {
                total_queried += report.queried.len();
                assert!(report.gate.is_some());
                assert!(report.probe_loss_final.is_some());
            }
        }
        assert!(total_queried > 0);
        assert!(total_queried <= 3 * 20);

        // Conservation: acquisitions plus the remaining pool account for the
        // entire initial pool.
        let last = result.rounds.last().unwrap();
        for (k, report) in last.clients.iter().enumerate() {
            let acquired_id = report.labeled_size - result.seed_sizes[k];
            assert_eq!(
                acquired_id + report.ood_store_size + report.pool_size,
                result.initial_unlabeled[k]
            );
        }

        // Accumulated recall never decreases.
        for k in 0..2 {
            let mut last_recall = 0.0;
            for round in &result.rounds {
                let r = round.clients[k].accumulated_recall.unwrap();
                assert!(r >= last_recall);
                last_recall = r;
            }
        }
    }

    #[test]
    fn experiments_are_bit_deterministic() {
        let dataset = generate_synthetic(&tiny_spec(), 5).unwrap();
        let a = run_experiment(tiny_config(), dataset.clone(), &SequentialExecutor).unwrap();
        let b = run_experiment(tiny_config(), dataset, &SequentialExecutor).unwrap();
        assert_eq!(a, b);
    }

    struct ReversedExecutor;

    impl RoundExecutor for ReversedExecutor {
        fn execute<'a>(&self, jobs: Vec<Job<'a>>) -> Vec<Result<ClientOutcome>> {
            let n = jobs.len();
            let mut slots: Vec<Option<Result<ClientOutcome>>> = (0..n).map(|_| None).collect();
            let mut indexed: Vec<(usize, Job<'a>)> = jobs.into_iter().enumerate().collect();
            while let Some((i, job)) = indexed.pop() {
                slots[i] = Some(job());
            }
            slots.into_iter().map(|s| s.unwrap()).collect()
        }
    }

    #[test]
    fn results_do_not_depend_on_the_schedule() {
        let dataset = generate_synthetic(&tiny_spec(), 9).unwrap();
        let a = run_experiment(tiny_config(), dataset.clone(), &SequentialExecutor).unwrap();
        let b = run_experiment(tiny_config(), dataset, &ReversedExecutor).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_gate_mode_completes_a_round() {
        for (mode, strategy) in [
            (GateMode::Coldstart, StrategyKind::Entropy),
            (GateMode::OracleUpperBound, StrategyKind::KMeansDiverse),
            (GateMode::StaticZeroShot { ood_templates: 3 }, StrategyKind::Random),
            (
                GateMode::DynamicPromptGate { variant: PromptVariant::default_local() },
                StrategyKind::Random,
            ),
        ] {
            let dataset = generate_synthetic(&tiny_spec(), 7).unwrap();
            let mut config = tiny_config();
            config.rounds = 1;
            config.gate_mode = mode;
            config.strategy = strategy;
            let result = run_experiment(config, dataset, &SequentialExecutor).unwrap();
            let report = &result.rounds[0].clients[0];
            let gate = report.gate.as_ref().unwrap();
            if mode == GateMode::OracleUpperBound {
                assert_eq!(gate.binary_accuracy, 1.0);
                assert_eq!(gate.ood_recall, 1.0);
            }
            if mode == GateMode::Coldstart {
                assert_eq!(report.gated_size, report.pool_size_start);
                assert_eq!(report.exploration_size, 0);
            }
        }
    }

    #[test]
    fn exhausted_pools_stop_querying_gracefully() {
        let mut spec = tiny_spec();
        spec.unlabeled_per_client = 8;
        let dataset = generate_synthetic(&spec, 11).unwrap();
        let mut config = tiny_config();
        config.rounds = 3;
        config.budget_per_round = 10;
        let result = run_experiment(config, dataset, &SequentialExecutor).unwrap();
        let last = result.rounds.last().unwrap();
        for report in &last.clients {
            assert_eq!(report.pool_size, 0);
            assert!(report.queried.is_empty());
            assert_eq!(report.query_precision, None);
            // The probe keeps training on the labeled store even with no new
            // queries.
            assert!(report.probe_loss_final.is_some());
        }
    }

    #[test]
    fn warmup_spends_round_one_budget() {
        let dataset = generate_synthetic(&tiny_spec(), 13).unwrap();
        let mut config = tiny_config();
        config.warmup_shots = 12;
        config.ood_warmup = true;
        config.ood_warmup_fraction = 0.5;
        let result = run_experiment(config, dataset, &SequentialExecutor).unwrap();
        let warmup_total: usize = result.warmup_draws.iter().map(|w| w.len()).sum();
        assert!(warmup_total > 0);
        for draws in &result.warmup_draws {
            assert_eq!(draws.len(), 6);
            assert!(draws.iter().all(|(_, t)| !t.is_id()));
        }
        let queried_total: usize = result
            .rounds
            .iter()
            .flat_map(|r| &r.clients)
            .map(|c| c.queried.len())
            .sum();
        assert!(warmup_total + queried_total <= 3 * 20);
    }

    #[test]
    fn uniform_weights_change_the_aggregate() {
        // Redistribution splits the budget by gated pool size, so clients
        // train on different example counts and the weighting matters.
        let dataset = generate_synthetic(&tiny_spec(), 17).unwrap();
        let mut weighted = tiny_config();
        weighted.redistribute_budget = true;
        let mut uniform = weighted.clone();
        uniform.uniform_prompt_weights = true;
        let a = run_experiment(weighted, dataset.clone(), &SequentialExecutor).unwrap();
        let b = run_experiment(uniform, dataset, &SequentialExecutor).unwrap();
        assert_ne!(a.rounds, b.rounds);
    }
}
