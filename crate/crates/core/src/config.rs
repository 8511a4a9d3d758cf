//! Experiment configuration shared by every front end.

use crate::acquisition::StrategyKind;
use crate::error::{Error, Result};
use crate::gate::GateMode;
use crate::probe::ProbeHyper;
use crate::prompt::{PromptHyper, PromptVariant};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub gate_mode: GateMode,
    pub strategy: StrategyKind,
    pub rounds: usize,
    /// Total oracle budget per round, split across clients.
    pub budget_per_round: usize,
    pub tau: f64,
    pub prompt: PromptHyper,
    pub probe: ProbeHyper,
    /// Labeled shots used to warm the prompt gate before round one
    /// (prompt-gate modes only; zero disables warmup).
    pub warmup_shots: usize,
    /// Also warm the rejection slot with oracle-confirmed OOD pool samples.
    /// Those oracle calls are charged against the round-one budget.
    pub ood_warmup: bool,
    pub ood_warmup_fraction: f64,
    /// How far rejection templates of the static gate spread around the base
    /// rejection anchor.
    pub static_template_spread: f64,
    /// Weight prompt aggregation uniformly over participating clients
    /// instead of by example counts.
    pub uniform_prompt_weights: bool,
    /// Split the budget by gated pool sizes instead of raw pool sizes.
    pub redistribute_budget: bool,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gate_mode: GateMode::DynamicPromptGate { variant: PromptVariant::default_mixed() },
            strategy: StrategyKind::Random,
            rounds: 5,
            budget_per_round: 40,
            tau: 0.07,
            prompt: PromptHyper::default(),
            probe: ProbeHyper::default(),
            warmup_shots: 0,
            ood_warmup: false,
            ood_warmup_fraction: 0.25,
            static_template_spread: 0.5,
            uniform_prompt_weights: false,
            redistribute_budget: false,
            master_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if num_clients == 0 {
            return Err(Error::InvalidConfig("at least one client is required"));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("at least one round is required"));
        }
        if self.budget_per_round < num_clients {
            return Err(Error::InvalidConfig("per-round budget must cover one query per client"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::NonPositiveTemperature);
        }
        if !(self.prompt.lr > 0.0 && self.prompt.lr.is_finite())
            || !(self.probe.lr > 0.0 && self.probe.lr.is_finite())
        {
            return Err(Error::InvalidConfig("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.prompt.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)"));
        }
        if self.prompt.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight decay cannot be negative"));
        }
        if self.prompt.epochs == 0 || self.probe.epochs == 0 {
            return Err(Error::InvalidConfig("training needs at least one epoch"));
        }
        if self.prompt.batch_size == 0 || self.probe.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1"));
        }
        if self.prompt.shot_cap == 0 {
            return Err(Error::InvalidShotCap);
        }
        if !(0.0..=1.0).contains(&self.ood_warmup_fraction) {
            return Err(Error::InvalidConfig("OOD warmup fraction must lie in [0, 1]"));
        }
        if !(self.static_template_spread >= 0.0 && self.static_template_spread.is_finite()) {
            return Err(Error::InvalidConfig("template spread must be finite and nonnegative"));
        }
        match self.gate_mode {
            GateMode::StaticZeroShot { ood_templates } => {
                if ood_templates == 0 {
                    return Err(Error::InvalidConfig(
                        "static gate needs at least one rejection template",
                    ));
                }
            }
            GateMode::DynamicPromptGate { variant } => variant.validate()?,
            _ => {}
        }
        let dynamic = matches!(self.gate_mode, GateMode::DynamicPromptGate { .. });
        if self.warmup_shots > 0 && !dynamic {
            return Err(Error::InvalidConfig("warmup only applies to the prompt gate"));
        }
        if self.ood_warmup && self.warmup_shots == 0 {
            return Err(Error::InvalidConfig("OOD warmup requires warmup shots"));
        }
        Ok(())
    }
}
