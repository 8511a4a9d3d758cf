//! TOML experiment configuration and matrix expansion.
//!
//! A config file describes one synthetic (or imported) dataset plus a matrix
//! of experiment factors. Every key is optional; an empty file expands to the
//! single default experiment `dynamic-mixed-random-seed0`. Unknown keys are
//! rejected so typos fail loudly instead of silently running defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use fedgate_core::acquisition::StrategyKind;
use fedgate_core::config::ExperimentConfig;
use fedgate_core::embedding::SyntheticSpec;
use fedgate_core::gate::GateMode;
use fedgate_core::probe::ProbeHyper;
use fedgate_core::prompt::{PromptHyper, PromptVariant};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub dataset: DatasetSection,
    pub matrix: MatrixSection,
    pub protocol: ProtocolSection,
    pub prompt: PromptSection,
    pub probe: ProbeSection,
}

/// Synthetic generator knobs, defaulting to the misaligned-template
/// benchmark. `import` switches to an on-disk CSV dataset instead; the
/// generator knobs are then ignored.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub import: Option<PathBuf>,
    pub clients: usize,
    pub classes: usize,
    pub ood_modes: usize,
    pub dim: usize,
    pub class_separation: f64,
    pub within_class_std: f64,
    pub ood_mode_std: f64,
    pub ood_direction_spread: f64,
    pub client_shift: f64,
    pub seed_per_client: usize,
    pub unlabeled_per_client: usize,
    pub test_per_client: usize,
    /// One entry per client, or a single entry broadcast to all clients.
    pub ood_ratio: Vec<f64>,
    pub template_misalignment: f64,
    pub exclusive_ood_modes: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let b = SyntheticSpec::misaligned_benchmark();
        DatasetSection {
            import: None,
            clients: b.num_clients,
            classes: b.num_classes,
            ood_modes: b.num_ood_modes,
            dim: b.dim,
            class_separation: b.class_separation,
            within_class_std: b.within_class_std,
            ood_mode_std: b.ood_mode_std,
            ood_direction_spread: b.ood_direction_spread,
            client_shift: b.client_shift,
            seed_per_client: b.seed_per_client,
            unlabeled_per_client: b.unlabeled_per_client,
            test_per_client: b.test_per_client,
            ood_ratio: b.ood_ratio,
            template_misalignment: b.template_misalignment,
            exclusive_ood_modes: b.exclusive_ood_modes,
        }
    }
}

impl DatasetSection {
    pub fn to_spec(&self) -> Result<SyntheticSpec> {
        let ood_ratio = match self.ood_ratio.len() {
            n if n == self.clients => self.ood_ratio.clone(),
            1 => vec![self.ood_ratio[0]; self.clients],
            n => bail!(
                "dataset.ood_ratio has {n} entries; expected 1 or {} (one per client)",
                self.clients
            ),
        };
        Ok(SyntheticSpec {
            num_clients: self.clients,
            num_classes: self.classes,
            num_ood_modes: self.ood_modes,
            dim: self.dim,
            class_separation: self.class_separation,
            within_class_std: self.within_class_std,
            ood_mode_std: self.ood_mode_std,
            ood_direction_spread: self.ood_direction_spread,
            client_shift: self.client_shift,
            seed_per_client: self.seed_per_client,
            unlabeled_per_client: self.unlabeled_per_client,
            test_per_client: self.test_per_client,
            ood_ratio,
            template_misalignment: self.template_misalignment,
            exclusive_ood_modes: self.exclusive_ood_modes,
        })
    }
}

/// The experiment factors. Every combination of mode x strategy x seed runs
/// once; `variants` multiplies only the `dynamic` mode, which is the only one
/// with learnable prompts.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixSection {
    /// Any of `coldstart`, `oracle`, `static`, `dynamic`.
    pub modes: Vec<String>,
    /// Any of `mixed`, `global`, `local`.
    pub variants: Vec<String>,
    /// Any of `random`, `entropy`, `kmeans`.
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for MatrixSection {
    fn default() -> Self {
        MatrixSection {
            modes: vec!["dynamic".into()],
            variants: vec!["mixed".into()],
            strategies: vec!["random".into()],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub rounds: usize,
    pub budget_per_round: usize,
    pub tau: f64,
    /// Labeled warmup shots for the dynamic gate; ignored by other modes.
    pub warmup_shots: usize,
    pub ood_warmup: bool,
    pub ood_warmup_fraction: f64,
    pub static_ood_templates: usize,
    pub static_template_spread: f64,
    pub uniform_prompt_weights: bool,
    pub redistribute_budget: bool,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        ProtocolSection {
            rounds: d.rounds,
            budget_per_round: d.budget_per_round,
            tau: d.tau,
            warmup_shots: d.warmup_shots,
            ood_warmup: d.ood_warmup,
            ood_warmup_fraction: d.ood_warmup_fraction,
            static_ood_templates: 4,
            static_template_spread: d.static_template_spread,
            uniform_prompt_weights: d.uniform_prompt_weights,
            redistribute_budget: d.redistribute_budget,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub shot_cap: usize,
    pub batch_size: usize,
    /// Row-count overrides; when absent each variant uses its own default
    /// (mixed 8+8, global 16, local 16).
    pub global_rows: Option<usize>,
    pub local_rows: Option<usize>,
}

impl Default for PromptSection {
    fn default() -> Self {
        let d = PromptHyper::default();
        PromptSection {
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            epochs: d.epochs,
            shot_cap: d.shot_cap,
            batch_size: d.batch_size,
            global_rows: None,
            local_rows: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let d = ProbeHyper::default();
        ProbeSection { lr: d.lr, epochs: d.epochs, batch_size: d.batch_size }
    }
}

/// One fully resolved experiment: its output directory name, the factor
/// levels echoed into every CSV row, and the core protocol config.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub name: String,
    pub mode: String,
    pub variant: Option<String>,
    pub strategy: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

pub fn load(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: FileConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(cfg)
}

impl FileConfig {
    /// Expands the factor matrix into concrete runs. `seed_override` replaces
    /// the whole seed list, which keeps quick one-off reruns to a single flag.
    pub fn expand(&self, seed_override: Option<u64>) -> Result<Vec<RunSpec>> {
        let m = &self.matrix;
        let seeds: Vec<u64> = match seed_override {
            Some(s) => vec![s],
            None => m.seeds.clone(),
        };
        if m.modes.is_empty() || m.strategies.is_empty() || seeds.is_empty() {
            bail!("matrix.modes, matrix.strategies and matrix.seeds must be non-empty");
        }

        let mut runs = Vec::new();
        let mut seen = BTreeSet::new();
        for mode in &m.modes {
            let variants: Vec<Option<&str>> = if mode == "dynamic" {
                if m.variants.is_empty() {
                    bail!("matrix.variants must be non-empty when `dynamic` is in matrix.modes");
                }
                m.variants.iter().map(|v| Some(v.as_str())).collect()
            } else {
                vec![None]
            };
            for variant in variants {
                for strategy in &m.strategies {
                    for &seed in &seeds {
                        let run = self.resolve(mode, variant, strategy, seed)?;
                        if !seen.insert(run.name.clone()) {
                            bail!("matrix expands to duplicate experiment `{}`", run.name);
                        }
                        runs.push(run);
                    }
                }
            }
        }
        Ok(runs)
    }

    fn resolve(
        &self,
        mode: &str,
        variant: Option<&str>,
        strategy: &str,
        seed: u64,
    ) -> Result<RunSpec> {
        let prompt_variant = variant.map(|v| self.prompt_variant(v)).transpose()?;
        let gate_mode = match mode {
            "coldstart" => GateMode::Coldstart,
            "oracle" => GateMode::OracleUpperBound,
            "static" => GateMode::StaticZeroShot {
                ood_templates: self.protocol.static_ood_templates,
            },
            "dynamic" => GateMode::DynamicPromptGate {
                variant: prompt_variant.expect("dynamic expansion always carries a variant"),
            },
            other => bail!(
                "unknown mode `{other}`; expected one of coldstart, oracle, static, dynamic"
            ),
        };
        let strategy_kind = match strategy {
            "random" => StrategyKind::Random,
            "entropy" => StrategyKind::Entropy,
            "kmeans" => StrategyKind::KMeansDiverse,
            other => bail!(
                "unknown strategy `{other}`; expected one of random, entropy, kmeans"
            ),
        };

        let p = &self.protocol;
        let dynamic = matches!(gate_mode, GateMode::DynamicPromptGate { .. });
        let config = ExperimentConfig {
            gate_mode,
            strategy: strategy_kind,
            rounds: p.rounds,
            budget_per_round: p.budget_per_round,
            tau: p.tau,
            prompt: PromptHyper {
                lr: self.prompt.lr,
                momentum: self.prompt.momentum,
                weight_decay: self.prompt.weight_decay,
                epochs: self.prompt.epochs,
                shot_cap: self.prompt.shot_cap,
                batch_size: self.prompt.batch_size,
            },
            probe: ProbeHyper {
                lr: self.probe.lr,
                epochs: self.probe.epochs,
                batch_size: self.probe.batch_size,
            },
            // Warmup only makes sense when there is a trainable gate; zeroing
            // it here lets one matrix mix dynamic and baseline modes.
            warmup_shots: if dynamic { p.warmup_shots } else { 0 },
            ood_warmup: dynamic && p.ood_warmup,
            ood_warmup_fraction: p.ood_warmup_fraction,
            static_template_spread: p.static_template_spread,
            uniform_prompt_weights: p.uniform_prompt_weights,
            redistribute_budget: p.redistribute_budget,
            master_seed: seed,
        };

        let name = match variant {
            Some(v) => format!("{mode}-{v}-{strategy}-seed{seed}"),
            None => format!("{mode}-{strategy}-seed{seed}"),
        };
        Ok(RunSpec {
            name,
            mode: mode.to_string(),
            variant: variant.map(str::to_string),
            strategy: strategy.to_string(),
            seed,
            config,
        })
    }

    fn prompt_variant(&self, name: &str) -> Result<PromptVariant> {
        let v = match name {
            "mixed" => PromptVariant::Mixed {
                global_rows: self.prompt.global_rows.unwrap_or(8),
                local_rows: self.prompt.local_rows.unwrap_or(8),
            },
            "global" => PromptVariant::GlobalOnly {
                global_rows: self.prompt.global_rows.unwrap_or(16),
            },
            "local" => PromptVariant::LocalOnly {
                local_rows: self.prompt.local_rows.unwrap_or(16),
            },
            other => bail!("unknown variant `{other}`; expected one of mixed, global, local"),
        };
        Ok(v)
    }
}
