//! Report files: per-run `rounds.csv`, per-run `manifest.toml`, and the
//! matrix-level `summary.csv`.
//!
//! All CSV is written by hand: the schemas are fixed, values never contain
//! commas or quotes, and byte-stable output is a hard requirement (parallel
//! and sequential execution must produce identical files).

use anyhow::{anyhow, bail, Result};
use serde::Serialize;
use std::collections::BTreeSet;

use fedgate_core::federation::{ClientRoundReport, ExperimentResult};

use crate::config::RunSpec;

pub const ROUNDS_HEADER: &str = "round,client,mode,variant,strategy,seed,qp,aqr,purity,bma,\
gate_binary_acc,ood_recall,gated_size,exploration_size,prompt_loss_final,probe_loss_final";

/// Fixed-point rendering with six significant digits: `5 - floor(log10 |x|)`
/// decimal places, clamped to zero decimals for magnitudes of 1e6 and above.
/// Exact zero prints as `0`.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    // Decimal exponent via repeated scaling; `log10().floor()` misclassifies
    // exact powers of ten that the log rounds across.
    let mut a = x.abs();
    let mut exp = 0i32;
    while a >= 10.0 {
        a /= 10.0;
        exp += 1;
    }
    while a < 1.0 {
        a *= 10.0;
        exp -= 1;
    }
    let decimals = 5 - exp;
    if decimals >= 0 {
        format!("{:.*}", decimals as usize, x)
    } else {
        let scale = 10f64.powi(-decimals);
        format!("{:.0}", (x / scale).round() * scale)
    }
}

fn cell(x: Option<f64>) -> String {
    x.map(format_sig).unwrap_or_default()
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// The per-round metric columns shared by client rows and the ALL row.
#[allow(clippy::too_many_arguments)] // one argument per CSV column, in order
fn metric_cells(
    qp: Option<f64>,
    aqr: Option<f64>,
    purity: Option<f64>,
    bma: Option<f64>,
    gate_acc: Option<f64>,
    ood_recall: Option<f64>,
    gated: String,
    exploration: String,
    prompt_loss: Option<f64>,
    probe_loss: Option<f64>,
) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        cell(qp),
        cell(aqr),
        cell(purity),
        cell(bma),
        cell(gate_acc),
        cell(ood_recall),
        gated,
        exploration,
        cell(prompt_loss),
        cell(probe_loss),
    )
}

fn client_metric_cells(c: &ClientRoundReport) -> String {
    metric_cells(
        c.query_precision,
        c.accumulated_recall,
        c.pool_purity,
        c.probe_bma,
        c.gate.as_ref().map(|g| g.binary_accuracy),
        c.gate.as_ref().map(|g| g.ood_recall),
        c.gated_size.to_string(),
        c.exploration_size.to_string(),
        c.prompt_loss_final,
        c.probe_loss_final,
    )
}

/// Unweighted macro-average over clients; absent values are skipped, and a
/// column where every client is absent stays empty.
fn all_metric_cells(clients: &[ClientRoundReport]) -> String {
    let mean = |f: &dyn Fn(&ClientRoundReport) -> Option<f64>| {
        mean_present(clients.iter().map(f))
    };
    metric_cells(
        mean(&|c| c.query_precision),
        mean(&|c| c.accumulated_recall),
        mean(&|c| c.pool_purity),
        mean(&|c| c.probe_bma),
        mean(&|c| c.gate.as_ref().map(|g| g.binary_accuracy)),
        mean(&|c| c.gate.as_ref().map(|g| g.ood_recall)),
        cell(mean(&|c| Some(c.gated_size as f64))),
        cell(mean(&|c| Some(c.exploration_size as f64))),
        mean(&|c| c.prompt_loss_final),
        mean(&|c| c.probe_loss_final),
    )
}

pub fn rounds_csv(spec: &RunSpec, result: &ExperimentResult) -> String {
    let variant = spec.variant.as_deref().unwrap_or("");
    let tag = format!("{},{},{},{}", spec.mode, variant, spec.strategy, spec.seed);
    let mut out = String::new();
    out.push_str(ROUNDS_HEADER);
    out.push('\n');
    for round in &result.rounds {
        for c in &round.clients {
            out.push_str(&format!(
                "{},{},{},{}\n",
                round.round,
                c.client,
                tag,
                client_metric_cells(c)
            ));
        }
        out.push_str(&format!(
            "{},ALL,{},{}\n",
            round.round,
            tag,
            all_metric_cells(&round.clients)
        ));
    }
    out
}

#[derive(Serialize)]
struct Manifest {
    run: ManifestRun,
    protocol: ManifestProtocol,
    prompt: ManifestPrompt,
    probe: ManifestProbe,
    timing: ManifestTiming,
}

#[derive(Serialize)]
struct ManifestRun {
    name: String,
    mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<String>,
    strategy: String,
    seed: u64,
}

#[derive(Serialize)]
struct ManifestProtocol {
    rounds: usize,
    budget_per_round: usize,
    tau: f64,
    warmup_shots: usize,
    ood_warmup: bool,
    ood_warmup_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    static_ood_templates: Option<usize>,
    static_template_spread: f64,
    uniform_prompt_weights: bool,
    redistribute_budget: bool,
}

#[derive(Serialize)]
struct ManifestPrompt {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    epochs: usize,
    shot_cap: usize,
    batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    global_rows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    local_rows: Option<usize>,
}

#[derive(Serialize)]
struct ManifestProbe {
    lr: f64,
    epochs: usize,
    batch_size: usize,
}

#[derive(Serialize)]
struct ManifestTiming {
    seconds: f64,
}

/// Renders the fully resolved run parameters plus wall-clock timing.
pub fn manifest_toml(spec: &RunSpec, seconds: f64) -> Result<String> {
    use fedgate_core::gate::GateMode;

    let cfg = &spec.config;
    let (templates, rows) = match cfg.gate_mode {
        GateMode::StaticZeroShot { ood_templates } => (Some(ood_templates), None),
        GateMode::DynamicPromptGate { variant } => {
            (None, Some((variant.global_rows(), variant.local_rows())))
        }
        _ => (None, None),
    };
    let manifest = Manifest {
        run: ManifestRun {
            name: spec.name.clone(),
            mode: spec.mode.clone(),
            variant: spec.variant.clone(),
            strategy: spec.strategy.clone(),
            seed: spec.seed,
        },
        protocol: ManifestProtocol {
            rounds: cfg.rounds,
            budget_per_round: cfg.budget_per_round,
            tau: cfg.tau,
            warmup_shots: cfg.warmup_shots,
            ood_warmup: cfg.ood_warmup,
            ood_warmup_fraction: cfg.ood_warmup_fraction,
            static_ood_templates: templates,
            static_template_spread: cfg.static_template_spread,
            uniform_prompt_weights: cfg.uniform_prompt_weights,
            redistribute_budget: cfg.redistribute_budget,
        },
        prompt: ManifestPrompt {
            lr: cfg.prompt.lr,
            momentum: cfg.prompt.momentum,
            weight_decay: cfg.prompt.weight_decay,
            epochs: cfg.prompt.epochs,
            shot_cap: cfg.prompt.shot_cap,
            batch_size: cfg.prompt.batch_size,
            global_rows: rows.map(|(g, _)| g).filter(|&g| g > 0),
            local_rows: rows.map(|(_, l)| l).filter(|&l| l > 0),
        },
        probe: ManifestProbe {
            lr: cfg.probe.lr,
            epochs: cfg.probe.epochs,
            batch_size: cfg.probe.batch_size,
        },
        timing: ManifestTiming { seconds },
    };
    toml::to_string(&manifest).map_err(|e| anyhow!("serializing manifest: {e}"))
}

/// Final-round macro metrics of one run, the unit the summary table averages
/// over. `variant` is empty for modes without one.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFinal {
    pub mode: String,
    pub variant: String,
    pub strategy: String,
    pub seed: u64,
    pub purity: Option<f64>,
    pub bma: Option<f64>,
}

pub fn run_final(spec: &RunSpec, result: &ExperimentResult) -> RunFinal {
    let last = result.rounds.last();
    let purity = last.and_then(|r| mean_present(r.clients.iter().map(|c| c.pool_purity)));
    let bma = last.and_then(|r| mean_present(r.clients.iter().map(|c| c.probe_bma)));
    RunFinal {
        mode: spec.mode.clone(),
        variant: spec.variant.clone().unwrap_or_default(),
        strategy: spec.strategy.clone(),
        seed: spec.seed,
        purity,
        bma,
    }
}

/// One row per mode/variant, one column per strategy (both lexicographic),
/// each cell `purity (bma)` as percentages averaged over seeds.
pub fn summary_csv(finals: &[RunFinal]) -> String {
    let strategies: BTreeSet<&str> = finals.iter().map(|f| f.strategy.as_str()).collect();
    let rows: BTreeSet<(&str, &str)> =
        finals.iter().map(|f| (f.mode.as_str(), f.variant.as_str())).collect();

    let mut out = String::from("mode,variant");
    for s in &strategies {
        out.push(',');
        out.push_str(s);
    }
    out.push('\n');

    for (mode, variant) in rows {
        out.push_str(&format!("{mode},{variant}"));
        for s in &strategies {
            let group: Vec<&RunFinal> = finals
                .iter()
                .filter(|f| f.mode == mode && f.variant == variant && f.strategy == *s)
                .collect();
            out.push(',');
            if group.is_empty() {
                continue;
            }
            let purity = mean_present(group.iter().map(|f| f.purity));
            let bma = mean_present(group.iter().map(|f| f.bma));
            let pct = |v: Option<f64>| match v {
                Some(v) => format!("{:.1}", 100.0 * v),
                None => "-".to_string(),
            };
            out.push_str(&format!("{} ({})", pct(purity), pct(bma)));
        }
        out.push('\n');
    }
    out
}

/// Recovers a [`RunFinal`] from an on-disk `rounds.csv` (the `summarize`
/// verb rebuilds the summary table from these).
pub fn final_from_rounds_csv(text: &str) -> Result<RunFinal> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == ROUNDS_HEADER => {}
        Some(h) => bail!("unexpected rounds.csv header `{h}`"),
        None => bail!("rounds.csv is empty"),
    }
    let mut last_all: Option<RunFinal> = None;
    for (idx, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 16 {
            bail!("rounds.csv line {}: expected 16 fields, found {}", idx + 2, fields.len());
        }
        if fields[1] != "ALL" {
            continue;
        }
        let parse_opt = |raw: &str, what: &str| -> Result<Option<f64>> {
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse()
                .map(Some)
                .map_err(|_| anyhow!("rounds.csv line {}: bad {what} `{raw}`", idx + 2))
        };
        last_all = Some(RunFinal {
            mode: fields[2].to_string(),
            variant: fields[3].to_string(),
            strategy: fields[4].to_string(),
            seed: fields[5]
                .parse()
                .map_err(|_| anyhow!("rounds.csv line {}: bad seed `{}`", idx + 2, fields[5]))?,
            purity: parse_opt(fields[8], "purity")?,
            bma: parse_opt(fields[9], "bma")?,
        });
    }
    last_all.ok_or_else(|| anyhow!("rounds.csv has no ALL rows"))
}
