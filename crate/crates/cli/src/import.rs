//! CSV import for externally produced embedding datasets.
//!
//! A dataset directory holds two files:
//!
//! * `anchors.csv` — header `slot,v0,...,v{D-1}`, one row per template anchor
//!   with slots `0..=num_classes`; the last slot is the coarse OOD anchor.
//! * `samples.csv` — header `sample_id,client_id,split,label_kind,label_index,
//!   v0,...,v{D-1}` with `split` in `seed|unlabeled|test` and `label_kind` in
//!   `id|ood`.
//!
//! Embeddings are L2-normalized on import, so exporters do not have to agree
//! with the simulator about scaling. Every parse error carries the file name
//! and 1-based line number.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use fedgate_core::embedding::{
    l2_normalize, ClientDataset, Embedding, FederatedDataset, GroundTruth, Sample, Split,
};

pub fn load_dataset(dir: &Path) -> Result<FederatedDataset> {
    let anchors_path = dir.join("anchors.csv");
    let samples_path = dir.join("samples.csv");
    let anchors_text = std::fs::read_to_string(&anchors_path)
        .with_context(|| format!("reading {}", anchors_path.display()))?;
    let samples_text = std::fs::read_to_string(&samples_path)
        .with_context(|| format!("reading {}", samples_path.display()))?;

    let anchors = parse_anchors(&anchors_text).context("in anchors.csv")?;
    if anchors.len() < 2 {
        bail!("anchors.csv must define at least two slots (one class plus the OOD anchor)");
    }
    let num_classes = anchors.len() - 1;
    let dim = anchors[0].dim();

    let rows = parse_samples(&samples_text, dim).context("in samples.csv")?;

    let num_clients = rows
        .iter()
        .map(|r| r.client + 1)
        .max()
        .ok_or_else(|| anyhow!("samples.csv contains no data rows"))?;
    let num_ood_modes = rows
        .iter()
        .filter_map(|r| match r.sample.truth {
            GroundTruth::Ood { mode } => Some(mode + 1),
            GroundTruth::Id { .. } => None,
        })
        .max()
        .unwrap_or(1);

    let mut clients: Vec<ClientDataset> = (0..num_clients)
        .map(|k| ClientDataset {
            client: k,
            seed_labeled: Vec::new(),
            unlabeled: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    for row in rows {
        let bucket = match row.split {
            Split::Seed => &mut clients[row.client].seed_labeled,
            Split::Unlabeled => &mut clients[row.client].unlabeled,
            Split::Test => &mut clients[row.client].test,
        };
        bucket.push(row.sample);
    }

    let dataset = FederatedDataset { num_classes, num_ood_modes, dim, clients, anchors };
    dataset.validate().map_err(|e| anyhow!("imported dataset is inconsistent: {e}"))?;
    Ok(dataset)
}

struct SampleRow {
    client: usize,
    split: Split,
    sample: Sample,
}

fn parse_anchors(text: &str) -> Result<Vec<Embedding>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| anyhow!("file is empty"))?;
    let width = check_header(header, &["slot"])?;
    if width == 0 {
        bail!("line 1: header has no vector columns");
    }

    let mut anchors = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + width {
            bail!("line {lineno}: expected {} fields, found {}", 1 + width, fields.len());
        }
        let slot: usize = parse_field(fields[0], "slot", lineno)?;
        if slot != anchors.len() {
            bail!("line {lineno}: slot {slot} out of order; expected {}", anchors.len());
        }
        anchors.push(parse_vector(&fields[1..], lineno)?);
    }
    Ok(anchors)
}

fn parse_samples(text: &str, dim: usize) -> Result<Vec<SampleRow>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| anyhow!("file is empty"))?;
    let width = check_header(
        header,
        &["sample_id", "client_id", "split", "label_kind", "label_index"],
    )?;
    if width != dim {
        bail!("line 1: {width} vector columns but anchors have dimension {dim}");
    }

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 + width {
            bail!("line {lineno}: expected {} fields, found {}", 5 + width, fields.len());
        }
        let id: u64 = parse_field(fields[0], "sample_id", lineno)?;
        let client: usize = parse_field(fields[1], "client_id", lineno)?;
        let split = match fields[2] {
            "seed" => Split::Seed,
            "unlabeled" => Split::Unlabeled,
            "test" => Split::Test,
            other => bail!("line {lineno}: unknown split `{other}`; expected seed, unlabeled or test"),
        };
        let label_index: usize = parse_field(fields[4], "label_index", lineno)?;
        let truth = match fields[3] {
            "id" => GroundTruth::Id { class: label_index },
            "ood" => GroundTruth::Ood { mode: label_index },
            other => bail!("line {lineno}: unknown label_kind `{other}`; expected id or ood"),
        };
        let embedding = parse_vector(&fields[5..], lineno)?;
        rows.push(SampleRow {
            client,
            split,
            sample: Sample { id, client, embedding, truth },
        });
    }
    Ok(rows)
}

/// Verifies the fixed header columns and returns how many `v{i}` columns
/// follow them.
fn check_header(header: &str, fixed: &[&str]) -> Result<usize> {
    let fields: Vec<&str> = header.trim_end().split(',').collect();
    if fields.len() < fixed.len() {
        bail!("line 1: header has {} fields but needs at least {}", fields.len(), fixed.len());
    }
    for (i, want) in fixed.iter().enumerate() {
        if fields[i] != *want {
            bail!("line 1: header column {} is `{}`; expected `{want}`", i + 1, fields[i]);
        }
    }
    for (i, got) in fields[fixed.len()..].iter().enumerate() {
        let want = format!("v{i}");
        if *got != want {
            bail!("line 1: header column {} is `{got}`; expected `{want}`", fixed.len() + i + 1);
        }
    }
    Ok(fields.len() - fixed.len())
}

fn parse_field<T: std::str::FromStr>(raw: &str, what: &str, lineno: usize) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| anyhow!("line {lineno}: bad {what} `{raw}`"))
}

fn parse_vector(fields: &[&str], lineno: usize) -> Result<Embedding> {
    let mut values = Vec::with_capacity(fields.len());
    for raw in fields {
        let v: f64 = raw
            .trim()
            .parse()
            .map_err(|_| anyhow!("line {lineno}: bad vector component `{raw}`"))?;
        values.push(v);
    }
    let raw = Embedding::new(values)
        .map_err(|e| anyhow!("line {lineno}: invalid embedding: {e}"))?;
    l2_normalize(&raw).map_err(|e| anyhow!("line {lineno}: invalid embedding: {e}"))
}
