//! Embedding-space types and the synthetic federated benchmark generator.
//!
//! All embeddings are l2-normalized at creation time, so cosine similarity
//! reduces to a dot product everywhere downstream.

use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{self, unit_direction};
use crate::rng::{self, Stage};

pub type SampleId = u64;

/// Fixed-length real vector with finite components.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("embedding dimension must be at least 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteComponent);
        }
        Ok(Embedding { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        math::dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        math::norm(&self.values)
    }
}

/// Scale to unit l2 norm. Errors with [`Error::ZeroNorm`] below 1e-12.
pub fn l2_normalize(v: &Embedding) -> Result<Embedding> {
    let n = v.norm();
    if n < 1e-12 {
        return Err(Error::ZeroNorm);
    }
    Embedding::new(v.values.iter().map(|x| x / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Seed,
    Unlabeled,
    Test,
}

/// Oracle ground truth: an ID class or a fine-grained OOD mode. The mode
/// index is simulation-only; the oracle reveals at most a coarse OOD label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruth {
    Id { class: usize },
    Ood { mode: usize },
}

impl GroundTruth {
    pub fn is_id(self) -> bool {
        matches!(self, GroundTruth::Id { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub client: usize,
    pub embedding: Embedding,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client: usize,
    pub seed_labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ClientDataset {
    /// OOD fraction of the current unlabeled pool, recomputed on demand
    /// (never cached, so it stays honest as the pool shrinks).
    pub fn ood_ratio_actual(&self) -> f64 {
        if self.unlabeled.is_empty() {
            return 0.0;
        }
        let ood = self.unlabeled.iter().filter(|s| !s.truth.is_id()).count();
        ood as f64 / self.unlabeled.len() as f64
    }

    pub fn unlabeled_id_count(&self) -> usize {
        self.unlabeled.iter().filter(|s| s.truth.is_id()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub num_classes: usize,
    pub num_ood_modes: usize,
    pub dim: usize,
    pub clients: Vec<ClientDataset>,
    /// `num_classes + 1` unit-norm template anchors; the last slot is the
    /// coarse OOD anchor.
    pub anchors: Vec<Embedding>,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("need at least one ID class"));
        }
        if self.anchors.len() != self.num_classes + 1 {
            return Err(Error::InvalidConfig("anchor count must be num_classes + 1"));
        }
        for a in &self.anchors {
            if a.dim() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, got: a.dim() });
            }
            if (a.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig("anchors must be unit norm"));
            }
        }
        let mut seen = alloc::collections::BTreeSet::new();
        for (k, c) in self.clients.iter().enumerate() {
            if c.client != k {
                return Err(Error::InvalidConfig("client datasets must be indexed densely in order"));
            }
            let splits = [(&c.seed_labeled, true), (&c.unlabeled, false), (&c.test, false)];
            for (samples, id_only) in splits {
                for s in samples {
                    if s.embedding.dim() != self.dim {
                        return Err(Error::DimensionMismatch {
                            expected: self.dim,
                            got: s.embedding.dim(),
                        });
                    }
                    if s.client != k {
                        return Err(Error::InvalidConfig("sample client field disagrees with its dataset"));
                    }
                    if !seen.insert(s.id) {
                        return Err(Error::InvalidConfig("duplicate sample id"));
                    }
                    match s.truth {
                        GroundTruth::Id { class } => {
                            if class >= self.num_classes {
                                return Err(Error::InvalidClassIndex {
                                    class,
                                    num_classes: self.num_classes,
                                });
                            }
                        }
                        GroundTruth::Ood { mode } => {
                            if id_only {
                                return Err(Error::InvalidConfig("seed split must contain only ID samples"));
                            }
                            if mode >= self.num_ood_modes {
                                return Err(Error::InvalidConfig("OOD mode index out of range"));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Generator parameters for the synthetic federated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_clients: usize,
    pub num_classes: usize,
    pub num_ood_modes: usize,
    pub dim: usize,
    /// Minimum pairwise Euclidean distance between unit-norm class centroids.
    pub class_separation: f64,
    /// Per-coordinate std of ID class noise (pre-normalization).
    pub within_class_std: f64,
    /// Per-coordinate std of OOD mode noise (pre-normalization).
    pub ood_mode_std: f64,
    /// Cone width of OOD mode directions around a common axis; large values
    /// scatter the modes to near-independent directions.
    pub ood_direction_spread: f64,
    /// Magnitude of the per-client additive domain shift on ID samples.
    pub client_shift: f64,
    pub seed_per_client: usize,
    pub unlabeled_per_client: usize,
    pub test_per_client: usize,
    /// Per-client OOD fraction of the unlabeled and test splits.
    pub ood_ratio: Vec<f64>,
    /// 0 puts text anchors exactly on normalized centroids; 1 makes them
    /// carry no information about the true geometry.
    pub template_misalignment: f64,
    /// Give client `k` only OOD mode `k % num_ood_modes` instead of a
    /// client-specific mixture over all modes.
    pub exclusive_ood_modes: bool,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidConfig("need at least one client"));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("need at least one ID class"));
        }
        if self.num_ood_modes == 0 {
            return Err(Error::InvalidConfig("need at least one OOD mode"));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be at least 1"));
        }
        if self.ood_ratio.len() != self.num_clients {
            return Err(Error::InvalidConfig("ood_ratio needs one entry per client"));
        }
        if self.ood_ratio.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidConfig("ood_ratio entries must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.template_misalignment) {
            return Err(Error::InvalidConfig("template_misalignment must lie in [0, 1]"));
        }
        if self.class_separation <= 0.0 || self.class_separation > 2.0 {
            return Err(Error::InvalidConfig("class_separation must lie in (0, 2]"));
        }
        if self.within_class_std < 0.0 || self.ood_mode_std < 0.0 {
            return Err(Error::InvalidConfig("noise stds must be non-negative"));
        }
        if self.client_shift < 0.0 || self.ood_direction_spread < 0.0 {
            return Err(Error::InvalidConfig("shift and spread must be non-negative"));
        }
        Ok(())
    }

    /// Benchmark with deliberately misaligned text anchors: the static
    /// zero-shot gate partially leaks OOD while a trained gate can separate
    /// the pools nearly perfectly.
    pub fn misaligned_benchmark() -> Self {
        SyntheticSpec {
            num_clients: 4,
            num_classes: 8,
            num_ood_modes: 6,
            dim: 64,
            class_separation: 1.0,
            within_class_std: 0.08,
            ood_mode_std: 0.10,
            ood_direction_spread: 0.5,
            client_shift: 0.12,
            seed_per_client: 160,
            unlabeled_per_client: 2000,
            test_per_client: 600,
            ood_ratio: vec![0.322, 0.354, 0.357, 0.325],
            template_misalignment: 0.82,
            exclusive_ood_modes: false,
        }
    }

    /// Variant of the benchmark where every client sees exactly one private
    /// OOD mode and the modes point in near-independent directions.
    pub fn exclusive_ood_benchmark() -> Self {
        SyntheticSpec {
            num_ood_modes: 4,
            ood_direction_spread: 4.0,
            exclusive_ood_modes: true,
            ..Self::misaligned_benchmark()
        }
    }
}

struct Geometry {
    centroids: Vec<Vec<f64>>,
    mode_centroids: Vec<Vec<f64>>,
    anchors: Vec<Embedding>,
}

fn build_geometry<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Geometry> {
    let d = spec.dim;

    // Unit-norm class centroids with guaranteed pairwise separation.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let mut placed = false;
        for _ in 0..10_000 {
            let cand = unit_direction(rng, d);
            let ok = centroids
                .iter()
                .all(|c| math::squared_distance(c, &cand) >= spec.class_separation * spec.class_separation);
            if ok {
                centroids.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidConfig(
                "class_separation is unreachable for this class count and dimension",
            ));
        }
    }

    let mut center = vec![0.0; d];
    for c in &centroids {
        for (x, v) in center.iter_mut().zip(c) {
            *x += v / spec.num_classes as f64;
        }
    }
    let hull_radius = centroids
        .iter()
        .map(|c| libm::sqrt(math::squared_distance(c, &center)))
        .fold(0.0f64, f64::max);

    // OOD mode centroids: a cone of directions around a common axis, placed
    // strictly outside the ID centroid hull.
    let base = unit_direction(rng, d);
    let radius = hull_radius + spec.class_separation;
    let mut mode_centroids = Vec::with_capacity(spec.num_ood_modes);
    for _ in 0..spec.num_ood_modes {
        let u = unit_direction(rng, d);
        let mut dir: Vec<f64> = base
            .iter()
            .zip(&u)
            .map(|(b, x)| b + spec.ood_direction_spread * x)
            .collect();
        let n = math::norm(&dir);
        for x in &mut dir {
            *x /= n;
        }
        let m: Vec<f64> = center.iter().zip(&dir).map(|(c, x)| c + radius * x).collect();
        mode_centroids.push(m);
    }

    // Text anchors: convex blend between the true (normalized) direction and
    // a random one, controlled by template_misalignment.
    let mis = spec.template_misalignment;
    let blend = |truth: &[f64], rng: &mut R| -> Result<Embedding> {
        let u = unit_direction(rng, d);
        if mis == 0.0 {
            return Embedding::new(truth.to_vec());
        }
        let mixed: Vec<f64> = truth
            .iter()
            .zip(&u)
            .map(|(t, x)| (1.0 - mis) * t + mis * x)
            .collect();
        l2_normalize(&Embedding::new(mixed)?)
    };

    let mut anchors = Vec::with_capacity(spec.num_classes + 1);
    for c in &centroids {
        anchors.push(blend(c, rng)?);
    }
    let mut ood_mean = vec![0.0; d];
    for m in &mode_centroids {
        for (x, v) in ood_mean.iter_mut().zip(m) {
            *x += v / spec.num_ood_modes as f64;
        }
    }
    let ood_dir = l2_normalize(&Embedding::new(ood_mean)?)?;
    anchors.push(blend(ood_dir.as_slice(), rng)?);

    Ok(Geometry { centroids, mode_centroids, anchors })
}

fn draw_point<R: Rng>(mean: &[f64], offset: Option<&[f64]>, std: f64, rng: &mut R) -> Result<Embedding> {
    let mut v: Vec<f64> = mean.to_vec();
    if let Some(o) = offset {
        for (x, s) in v.iter_mut().zip(o) {
            *x += s;
        }
    }
    for x in v.iter_mut() {
        *x += std * math::standard_normal(rng);
    }
    l2_normalize(&Embedding::new(v)?)
}

fn categorical<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let r = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if r < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Deterministically generate a federated dataset from `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<FederatedDataset> {
    spec.validate()?;
    let mut rng = rng::stream(seed, rng::SERVER, 0, Stage::Dataset);
    let geo = build_geometry(spec, &mut rng)?;

    let mut next_id: SampleId = 0;
    let mut clients = Vec::with_capacity(spec.num_clients);
    for k in 0..spec.num_clients {
        let shift: Vec<f64> = unit_direction(&mut rng, spec.dim)
            .into_iter()
            .map(|x| x * spec.client_shift)
            .collect();

        let mode_weights: Vec<f64> = if spec.exclusive_ood_modes {
            (0..spec.num_ood_modes)
                .map(|m| if m == k % spec.num_ood_modes { 1.0 } else { 0.0 })
                .collect()
        } else {
            (0..spec.num_ood_modes)
                .map(|_| -libm::log(rng.gen::<f64>().max(1e-300)))
                .collect()
        };

        let mut draw_split = |n: usize, ood_ratio: f64, id_only: bool, rng: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<Sample>> {
            let n_ood = if id_only { 0 } else { (ood_ratio * n as f64 + 0.5) as usize };
            let n_id = n - n_ood.min(n);
            let mut truths: Vec<GroundTruth> = (0..n_id)
                .map(|i| GroundTruth::Id { class: i % spec.num_classes })
                .collect();
            for _ in 0..n.min(n_ood) {
                truths.push(GroundTruth::Ood { mode: categorical(&mode_weights, rng) });
            }
            truths.shuffle(rng);
            let mut out = Vec::with_capacity(n);
            for truth in truths {
                let embedding = match truth {
                    GroundTruth::Id { class } => {
                        draw_point(&geo.centroids[class], Some(&shift), spec.within_class_std, rng)?
                    }
                    GroundTruth::Ood { mode } => {
                        draw_point(&geo.mode_centroids[mode], None, spec.ood_mode_std, rng)?
                    }
                };
                out.push(Sample { id: next_id, client: k, embedding, truth });
                next_id += 1;
            }
            Ok(out)
        };

        let seed_labeled = draw_split(spec.seed_per_client, 0.0, true, &mut rng)?;
        let unlabeled = draw_split(spec.unlabeled_per_client, spec.ood_ratio[k], false, &mut rng)?;
        let test = draw_split(spec.test_per_client, spec.ood_ratio[k], false, &mut rng)?;
        clients.push(ClientDataset { client: k, seed_labeled, unlabeled, test });
    }

    let ds = FederatedDataset {
        num_classes: spec.num_classes,
        num_ood_modes: spec.num_ood_modes,
        dim: spec.dim,
        clients,
        anchors: geo.anchors,
    };
    ds.validate()?;
    Ok(ds)
}
