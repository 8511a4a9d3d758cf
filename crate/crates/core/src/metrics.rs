//! Protocol metrics: query quality, pool purity, and balanced accuracy.
//!
//! Ratios over empty denominators come back as `None` so report writers can
//! leave the cell blank instead of inventing a number. The one deliberate
//! exception is OOD recall over a test set with no OOD samples, which is
//! reported as zero.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::embedding::{GroundTruth, Sample, SampleId};
use crate::error::{Error, Result};
use crate::gate::GateLabeler;

fn id_fraction(truths: &[GroundTruth]) -> Option<f64> {
    if truths.is_empty() {
        return None;
    }
    let id = truths.iter().filter(|t| t.is_id()).count();
    Some(id as f64 / truths.len() as f64)
}

/// Fraction of this round's oracle answers that were in-distribution.
pub fn query_precision(truths: &[GroundTruth]) -> Option<f64> {
    id_fraction(truths)
}

/// Fraction of a sample set that is in-distribution.
pub fn pool_purity(truths: &[GroundTruth]) -> Option<f64> {
    id_fraction(truths)
}

/// Mean per-class recall over the classes that actually appear in the truth
/// labels. Classes never predicted still count against their recall.
pub fn balanced_multiclass_accuracy(
    pairs: &[(usize, usize)],
    num_classes: usize,
) -> Result<Option<f64>> {
    if num_classes == 0 {
        return Err(Error::InvalidConfig("balanced accuracy needs at least one class"));
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut count = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (truth, pred) in pairs {
        if *truth >= num_classes {
            return Err(Error::InvalidClassIndex { class: *truth, num_classes });
        }
        count[*truth] += 1;
        if truth == pred {
            correct[*truth] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..num_classes {
        if count[c] > 0 {
            sum += correct[c] as f64 / count[c] as f64;
            present += 1;
        }
    }
    Ok(Some(sum / present as f64))
}

/// Gate quality on held-out labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTestMetrics {
    /// Agreement between the gate's keep/reject call and the ground truth.
    pub binary_accuracy: f64,
    /// Fraction of true OOD samples the gate rejected; zero when the test
    /// set has no OOD samples.
    pub ood_recall: f64,
    /// Balanced accuracy of pseudo-classes on kept in-distribution samples;
    /// absent when the gate assigns no classes or keeps none.
    pub id_bma: Option<f64>,
}

pub fn gate_test_metrics(
    test: &[Sample],
    labeler: &GateLabeler,
    num_classes: usize,
) -> Result<GateTestMetrics> {
    if test.is_empty() {
        return Err(Error::NoLabels);
    }
    let mut agree = 0usize;
    let mut ood_total = 0usize;
    let mut ood_rejected = 0usize;
    let mut id_pairs = Vec::new();
    for sample in test {
        let decision = labeler.label(sample)?;
        match sample.truth {
            GroundTruth::Id { class } => {
                if decision.is_id {
                    agree += 1;
                    if let Some(pseudo) = decision.pseudo_class {
                        id_pairs.push((class, pseudo));
                    }
                }
            }
            GroundTruth::Ood { .. } => {
                ood_total += 1;
                if !decision.is_id {
                    agree += 1;
                    ood_rejected += 1;
                }
            }
        }
    }
    Ok(GateTestMetrics {
        binary_accuracy: agree as f64 / test.len() as f64,
        ood_recall: if ood_total == 0 { 0.0 } else { ood_rejected as f64 / ood_total as f64 },
        id_bma: balanced_multiclass_accuracy(&id_pairs, num_classes)?,
    })
}

/// Running record of every oracle query in an experiment; refuses repeats so
/// label-budget audits can trust the counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryHistory {
    queried: BTreeSet<SampleId>,
    id_queried: usize,
}

impl QueryHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, id: SampleId, truth: &GroundTruth) -> Result<()> {
        if !self.queried.insert(id) {
            return Err(Error::InvalidConfig("sample sent to the oracle twice"));
        }
        if truth.is_id() {
            self.id_queried += 1;
        }
        Ok(())
    }

    pub fn total_queried(&self) -> usize {
        self.queried.len()
    }

    pub fn id_queried(&self) -> usize {
        self.id_queried
    }

    /// Share of the initially unlabeled in-distribution samples annotated so
    /// far. The denominator is fixed at experiment start.
    pub fn recall(&self, initial_unlabeled_id: usize) -> Option<f64> {
        if initial_unlabeled_id == 0 {
            return None;
        }
        Some(self.id_queried as f64 / initial_unlabeled_id as f64)
    }
}
