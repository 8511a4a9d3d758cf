//! Pool gating: deciding which unlabeled samples look in-distribution.
//!
//! A gate labels every pool sample either in-distribution (eligible for
//! acquisition) or out-of-distribution (parked in the exploration buffer
//! under the coarse rejection slot). Gating is a pure per-sample function,
//! so partitioning commutes with removing already-queried samples.

use alloc::vec::Vec;

use crate::embedding::{l2_normalize, Embedding, GroundTruth, Sample, SampleId};
use crate::error::{Error, Result};
use crate::math;
use crate::prompt::{class_probabilities, PromptVariant};
use crate::rng::{self, Stage};

/// How a client screens its pool before acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// No screening: the whole pool is eligible.
    Coldstart,
    /// Ground-truth screening; an upper bound no real gate can beat.
    OracleUpperBound,
    /// Frozen anchor texts plus a fixed set of rejection templates.
    StaticZeroShot { ood_templates: usize },
    /// Learned prompts re-encoded every round.
    DynamicPromptGate { variant: PromptVariant },
}

impl GateMode {
    pub fn prompt_variant(self) -> Option<PromptVariant> {
        match self {
            GateMode::DynamicPromptGate { variant } => Some(variant),
            _ => None,
        }
    }
}

/// Per-sample gate output.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub is_id: bool,
    /// Predicted class slot when gated in-distribution (absent for gates
    /// that do not predict classes).
    pub pseudo_class: Option<usize>,
    /// Winning softmax probability for similarity-based gates.
    pub confidence: Option<f64>,
}

/// The pseudo-label bookkeeping row kept for every pool sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoRecord {
    pub sample: SampleId,
    /// Pseudo class slot; rejected samples carry the coarse rejection slot
    /// (index `num_classes`).
    pub slot: usize,
    pub confidence: Option<f64>,
}

/// Disjoint split of a pool into acquisition-eligible and exploration ids,
/// both ascending, plus one record per pool sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolPartition {
    pub gated: Vec<SampleId>,
    pub exploration: Vec<SampleId>,
    pub records: Vec<PseudoRecord>,
}

pub enum GateLabeler<'a> {
    AllId,
    Oracle,
    Texts { texts: &'a [Embedding], num_id_slots: usize, tau: f64 },
}

impl GateLabeler<'_> {
    pub fn label(&self, sample: &Sample) -> Result<GateDecision> {
        match self {
            GateLabeler::AllId => Ok(GateDecision { is_id: true, pseudo_class: None, confidence: None }),
            GateLabeler::Oracle => Ok(match sample.truth {
                GroundTruth::Id { class } => {
                    GateDecision { is_id: true, pseudo_class: Some(class), confidence: None }
                }
                GroundTruth::Ood { .. } => {
                    GateDecision { is_id: false, pseudo_class: None, confidence: None }
                }
            }),
            GateLabeler::Texts { texts, num_id_slots, tau } => {
                if *num_id_slots == 0 || *num_id_slots >= texts.len() {
                    return Err(Error::InvalidConfig("gate needs class slots and a rejection slot"));
                }
                let probs = class_probabilities(&sample.embedding, texts, *tau)?;
                let slot = math::argmax(&probs);
                let is_id = slot < *num_id_slots;
                Ok(GateDecision {
                    is_id,
                    pseudo_class: is_id.then_some(slot),
                    confidence: Some(probs[slot]),
                })
            }
        }
    }
}

/// Gate every pool sample and split ids by the decision. Exploration rows
/// are recorded under the coarse rejection slot `num_classes`.
pub fn partition_pool(
    pool: &[Sample],
    labeler: &GateLabeler,
    num_classes: usize,
) -> Result<PoolPartition> {
    if let GateLabeler::Texts { num_id_slots, .. } = labeler {
        if *num_id_slots != num_classes {
            return Err(Error::InvalidConfig("gate class slots disagree with dataset classes"));
        }
    }
    let mut order: Vec<&Sample> = pool.iter().collect();
    order.sort_by_key(|s| s.id);
    let mut out = PoolPartition {
        gated: Vec::new(),
        exploration: Vec::new(),
        records: Vec::with_capacity(pool.len()),
    };
    for sample in order {
        let decision = labeler.label(sample)?;
        if decision.is_id {
            out.gated.push(sample.id);
            out.records.push(PseudoRecord {
                sample: sample.id,
                slot: decision.pseudo_class.unwrap_or(0),
                confidence: decision.confidence,
            });
        } else {
            out.exploration.push(sample.id);
            out.records.push(PseudoRecord {
                sample: sample.id,
                slot: num_classes,
                confidence: decision.confidence,
            });
        }
    }
    Ok(out)
}

/// Text set for the static zero-shot gate: the frozen class anchors followed
/// by `ood_templates` rejection templates. Template 0 is the base rejection
/// anchor; template `j > 0` is the anchor nudged along a seeded random
/// direction and renormalized. Earlier templates never change when more are
/// requested, so growing the template set only tightens the gate.
pub fn static_texts(
    anchors: &[Embedding],
    ood_templates: usize,
    spread: f64,
    master_seed: u64,
) -> Result<Vec<Embedding>> {
    if anchors.len() < 2 {
        return Err(Error::InvalidConfig("static gate needs class anchors plus a rejection anchor"));
    }
    if ood_templates == 0 {
        return Err(Error::InvalidConfig("static gate needs at least one rejection template"));
    }
    let dim = anchors[0].dim();
    let base = &anchors[anchors.len() - 1];
    let mut texts: Vec<Embedding> = anchors[..anchors.len() - 1].to_vec();
    texts.push(base.clone());
    for j in 1..ood_templates {
        let mut rng = rng::stream(master_seed, rng::SERVER, j as u64, Stage::StaticTemplates);
        let dir = math::unit_direction(&mut rng, dim);
        let nudged: Vec<f64> = base
            .as_slice()
            .iter()
            .zip(&dir)
            .map(|(b, d)| b + spread * d)
            .collect();
        texts.push(l2_normalize(&Embedding::new(nudged)?)?);
    }
    Ok(texts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(id: SampleId, v: Vec<f64>, truth: GroundTruth) -> Sample {
        Sample { id, client: 0, embedding: Embedding::new(v).unwrap(), truth }
    }

    fn axis(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn mixed_pool() -> Vec<Sample> {
        vec![
            sample(3, axis(3, 0), GroundTruth::Id { class: 0 }),
            sample(1, axis(3, 1), GroundTruth::Id { class: 1 }),
            sample(2, axis(3, 2), GroundTruth::Ood { mode: 0 }),
        ]
    }

    #[test]
    fn all_id_gates_nothing_out() {
        let part = partition_pool(&mixed_pool(), &GateLabeler::AllId, 2).unwrap();
        assert_eq!(part.gated, vec![1, 2, 3]);
        assert!(part.exploration.is_empty());
        assert_eq!(part.records.len(), 3);
    }

    #[test]
    fn oracle_follows_ground_truth() {
        let part = partition_pool(&mixed_pool(), &GateLabeler::Oracle, 2).unwrap();
        assert_eq!(part.gated, vec![1, 3]);
        assert_eq!(part.exploration, vec![2]);
        let rejected = part.records.iter().find(|r| r.sample == 2).unwrap();
        assert_eq!(rejected.slot, 2);
        let kept = part.records.iter().find(|r| r.sample == 1).unwrap();
        assert_eq!(kept.slot, 1);
    }

    #[test]
    fn text_gate_ties_break_to_the_lowest_slot() {
        let t = Embedding::new(axis(3, 0)).unwrap();
        let texts = vec![t.clone(), t.clone(), Embedding::new(axis(3, 1)).unwrap()];
        let labeler = GateLabeler::Texts { texts: &texts, num_id_slots: 2, tau: 0.07 };
        let decision = labeler
            .label(&sample(0, axis(3, 0), GroundTruth::Id { class: 0 }))
            .unwrap();
        assert!(decision.is_id);
        assert_eq!(decision.pseudo_class, Some(0));
        assert!(decision.confidence.unwrap() > 0.0);
    }

    #[test]
    fn text_gate_rejects_rejection_slot_winners() {
        let texts = vec![
            Embedding::new(axis(3, 0)).unwrap(),
            Embedding::new(axis(3, 1)).unwrap(),
            Embedding::new(axis(3, 2)).unwrap(),
        ];
        let labeler = GateLabeler::Texts { texts: &texts, num_id_slots: 2, tau: 0.07 };
        let decision = labeler
            .label(&sample(0, axis(3, 2), GroundTruth::Ood { mode: 0 }))
            .unwrap();
        assert!(!decision.is_id);
        assert_eq!(decision.pseudo_class, None);
    }

    #[test]
    fn static_texts_keep_a_prefix_as_templates_grow() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let anchors: Vec<Embedding> = (0..4)
            .map(|_| Embedding::new(math::unit_direction(&mut rng, 8)).unwrap())
            .collect();
        let one = static_texts(&anchors, 1, 0.5, 123).unwrap();
        let three = static_texts(&anchors, 3, 0.5, 123).unwrap();
        assert_eq!(one.len(), 4);
        assert_eq!(three.len(), 6);
        assert_eq!(&three[..4], &one[..]);
        assert_eq!(&one[3], &anchors[3]);
        for t in &three {
            assert!((t.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn more_templates_only_tighten_the_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let anchors: Vec<Embedding> = (0..5)
            .map(|_| Embedding::new(math::unit_direction(&mut rng, 16)).unwrap())
            .collect();
        let pool: Vec<Sample> = (0..200)
            .map(|i| {
                Sample {
                    id: i,
                    client: 0,
                    embedding: Embedding::new(math::unit_direction(&mut rng, 16)).unwrap(),
                    truth: GroundTruth::Id { class: 0 },
                }
            })
            .collect();
        let mut previous: Option<Vec<SampleId>> = None;
        for templates in [1usize, 2, 4, 8] {
            let texts = static_texts(&anchors, templates, 1.0, 55).unwrap();
            let labeler = GateLabeler::Texts { texts: &texts, num_id_slots: 4, tau: 0.07 };
            let part = partition_pool(&pool, &labeler, 4).unwrap();
            if let Some(prev) = &previous {
                assert!(part.gated.iter().all(|id| prev.contains(id)));
                assert!(part.gated.len() <= prev.len());
            }
            previous = Some(part.gated);
        }
    }

    #[test]
    fn partition_is_stable_under_removal() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let anchors: Vec<Embedding> = (0..3)
            .map(|_| Embedding::new(math::unit_direction(&mut rng, 8)).unwrap())
            .collect();
        let pool: Vec<Sample> = (0..60)
            .map(|i| Sample {
                id: i,
                client: 0,
                embedding: Embedding::new(math::unit_direction(&mut rng, 8)).unwrap(),
                truth: GroundTruth::Id { class: 0 },
            })
            .collect();
        let texts = static_texts(&anchors, 2, 0.8, 7).unwrap();
        let labeler = GateLabeler::Texts { texts: &texts, num_id_slots: 2, tau: 0.07 };
        let full = partition_pool(&pool, &labeler, 2).unwrap();

        let removed: Vec<SampleId> = full.gated.iter().step_by(3).copied().collect();
        let rest: Vec<Sample> =
            pool.iter().filter(|s| !removed.contains(&s.id)).cloned().collect();
        let partial = partition_pool(&rest, &labeler, 2).unwrap();

        let expect_gated: Vec<SampleId> =
            full.gated.iter().filter(|id| !removed.contains(id)).copied().collect();
        assert_eq!(partial.gated, expect_gated);
        assert_eq!(partial.exploration, full.exploration);
    }

    #[test]
    fn text_slot_count_must_match_dataset() {
        let texts = vec![
            Embedding::new(axis(3, 0)).unwrap(),
            Embedding::new(axis(3, 1)).unwrap(),
        ];
        let labeler = GateLabeler::Texts { texts: &texts, num_id_slots: 1, tau: 0.07 };
        assert!(partition_pool(&mixed_pool(), &labeler, 2).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_exact_and_sorted(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 1 + (seed as usize % 40);
            let pool: Vec<Sample> = (0..n)
                .map(|i| Sample {
                    id: (i as u64) * 3 + (seed % 2),
                    client: 0,
                    embedding: Embedding::new(math::unit_direction(&mut rng, 6)).unwrap(),
                    truth: if rng.gen_bool(0.5) {
                        GroundTruth::Id { class: 0 }
                    } else {
                        GroundTruth::Ood { mode: 0 }
                    },
                })
                .collect();
            let anchors: Vec<Embedding> = (0..3)
                .map(|_| Embedding::new(math::unit_direction(&mut rng, 6)).unwrap())
                .collect();
            let texts = static_texts(&anchors, 2, 0.5, seed).unwrap();
            let labeler = GateLabeler::Texts { texts: &texts, num_id_slots: 2, tau: 0.07 };
            let part = partition_pool(&pool, &labeler, 2).unwrap();

            let mut all: Vec<SampleId> = part.gated.iter().chain(&part.exploration).copied().collect();
            all.sort_unstable();
            let mut expect: Vec<SampleId> = pool.iter().map(|s| s.id).collect();
            expect.sort_unstable();
            prop_assert_eq!(all, expect);
            prop_assert!(part.gated.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(part.exploration.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(part.records.len(), pool.len());
            for r in &part.records {
                let explored = part.exploration.contains(&r.sample);
                prop_assert_eq!(explored, r.slot == 2);
                if let Some(c) = r.confidence {
                    prop_assert!(c > 0.0 && c <= 1.0);
                }
            }
        }
    }
}
