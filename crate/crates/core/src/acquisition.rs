//! Acquisition strategies: which gated samples to send to the oracle.
//!
//! All selectors return ascending sample ids, never exceed the budget, and
//! are deterministic given the caller's stream. When the budget covers the
//! whole candidate set every selector returns it outright.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{Sample, SampleId};
use crate::error::Result;
use crate::math;
use crate::probe::LinearProbe;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Random,
    Entropy,
    KMeansDiverse,
}

pub fn select_queries(
    strategy: StrategyKind,
    candidates: &[&Sample],
    budget: usize,
    probe: &LinearProbe,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampleId>> {
    if budget == 0 || candidates.is_empty() {
        return Ok(Vec::new());
    }
    if budget >= candidates.len() {
        let mut ids: Vec<SampleId> = candidates.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        return Ok(ids);
    }
    match strategy {
        StrategyKind::Random => Ok(select_random(candidates, budget, rng)),
        StrategyKind::Entropy => select_entropy(candidates, budget, probe),
        StrategyKind::KMeansDiverse => Ok(select_kmeans(candidates, budget, rng)),
    }
}

fn select_random(candidates: &[&Sample], budget: usize, rng: &mut ChaCha8Rng) -> Vec<SampleId> {
    let mut ids: Vec<SampleId> = candidates.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    let (picked, _) = ids.partial_shuffle(rng, budget);
    let mut picked = picked.to_vec();
    picked.sort_unstable();
    picked
}

fn entropy(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for p in probs {
        if *p > 0.0 {
            h -= p * libm::log(*p);
        }
    }
    h
}

fn select_entropy(
    candidates: &[&Sample],
    budget: usize,
    probe: &LinearProbe,
) -> Result<Vec<SampleId>> {
    let mut scored: Vec<(f64, SampleId)> = candidates
        .iter()
        .map(|s| Ok((entropy(&probe.predict_probs(&s.embedding)?), s.id)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<SampleId> = scored[..budget].iter().map(|(_, id)| *id).collect();
    picked.sort_unstable();
    Ok(picked)
}

fn select_kmeans(candidates: &[&Sample], budget: usize, rng: &mut ChaCha8Rng) -> Vec<SampleId> {
    let mut order: Vec<&Sample> = candidates.to_vec();
    order.sort_by_key(|s| s.id);
    let n = order.len();
    let k = budget;
    let points: Vec<&[f64]> = order.iter().map(|s| s.embedding.as_slice()).collect();

    // Distance-squared-weighted seeding; stops early if every remaining
    // point coincides with a chosen centroid.
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.gen_range(0..n)].to_vec()];
    let mut best_d2: Vec<f64> = points
        .iter()
        .map(|p| math::squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = best_d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut chosen = n - 1;
        for (i, d2) in best_d2.iter().enumerate() {
            target -= d2;
            if target <= 0.0 {
                chosen = i;
                break;
            }
        }
        centroids.push(points[chosen].to_vec());
        for (d2, p) in best_d2.iter_mut().zip(&points) {
            *d2 = d2.min(math::squared_distance(p, centroids.last().unwrap()));
        }
    }

    let k = centroids.len();
    let dim = points[0].len();
    let mut assign = vec![0usize; n];
    for _ in 0..25 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = math::squared_distance(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(*p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an empty cluster at the point farthest from its
                // current centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        math::squared_distance(points[a], &centroids[assign[a]])
                            .total_cmp(&math::squared_distance(points[b], &centroids[assign[b]]))
                    })
                    .unwrap();
                centroids[c] = points[far].to_vec();
                changed = true;
            } else {
                for (cv, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut picked = BTreeSet::new();
    for (c, centroid) in centroids.iter().enumerate() {
        let mut best: Option<(f64, SampleId)> = None;
        for (i, p) in points.iter().enumerate() {
            if assign[i] != c {
                continue;
            }
            let d = math::squared_distance(p, centroid);
            let candidate = (d, order[i].id);
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && order[i].id < bid),
            };
            if better {
                best = Some(candidate);
            }
        }
        if let Some((_, id)) = best {
            picked.insert(id);
        }
    }
    picked.into_iter().collect()
}
