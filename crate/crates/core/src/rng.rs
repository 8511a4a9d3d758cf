//! Deterministic RNG stream derivation.
//!
//! Every consumer of randomness gets its own ChaCha8 stream keyed by
//! `(master seed, participant, round, stage)`. The four keys are packed
//! directly into the 32-byte ChaCha seed, so distinct tuples can never
//! collide and execution order cannot perturb any stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Participant id reserved for server-side draws.
pub const SERVER: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Dataset,
    Mixer,
    BankInit,
    StaticTemplates,
    InitProbe,
    WarmupDraw,
    WarmupTrain,
    Selection,
    PromptTrain,
    ProbeTrain,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Dataset => 0,
            Stage::Mixer => 1,
            Stage::BankInit => 2,
            Stage::StaticTemplates => 3,
            Stage::InitProbe => 4,
            Stage::WarmupDraw => 5,
            Stage::WarmupTrain => 6,
            Stage::Selection => 7,
            Stage::PromptTrain => 8,
            Stage::ProbeTrain => 9,
        }
    }
}

pub fn stream(master: u64, participant: u64, round: u64, stage: Stage) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&participant.to_le_bytes());
    seed[16..24].copy_from_slice(&round.to_le_bytes());
    seed[24..32].copy_from_slice(&stage.tag().to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}
