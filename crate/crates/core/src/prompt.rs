//! Learnable class-context prompts and the frozen text-side mixer.
//!
//! Each class slot owns a small matrix of context tokens. A frozen random
//! mixing matrix plus a fixed per-slot anchor stands in for the text encoder:
//! `t_slot = normalize(M · mean(context rows) + anchor_slot)`. Training is
//! plain cross-entropy over temperature-scaled cosine similarities, with
//! gradients derived in closed form (verified against finite differences in
//! the tests).

use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::rng::{self, Stage};
use crate::wire;

/// Which token groups a prompt bank trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptVariant {
    /// Federated global tokens plus client-private local tokens.
    Mixed { global_rows: usize, local_rows: usize },
    /// Only federated global tokens.
    GlobalOnly { global_rows: usize },
    /// Only client-private local tokens.
    LocalOnly { local_rows: usize },
}

impl PromptVariant {
    pub fn default_mixed() -> Self {
        PromptVariant::Mixed { global_rows: 8, local_rows: 8 }
    }

    pub fn default_global() -> Self {
        PromptVariant::GlobalOnly { global_rows: 16 }
    }

    pub fn default_local() -> Self {
        PromptVariant::LocalOnly { local_rows: 16 }
    }

    pub fn global_rows(self) -> usize {
        match self {
            PromptVariant::Mixed { global_rows, .. } => global_rows,
            PromptVariant::GlobalOnly { global_rows } => global_rows,
            PromptVariant::LocalOnly { .. } => 0,
        }
    }

    pub fn local_rows(self) -> usize {
        match self {
            PromptVariant::Mixed { local_rows, .. } => local_rows,
            PromptVariant::GlobalOnly { .. } => 0,
            PromptVariant::LocalOnly { local_rows } => local_rows,
        }
    }

    pub fn validate(self) -> Result<()> {
        let ok = match self {
            PromptVariant::Mixed { global_rows, local_rows } => global_rows > 0 && local_rows > 0,
            PromptVariant::GlobalOnly { global_rows } => global_rows > 0,
            PromptVariant::LocalOnly { local_rows } => local_rows > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("prompt variant needs at least one token row per group"))
        }
    }
}

/// Frozen text-side mixer: a fixed random matrix with unit spectral norm and
/// one unit-norm anchor per class slot. Identical for every participant.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTextMixer {
    matrix: Matrix,
    anchors: Vec<Embedding>,
}

impl FrozenTextMixer {
    pub fn new(anchors: Vec<Embedding>, seed: u64) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::InvalidConfig("mixer needs at least one class slot plus the OOD slot"));
        }
        let dim = anchors[0].dim();
        for a in &anchors {
            if a.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: a.dim() });
            }
            if (a.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig("mixer anchors must be unit norm"));
            }
        }
        let mut rng = rng::stream(seed, rng::SERVER, 0, Stage::Mixer);
        let scale = 1.0 / libm::sqrt(dim as f64);
        let data: Vec<f64> =
            (0..dim * dim).map(|_| scale * math::standard_normal(&mut rng)).collect();
        let mut matrix = Matrix::from_vec(dim, dim, data);
        let sigma = math::spectral_norm(&matrix, 60);
        if sigma < 1e-12 {
            return Err(Error::ZeroNorm);
        }
        for v in matrix.data_mut() {
            *v /= sigma;
        }
        Ok(FrozenTextMixer { matrix, anchors })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn num_slots(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchor(&self, slot: usize) -> &Embedding {
        &self.anchors[slot]
    }

    pub fn anchors(&self) -> &[Embedding] {
        &self.anchors
    }
}

/// All prompt parameters of a simulation: per-slot global token matrices
/// (shared through the server) and per-client per-slot local token matrices
/// (never leave their client).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    variant: PromptVariant,
    num_slots: usize,
    dim: usize,
    pub global: Vec<Matrix>,
    pub local: Vec<Vec<Matrix>>,
}

impl PromptBank {
    pub fn variant(&self) -> PromptVariant {
        self.variant
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn num_classes(&self) -> usize {
        self.num_slots - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_clients(&self) -> usize {
        self.local.len()
    }

    /// Assemble a bank from existing token matrices, checking every shape
    /// against the variant.
    pub fn from_parts(
        variant: PromptVariant,
        dim: usize,
        global: Vec<Matrix>,
        local: Vec<Vec<Matrix>>,
    ) -> Result<Self> {
        variant.validate()?;
        let num_slots = global.len();
        if num_slots < 2 {
            return Err(Error::InvalidConfig("bank needs class slots and a rejection slot"));
        }
        if dim == 0 || local.is_empty() {
            return Err(Error::InvalidConfig("bank needs clients and a positive dimension"));
        }
        for m in &global {
            if m.rows() != variant.global_rows() || m.cols() != dim {
                return Err(Error::ShapeMismatch);
            }
        }
        for client in &local {
            if client.len() != num_slots {
                return Err(Error::ShapeMismatch);
            }
            for m in client {
                if m.rows() != variant.local_rows() || m.cols() != dim {
                    return Err(Error::ShapeMismatch);
                }
            }
        }
        Ok(PromptBank { variant, num_slots, dim, global, local })
    }

    /// Serialize as a shape header `(slots, global_rows, local_rows, dim,
    /// clients)` followed by all token values row-major (global slots first,
    /// then each client's local slots). Round-trips losslessly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(wire::BANK_MAGIC);
        wire::put_u16(&mut out, wire::WIRE_VERSION);
        wire::put_u32(&mut out, self.num_slots as u32);
        wire::put_u32(&mut out, self.variant.global_rows() as u32);
        wire::put_u32(&mut out, self.variant.local_rows() as u32);
        wire::put_u32(&mut out, self.dim as u32);
        wire::put_u32(&mut out, self.local.len() as u32);
        for m in &self.global {
            for v in m.data() {
                wire::put_f64(&mut out, *v);
            }
        }
        for client in &self.local {
            for m in client {
                for v in m.data() {
                    wire::put_f64(&mut out, *v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = wire::Reader::new(bytes);
        r.expect_magic(wire::BANK_MAGIC)?;
        let version = r.take_u16()?;
        if version != wire::WIRE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let num_slots = r.take_u32()? as usize;
        let global_rows = r.take_u32()? as usize;
        let local_rows = r.take_u32()? as usize;
        let dim = r.take_u32()? as usize;
        let num_clients = r.take_u32()? as usize;
        if num_slots < 2 || dim == 0 {
            return Err(Error::InvalidConfig("bank header out of range"));
        }
        let variant = match (global_rows, local_rows) {
            (0, 0) => return Err(Error::InvalidConfig("bank header has no token rows")),
            (g, 0) => PromptVariant::GlobalOnly { global_rows: g },
            (0, l) => PromptVariant::LocalOnly { local_rows: l },
            (g, l) => PromptVariant::Mixed { global_rows: g, local_rows: l },
        };
        let take_matrix = |rows: usize, r: &mut wire::Reader| -> Result<Matrix> {
            let mut data = Vec::with_capacity(rows * dim);
            for _ in 0..rows * dim {
                data.push(r.take_f64()?);
            }
            Ok(Matrix::from_vec(rows, dim, data))
        };
        let mut global = Vec::with_capacity(num_slots);
        for _ in 0..num_slots {
            global.push(take_matrix(global_rows, &mut r)?);
        }
        let mut local = Vec::with_capacity(num_clients);
        for _ in 0..num_clients {
            let mut slots = Vec::with_capacity(num_slots);
            for _ in 0..num_slots {
                slots.push(take_matrix(local_rows, &mut r)?);
            }
            local.push(slots);
        }
        r.finish()?;
        Ok(PromptBank { variant, num_slots, dim, global, local })
    }
}

/// Small-gaussian token initialization (std 0.02), seeded.
pub fn init_prompt_bank(
    variant: PromptVariant,
    num_classes: usize,
    num_clients: usize,
    dim: usize,
    seed: u64,
) -> Result<PromptBank> {
    variant.validate()?;
    if num_classes == 0 || dim == 0 || num_clients == 0 {
        return Err(Error::InvalidConfig("bank needs classes, clients, and a positive dimension"));
    }
    let num_slots = num_classes + 1;
    let mut rng = rng::stream(seed, rng::SERVER, 0, Stage::BankInit);
    let draw = |rows: usize, rng: &mut ChaCha8Rng| -> Matrix {
        let data: Vec<f64> =
            (0..rows * dim).map(|_| 0.02 * math::standard_normal(rng)).collect();
        Matrix::from_vec(rows, dim, data)
    };
    let global: Vec<Matrix> =
        (0..num_slots).map(|_| draw(variant.global_rows(), &mut rng)).collect();
    let local: Vec<Vec<Matrix>> = (0..num_clients)
        .map(|_| (0..num_slots).map(|_| draw(variant.local_rows(), &mut rng)).collect())
        .collect();
    Ok(PromptBank { variant, num_slots, dim, global, local })
}

fn check_bank_indices(bank: &PromptBank, client: usize, slot: usize) -> Result<()> {
    if client >= bank.local.len() {
        return Err(Error::InvalidConfig("client index out of range"));
    }
    if slot >= bank.num_slots {
        return Err(Error::InvalidClassIndex { class: slot, num_classes: bank.num_slots });
    }
    Ok(())
}

/// Pre-normalization slot encoding: returns `(t_hat, ‖v‖)`.
fn encode_slot_raw(
    bank: &PromptBank,
    mixer: &FrozenTextMixer,
    client: usize,
    slot: usize,
) -> Result<(Vec<f64>, f64)> {
    let d = bank.dim;
    let rows = bank.variant.global_rows() + bank.variant.local_rows();
    let mut u = vec![0.0; d];
    for r in 0..bank.global[slot].rows() {
        for (x, v) in u.iter_mut().zip(bank.global[slot].row(r)) {
            *x += v;
        }
    }
    for r in 0..bank.local[client][slot].rows() {
        for (x, v) in u.iter_mut().zip(bank.local[client][slot].row(r)) {
            *x += v;
        }
    }
    let inv = 1.0 / rows as f64;
    for x in &mut u {
        *x *= inv;
    }
    let mut v = mixer.matrix.matvec(&u);
    for (x, e) in v.iter_mut().zip(mixer.anchor(slot).as_slice()) {
        *x += e;
    }
    let nv = math::norm(&v);
    if nv < 1e-12 {
        return Err(Error::ZeroNorm);
    }
    let t_hat: Vec<f64> = v.into_iter().map(|x| x / nv).collect();
    Ok((t_hat, nv))
}

/// Text embedding of one class slot for one client.
pub fn encode_class(
    bank: &PromptBank,
    mixer: &FrozenTextMixer,
    client: usize,
    slot: usize,
) -> Result<Embedding> {
    check_bank_indices(bank, client, slot)?;
    if mixer.dim() != bank.dim {
        return Err(Error::DimensionMismatch { expected: bank.dim, got: mixer.dim() });
    }
    if mixer.num_slots() != bank.num_slots {
        return Err(Error::InvalidConfig("mixer slot count disagrees with bank"));
    }
    let (t_hat, _) = encode_slot_raw(bank, mixer, client, slot)?;
    Embedding::new(t_hat)
}

/// Text embeddings of every slot for one client.
pub fn class_text_embeddings(
    bank: &PromptBank,
    mixer: &FrozenTextMixer,
    client: usize,
) -> Result<Vec<Embedding>> {
    (0..bank.num_slots).map(|s| encode_class(bank, mixer, client, s)).collect()
}

/// Temperature-scaled softmax over cosine similarities.
pub fn class_probabilities(z: &Embedding, texts: &[Embedding], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::NonPositiveTemperature);
    }
    if texts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let zn = z.norm();
    if zn < 1e-12 {
        return Err(Error::ZeroNorm);
    }
    let mut logits = Vec::with_capacity(texts.len());
    for t in texts {
        if t.dim() != z.dim() {
            return Err(Error::DimensionMismatch { expected: z.dim(), got: t.dim() });
        }
        let tn = t.norm();
        if tn < 1e-12 {
            return Err(Error::ZeroNorm);
        }
        logits.push(z.dot(t) / (zn * tn) / tau);
    }
    math::softmax_in_place(&mut logits);
    Ok(logits)
}

/// Per-slot gradients; every token row of a slot receives the same vector
/// because the encoder mean-pools rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGrads {
    pub global: Vec<Matrix>,
    pub local: Vec<Matrix>,
}

/// Mean cross-entropy of a labeled batch plus gradients for every token row
/// of the acting client (labels are slot indices; the OOD slot is a valid
/// label).
pub fn prompt_loss_and_grads(
    bank: &PromptBank,
    mixer: &FrozenTextMixer,
    client: usize,
    batch: &[(Embedding, usize)],
    tau: f64,
) -> Result<(f64, PromptGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::NonPositiveTemperature);
    }
    check_bank_indices(bank, client, 0)?;
    let num_slots = bank.num_slots;
    let d = bank.dim;
    for (z, y) in batch {
        if z.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: z.dim() });
        }
        if *y >= num_slots {
            return Err(Error::InvalidClassIndex { class: *y, num_classes: num_slots });
        }
    }

    let mut encoded = Vec::with_capacity(num_slots);
    for s in 0..num_slots {
        encoded.push(encode_slot_raw(bank, mixer, client, s)?);
    }

    let b = batch.len() as f64;
    let mut loss = 0.0;
    // w[s] accumulates dL/dt_hat_s over the batch.
    let mut w = vec![vec![0.0; d]; num_slots];
    for (z, y) in batch {
        let zn = z.norm();
        if zn < 1e-12 {
            return Err(Error::ZeroNorm);
        }
        let z_hat: Vec<f64> = z.as_slice().iter().map(|x| x / zn).collect();
        let mut probs: Vec<f64> =
            encoded.iter().map(|(t, _)| math::dot(&z_hat, t) / tau).collect();
        math::softmax_in_place(&mut probs);
        loss -= libm::log(probs[*y].max(1e-300));
        for s in 0..num_slots {
            let coeff = (probs[s] - if s == *y { 1.0 } else { 0.0 }) / (b * tau);
            for (acc, zv) in w[s].iter_mut().zip(&z_hat) {
                *acc += coeff * zv;
            }
        }
    }
    loss /= b;

    let rows_total = bank.variant.global_rows() + bank.variant.local_rows();
    let row_scale = 1.0 / rows_total as f64;
    let mut grads = PromptGrads {
        global: Vec::with_capacity(num_slots),
        local: Vec::with_capacity(num_slots),
    };
    for s in 0..num_slots {
        let (t_hat, nv) = &encoded[s];
        // Through the normalization: (I − t̂ t̂ᵀ) / ‖v‖, then through M.
        let tw = math::dot(t_hat, &w[s]);
        let proj: Vec<f64> =
            w[s].iter().zip(t_hat).map(|(wv, tv)| (wv - tw * tv) / nv).collect();
        let mut row = mixer.matrix.matvec_t(&proj);
        for x in &mut row {
            *x *= row_scale;
        }
        let fill = |rows: usize| -> Matrix {
            let mut m = Matrix::zeros(rows, d);
            for r in 0..rows {
                m.row_mut(r).copy_from_slice(&row);
            }
            m
        };
        grads.global.push(fill(bank.variant.global_rows()));
        grads.local.push(fill(bank.variant.local_rows()));
    }
    Ok((loss, grads))
}

/// Momentum buffers matching a parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    buffers: Vec<Matrix>,
}

impl OptimizerState {
    pub fn zeros_like(params: &[Matrix]) -> Self {
        OptimizerState {
            buffers: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }
}

fn sgd_update(param: &mut Matrix, grad: &Matrix, buf: &mut Matrix, lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, g), b) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(buf.data_mut())
    {
        let g = g + weight_decay * *p;
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
}

/// One SGD-with-momentum step: `buf ← momentum·buf + (grad + wd·param)`,
/// `param ← param − lr·buf`.
pub fn sgd_momentum_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.buffers.len() {
        return Err(Error::ShapeMismatch);
    }
    for ((p, g), b) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        if p.rows() != g.rows() || p.cols() != g.cols() || p.rows() != b.rows() || p.cols() != b.cols() {
            return Err(Error::ShapeMismatch);
        }
        sgd_update(p, g, b, lr, momentum, weight_decay);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub shot_cap: usize,
    pub batch_size: usize,
}

impl Default for PromptHyper {
    fn default() -> Self {
        PromptHyper {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 15,
            shot_cap: 128,
            batch_size: 32,
        }
    }
}

/// Class-balanced subsample of at most `cap` example indices: shuffle each
/// slot's example list, then visit slots round-robin taking one index per
/// visit until the cap or exhaustion.
pub fn balanced_subsample<R: Rng>(
    labels: &[usize],
    num_slots: usize,
    cap: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut by_slot: Vec<Vec<usize>> = vec![Vec::new(); num_slots];
    for (i, y) in labels.iter().enumerate() {
        by_slot[*y].push(i);
    }
    for group in &mut by_slot {
        group.shuffle(rng);
    }
    let mut chosen = Vec::with_capacity(cap.min(labels.len()));
    let mut cursor = vec![0usize; num_slots];
    while chosen.len() < cap {
        let mut advanced = false;
        for s in 0..num_slots {
            if chosen.len() >= cap {
                break;
            }
            if cursor[s] < by_slot[s].len() {
                chosen.push(by_slot[s][cursor[s]]);
                cursor[s] += 1;
                advanced = true;
            }
        }
        if !advanced {
            break;
        }
    }
    chosen
}

/// Mini-batch training of one client's prompt tokens (its local tokens plus
/// its working copy of the global tokens). Returns the per-epoch mean loss.
pub fn train_prompts(
    bank: &mut PromptBank,
    mixer: &FrozenTextMixer,
    client: usize,
    examples: &[(Embedding, usize)],
    hyper: &PromptHyper,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if hyper.shot_cap == 0 {
        return Err(Error::InvalidShotCap);
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1"));
    }
    check_bank_indices(bank, client, 0)?;
    for (_, y) in examples {
        if *y >= bank.num_slots {
            return Err(Error::InvalidClassIndex { class: *y, num_classes: bank.num_slots });
        }
    }

    let labels: Vec<usize> = examples.iter().map(|(_, y)| *y).collect();
    let mut order = balanced_subsample(&labels, bank.num_slots, hyper.shot_cap, rng);

    let mut gbuf: Vec<Matrix> = bank.global.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let mut lbuf: Vec<Matrix> =
        bank.local[client].iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();

    let mut trace = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<(Embedding, usize)> =
                chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads) = prompt_loss_and_grads(bank, mixer, client, &batch, tau)?;
            for s in 0..bank.num_slots {
                sgd_update(
                    &mut bank.global[s],
                    &grads.global[s],
                    &mut gbuf[s],
                    hyper.lr,
                    hyper.momentum,
                    hyper.weight_decay,
                );
                sgd_update(
                    &mut bank.local[client][s],
                    &grads.local[s],
                    &mut lbuf[s],
                    hyper.lr,
                    hyper.momentum,
                    hyper.weight_decay,
                );
            }
            epoch_loss += loss;
            batches += 1;
        }
        trace.push(epoch_loss / batches as f64);
    }
    Ok(trace)
}
