//! Linear softmax probe over frozen image embeddings.
//!
//! The probe is a single weight matrix (classes × dim) trained with plain
//! SGD on cross-entropy; it starts at zero and refuses to predict until it
//! has been fit at least once, so callers cannot silently rank a pool with a
//! constant model.

use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::wire::{self, Reader};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    weights: Matrix,
    trained: bool,
}

impl LinearProbe {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        LinearProbe { weights: Matrix::zeros(num_classes, dim), trained: false }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    #[cfg(test)]
    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    #[cfg(test)]
    pub(crate) fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn predict_probs(&self, z: &Embedding) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::UntrainedModel);
        }
        if z.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: z.dim() });
        }
        let mut logits = self.weights.matvec(z.as_slice());
        math::softmax_in_place(&mut logits);
        Ok(logits)
    }

    pub fn predict_class(&self, z: &Embedding) -> Result<usize> {
        Ok(math::argmax(&self.predict_probs(z)?))
    }

    /// Mini-batch cross-entropy SGD. Labels are class indices (no OOD slot
    /// here — the probe only sees confirmed in-distribution samples).
    /// Returns the per-epoch mean loss and marks the probe trained.
    pub fn train_local(
        &mut self,
        examples: &[(Embedding, usize)],
        hyper: &ProbeHyper,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        if examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if hyper.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1"));
        }
        let (classes, dim) = (self.num_classes(), self.dim());
        for (z, y) in examples {
            if z.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: z.dim() });
            }
            if *y >= classes {
                return Err(Error::InvalidClassIndex { class: *y, num_classes: classes });
            }
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut trace = Vec::with_capacity(hyper.epochs);
        for _ in 0..hyper.epochs {
            order.shuffle(rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(hyper.batch_size) {
                let b = chunk.len() as f64;
                let mut grad = Matrix::zeros(classes, dim);
                let mut loss = 0.0;
                for &i in chunk {
                    let (z, y) = &examples[i];
                    let mut probs = self.weights.matvec(z.as_slice());
                    math::softmax_in_place(&mut probs);
                    loss -= libm::log(probs[*y].max(1e-300));
                    for (c, &p) in probs.iter().enumerate() {
                        let coeff = (p - if c == *y { 1.0 } else { 0.0 }) / b;
                        for (g, zv) in grad.row_mut(c).iter_mut().zip(z.as_slice()) {
                            *g += coeff * zv;
                        }
                    }
                }
                for (w, g) in self.weights.data_mut().iter_mut().zip(grad.data()) {
                    *w -= hyper.lr * g;
                }
                epoch_loss += loss / b;
                batches += 1;
            }
            trace.push(epoch_loss / batches as f64);
        }
        self.trained = true;
        Ok(trace)
    }

    pub(crate) fn write_into(&self, out: &mut Vec<u8>) {
        wire::put_u32(out, self.weights.rows() as u32);
        wire::put_u32(out, self.weights.cols() as u32);
        out.push(self.trained as u8);
        for v in self.weights.data() {
            wire::put_f64(out, *v);
        }
    }

    pub(crate) fn read_from(r: &mut Reader) -> Result<Self> {
        let rows = r.take_u32()? as usize;
        let cols = r.take_u32()? as usize;
        let trained = match r.take_u8()? {
            0 => false,
            1 => true,
            _ => return Err(Error::InvalidConfig("probe trained flag out of range")),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.take_f64()?);
        }
        Ok(LinearProbe { weights: Matrix::from_vec(rows, cols, data), trained })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(wire::PROBE_MAGIC);
        wire::put_u16(&mut out, wire::WIRE_VERSION);
        self.write_into(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(wire::PROBE_MAGIC)?;
        let version = r.take_u16()?;
        if version != wire::WIRE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let probe = LinearProbe::read_from(&mut r)?;
        r.finish()?;
        Ok(probe)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        ProbeHyper { lr: 0.0005, epochs: 15, batch_size: 32 }
    }
}

/// Example-count-weighted average of probe weight matrices.
pub fn fedavg_linear(probes: &[(LinearProbe, f64)]) -> Result<LinearProbe> {
    let (first, _) = probes.first().ok_or(Error::EmptyAggregation)?;
    let (rows, cols) = (first.weights.rows(), first.weights.cols());
    let total: f64 = probes.iter().map(|(_, w)| *w).sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let mut out = Matrix::zeros(rows, cols);
    let mut trained = false;
    for (p, w) in probes {
        if p.weights.rows() != rows || p.weights.cols() != cols {
            return Err(Error::ShapeMismatch);
        }
        trained |= p.trained;
        let scale = w / total;
        for (o, v) in out.data_mut().iter_mut().zip(p.weights.data()) {
            *o += scale * v;
        }
    }
    Ok(LinearProbe { weights: out, trained })
}
