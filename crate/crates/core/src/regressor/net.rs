use rand::Rng;

use crate::autodiff::{he_init, update_running_stats, BatchStats, BnMode, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::{normalize, Image};

/// Stride-2 conv + batch-norm + relu layers, then a flattened linear layer
/// with a sigmoid per output.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnRegressor {
    pub prefix: String,
    pub channels: Vec<usize>,
    /// Side of the square input.
    pub input: u32,
    pub outputs: usize,
    pub norm_mean: f64,
    pub norm_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics; the caller folds them into the running ones.
    Train,
    Eval,
}

impl CnnRegressor {
    pub fn new(prefix: impl Into<String>, channels: &[usize], input: u32, outputs: usize) -> Result<Self> {
        let depth = channels.len() as u32;
        if channels.is_empty() || input == 0 || !input.is_multiple_of(1 << depth) || outputs == 0 {
            return Err(Error::config(format!("input side {input} must be a positive multiple of {}", 1u32 << depth)));
        }
        Ok(CnnRegressor { prefix: prefix.into(), channels: channels.to_vec(), input, outputs, norm_mean: 0.5, norm_std: 0.25 })
    }

    pub fn name(&self, w: &str) -> String {
        format!("{}{w}", self.prefix)
    }

    fn flat_dim(&self) -> usize {
        let side = (self.input >> self.channels.len()) as usize;
        self.channels.last().copied().unwrap_or(0) * side * side
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut c_in = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            store.insert(self.name(&format!("conv{i}.w")), he_init(&[c, c_in, 3, 3], c_in * 9, rng));
            store.insert(self.name(&format!("bn{i}.gamma")), Tensor::full(&[c], 1.0));
            store.insert(self.name(&format!("bn{i}.beta")), Tensor::zeros(&[c]));
            store.insert_buffer(self.name(&format!("bn{i}.running_mean")), Tensor::zeros(&[c]));
            store.insert_buffer(self.name(&format!("bn{i}.running_var")), Tensor::full(&[c], 1.0));
            c_in = c;
        }
        let d = self.flat_dim();
        store.insert(self.name("head.w"), Tensor::randn(&[d, self.outputs], 0.1 / (d as f64).sqrt(), rng));
        store.insert(self.name("head.b"), Tensor::zeros(&[self.outputs]));
    }

    /// `[B × 3 × S × S]` normalised batch.
    pub fn batch_tensor(&self, imgs: &[&Image]) -> Result<Tensor> {
        let mut data = Vec::new();
        for img in imgs {
            if img.width() != self.input || img.height() != self.input || img.channels() != 3 {
                return Err(Error::config(format!(
                    "{} expects 3-channel {s}x{s} inputs, got {}-channel {}",
                    self.prefix,
                    img.channels(),
                    img.size(),
                    s = self.input
                )));
            }
            data.extend(normalize(img, &[self.norm_mean; 3], &[self.norm_std; 3])?.into_data());
        }
        let s = self.input as usize;
        Tensor::new(&[imgs.len(), 3, s, s], data)
    }

    /// Sigmoid outputs `[B × outputs]` plus per-layer batch statistics in
    /// train phase.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, phase: Phase) -> Result<(Var, Vec<BatchStats>)> {
        let mut h = x;
        let mut stats = Vec::new();
        for i in 0..self.channels.len() {
            let w = tape.param_from(store, &self.name(&format!("conv{i}.w")))?;
            h = tape.conv2d(h, w, 2, 1)?;
            let g = tape.param_from(store, &self.name(&format!("bn{i}.gamma")))?;
            let b = tape.param_from(store, &self.name(&format!("bn{i}.beta")))?;
            let (y, st) = match phase {
                Phase::Train => tape.batch_norm(h, g, b, BnMode::Train)?,
                Phase::Eval => {
                    let mean = store.require(&self.name(&format!("bn{i}.running_mean")))?.data();
                    let var = store.require(&self.name(&format!("bn{i}.running_var")))?.data();
                    tape.batch_norm(h, g, b, BnMode::Eval { mean, var })?
                }
            };
            stats.extend(st);
            h = tape.relu(y);
        }
        let batch = tape.shape(h)[0];
        let flat = tape.reshape(h, &[batch, self.flat_dim()])?;
        let w = tape.param_from(store, &self.name("head.w"))?;
        let b = tape.param_from(store, &self.name("head.b"))?;
        let z = tape.matmul(flat, w)?;
        let z = tape.add_row_bias(z, b)?;
        Ok((tape.sigmoid(z), stats))
    }

    pub fn update_stats(&self, store: &mut ParamStore, stats: &[BatchStats], momentum: f64) -> Result<()> {
        for (i, st) in stats.iter().enumerate() {
            let (mn, vn) = (self.name(&format!("bn{i}.running_mean")), self.name(&format!("bn{i}.running_var")));
            let mut mean = store.require(&mn)?.data().to_vec();
            let mut var = store.require(&vn)?.data().to_vec();
            update_running_stats(&mut mean, &mut var, st, momentum);
            store.get_mut(&mn).expect("checked").data_mut().copy_from_slice(&mean);
            store.get_mut(&vn).expect("checked").data_mut().copy_from_slice(&var);
        }
        Ok(())
    }

    /// Eval-phase outputs, one row per image.
    pub fn predict(&self, store: &ParamStore, imgs: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::inference();
        let x = tape.constant(self.batch_tensor(imgs)?);
        let (y, _) = self.forward(&mut tape, store, x, Phase::Eval)?;
        let v = tape.value(y);
        Ok((0..imgs.len()).map(|i| v.row(i).to_vec()).collect())
    }
}

/// Mean squared error against `targets` (`[B × outputs]` row-major).
pub fn mse(tape: &mut Tape, pred: Var, targets: &[f64]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let t = tape.constant(Tensor::new(&shape, targets.to_vec())?);
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}
