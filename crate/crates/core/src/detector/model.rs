use rand::Rng;

use super::anchors::{unscaled_deltas, AnchorGrid};
use crate::autodiff::{he_init, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{decode_box, BBox, BoxPriors, Detection, ImageSize, LandmarkClass};
use crate::imaging::{normalize, Image};
use crate::relation::{RelationBlock, RelationConfig};

pub const BACKBONE_CHANNELS: [usize; 4] = [16, 32, 64, 128];
/// The last conv keeps resolution so anchors sit 8 px apart.
pub const BACKBONE_STRIDES: [usize; 4] = [2, 2, 2, 1];
pub const STRIDE: u32 = 8;
/// Background plus the two landmark classes.
pub const NUM_CLASSES: usize = 3;
pub const PREFIX: &str = "detector.";

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub working: ImageSize,
    pub priors: BoxPriors,
    pub d_f: usize,
    /// `None` ablates the relation block.
    pub relation: Option<RelationConfig>,
    pub top_k: usize,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = &self.relation {
            r.validate()?;
            if r.d_f != self.d_f {
                return Err(Error::config(format!("relation d_f {} differs from detector feature dim {}", r.d_f, self.d_f)));
            }
        }
        if self.top_k == 0 || self.d_f == 0 || !(self.norm_std > 0.0) {
            return Err(Error::config("detector needs top_k, d_f and norm_std positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub grid: AnchorGrid,
    block: Option<RelationBlock>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct DetectorOutputs {
    /// `[A × 3]` proposal logits that choose the relation set.
    pub pre_logits: Var,
    /// `[A × 3]` final class logits.
    pub logits: Var,
    /// `[A × 4]` scaled box deltas.
    pub deltas: Var,
    /// `[A × d_f]` anchor features after the relation block.
    pub features: Var,
    /// Anchors that went through the relation block.
    pub top_k: Vec<usize>,
}

/// Per-anchor results of inference.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPredictions {
    /// Softmax rows, background first.
    pub probs: Vec<[f64; NUM_CLASSES]>,
    /// Decoded and clipped to the image.
    pub boxes: Vec<BBox>,
    pub features: Tensor,
}

impl AnchorPredictions {
    pub fn score(&self, anchor: usize, class: LandmarkClass) -> f64 {
        self.probs[anchor][class.label()]
    }

    /// Per class, the `k` best anchors by that class's probability, as
    /// `(anchor, detection)` in descending score order.
    pub fn candidates(&self, k: usize) -> Vec<(usize, Detection)> {
        let mut out = Vec::new();
        for class in LandmarkClass::ALL {
            let mut order: Vec<usize> = (0..self.probs.len()).collect();
            order.sort_by(|&a, &b| self.score(b, class).total_cmp(&self.score(a, class)).then(a.cmp(&b)));
            for &a in order.iter().take(k) {
                out.push((a, Detection { class, score: self.score(a, class), bbox: self.boxes[a] }));
            }
        }
        out
    }
}

fn top_k_by_foreground(pre: &Tensor, k: usize) -> Vec<usize> {
    let c = pre.shape()[1];
    let fg: Vec<f64> = (0..pre.shape()[0])
        .map(|i| {
            let row = pre.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            (1..c).map(|j| (row[j] - max).exp() / z).fold(0.0, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..fg.len()).collect();
    order.sort_by(|&a, &b| fg[b].total_cmp(&fg[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn softmax_row(row: &[f64]) -> [f64; NUM_CLASSES] {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    [e[0] / z, e[1] / z, e[2] / z]
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = AnchorGrid::for_priors(cfg.working, STRIDE, &cfg.priors)?;
        let block = cfg.relation.map(|r| RelationBlock::new(format!("{PREFIX}relation."), r)).transpose()?;
        Ok(Detector { cfg, grid, block })
    }

    pub fn relation_enabled(&self) -> bool {
        self.block.is_some()
    }

    fn name(w: &str) -> String {
        format!("{PREFIX}{w}")
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut c_in = 3;
        for (i, &c) in BACKBONE_CHANNELS.iter().enumerate() {
            store.insert(Self::name(&format!("conv{i}.w")), he_init(&[c, c_in, 3, 3], c_in * 9, rng));
            store.insert(Self::name(&format!("conv{i}.b")), Tensor::zeros(&[c]));
            c_in = c;
        }
        let d_f = self.cfg.d_f;
        for t in 0..self.grid.templates.len() {
            store.insert(Self::name(&format!("proj{t}.w")), he_init(&[c_in, d_f], c_in, rng));
            store.insert(Self::name(&format!("proj{t}.b")), Tensor::zeros(&[d_f]));
        }
        let small = 0.01;
        for head in ["pre", "cls"] {
            store.insert(Self::name(&format!("{head}.w")), Tensor::randn(&[d_f, NUM_CLASSES], small, rng));
            // Background starts likely, as almost every anchor is background.
            store.insert(Self::name(&format!("{head}.b")), Tensor::new(&[NUM_CLASSES], vec![2.0, 0.0, 0.0]).expect("shape"));
        }
        store.insert(Self::name("box.w"), Tensor::randn(&[d_f, 4], small, rng));
        store.insert(Self::name("box.b"), Tensor::zeros(&[4]));
        if let Some(b) = &self.block {
            b.init(store, rng);
        }
    }

    pub fn input_tensor(&self, img: &Image) -> Result<Tensor> {
        if img.size() != self.cfg.working || img.channels() != 3 {
            return Err(Error::config(format!(
                "detector expects a 3-channel {} image, got {}-channel {}",
                self.cfg.working,
                img.channels(),
                img.size()
            )));
        }
        normalize(img, &[self.cfg.norm_mean; 3], &[self.cfg.norm_std; 3])
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<DetectorOutputs> {
        let mut x = input;
        for i in 0..BACKBONE_CHANNELS.len() {
            let w = tape.param_from(store, &Self::name(&format!("conv{i}.w")))?;
            let b = tape.param_from(store, &Self::name(&format!("conv{i}.b")))?;
            x = tape.conv2d(x, w, BACKBONE_STRIDES[i], 1)?;
            x = tape.add_channel_bias(x, b)?;
            x = tape.relu(x);
        }
        let s = tape.shape(x).to_vec();
        let cells = self.grid.cells();
        if s[1] * s[2] != cells {
            return Err(Error::config(format!("backbone map {s:?} does not match {cells} anchor cells")));
        }
        let flat = tape.reshape(x, &[s[0], cells])?;
        let cell_feats = tape.transpose(flat)?;
        let mut parts = Vec::with_capacity(self.grid.templates.len());
        for t in 0..self.grid.templates.len() {
            let w = tape.param_from(store, &Self::name(&format!("proj{t}.w")))?;
            let b = tape.param_from(store, &Self::name(&format!("proj{t}.b")))?;
            let p = tape.matmul(cell_feats, w)?;
            let p = tape.add_row_bias(p, b)?;
            parts.push(tape.relu(p));
        }
        let anchors = tape.concat(&parts, 0)?;
        let pre_logits = self.linear(tape, store, anchors, "pre")?;

        let k = self.cfg.top_k.min(self.grid.len());
        let top_k = top_k_by_foreground(tape.value(pre_logits), k);
        let features = match &self.block {
            Some(block) => {
                let r = tape.gather_rows(anchors, &top_k)?;
                let boxes: Vec<BBox> = top_k.iter().map(|&i| self.grid.anchors()[i]).collect();
                let aug = block.forward(tape, store, r, &boxes)?;
                let delta = tape.sub(aug, r)?;
                let back = tape.scatter_rows(delta, &top_k, self.grid.len())?;
                tape.add(anchors, back)?
            }
            None => anchors,
        };
        let logits = self.linear(tape, store, features, "cls")?;
        let deltas = self.linear(tape, store, features, "box")?;
        Ok(DetectorOutputs { pre_logits, logits, deltas, features, top_k })
    }

    fn linear(&self, tape: &mut Tape, store: &ParamStore, x: Var, head: &str) -> Result<Var> {
        let w = tape.param_from(store, &Self::name(&format!("{head}.w")))?;
        let b = tape.param_from(store, &Self::name(&format!("{head}.b")))?;
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }

    pub fn decode(&self, deltas: &Tensor) -> Result<Vec<BBox>> {
        let frame = self.cfg.working;
        self.grid
            .anchors()
            .iter()
            .enumerate()
            .map(|(i, a)| {
                // Clamp the log-size terms so an untrained head cannot overflow.
                let mut d = unscaled_deltas(deltas.row(i));
                d[2] = d[2].clamp(-4.0, 4.0);
                d[3] = d[3].clamp(-4.0, 4.0);
                let b = decode_box(a, &d)?;
                Ok(b.clipped(frame).unwrap_or_else(|| fallback_box(a, frame)))
            })
            .collect()
    }

    pub fn predict(&self, store: &ParamStore, img: &Image) -> Result<AnchorPredictions> {
        let mut tape = Tape::inference();
        let x = tape.constant(self.input_tensor(img)?);
        let out = self.forward(&mut tape, store, x)?;
        let logits = tape.value(out.logits);
        let probs = (0..logits.shape()[0]).map(|i| softmax_row(logits.row(i))).collect();
        let boxes = self.decode(tape.value(out.deltas))?;
        Ok(AnchorPredictions { probs, boxes, features: tape.value(out.features).clone() })
    }
}

/// A box pushed entirely off-frame collapses to the anchor clipped inside.
fn fallback_box(anchor: &BBox, frame: ImageSize) -> BBox {
    anchor.clipped(frame).unwrap_or(BBox { x_min: 0.0, y_min: 0.0, x_max: 1.0, y_max: 1.0 })
}
