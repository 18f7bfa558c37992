use rand::Rng;

use super::block::{sinusoid, RelationBlock, RelationConfig};
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection, LandmarkClass};

/// Greedy suppression in descending score order; a box is dropped when its
/// IoU with an already kept box exceeds `threshold`. Returns kept indices.
pub fn classical_nms(dets: &[Detection], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Per-class rank of each detection by descending score (ties by index).
pub fn class_ranks(dets: &[Detection]) -> Vec<usize> {
    let mut ranks = vec![0; dets.len()];
    for class in LandmarkClass::ALL {
        let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
        idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        for (r, i) in idx.into_iter().enumerate() {
            ranks[i] = r;
        }
    }
    ranks
}

/// Training targets: per ground-truth box, the same-class detection with the
/// highest IoU is positive if that IoU is at least 0.5.
pub fn dedup_targets(dets: &[Detection], gt: &[(LandmarkClass, BBox)]) -> Vec<f64> {
    let mut t = vec![0.0; dets.len()];
    for (class, g) in gt {
        let best = (0..dets.len()).filter(|&i| dets[i].class == *class).map(|i| (i, iou(&dets[i].bbox, g))).fold(
            None,
            |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            },
        );
        if let Some((i, v)) = best {
            if v >= 0.5 {
                t[i] = 1.0;
            }
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DedupConfig {
    /// Width of the rescoring features.
    pub d_dr: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_g: usize,
    /// Width of the rank embedding.
    pub d_rank: usize,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig { d_dr: 32, heads: 2, d_k: 16, d_g: 64, d_rank: 32 }
    }
}

/// How the duplicate-removal gate is applied at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Learned,
    /// Gate fixed at 1: scores pass through untouched.
    ForcedOpen,
}

/// Learned duplicate removal: each detection's feature is projected, combined
/// with an embedding of its per-class score rank, passed through one relation
/// block among same-class detections, and mapped to a sigmoid gate.
#[derive(Debug, Clone, PartialEq)]
pub struct DuplicateRemoval {
    pub prefix: String,
    pub cfg: DedupConfig,
    pub d_in: usize,
    block: RelationBlock,
}

impl DuplicateRemoval {
    pub fn new(prefix: impl Into<String>, d_in: usize, cfg: DedupConfig) -> Result<Self> {
        let prefix = prefix.into();
        if cfg.d_rank == 0 || !cfg.d_rank.is_multiple_of(2) {
            return Err(Error::config("rank embedding width must be a positive even number"));
        }
        let rc = RelationConfig { d_f: cfg.d_dr, heads: cfg.heads, d_k: cfg.d_k, d_g: cfg.d_g };
        let block = RelationBlock::new(format!("{prefix}relation."), rc)?;
        Ok(DuplicateRemoval { prefix, cfg, d_in, block })
    }

    fn name(&self, w: &str) -> String {
        format!("{}{w}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.cfg;
        store.insert(self.name("W_feat"), Tensor::randn(&[self.d_in, c.d_dr], 1.0 / (self.d_in as f64).sqrt(), rng));
        store.insert(self.name("W_rank"), Tensor::randn(&[c.d_rank, c.d_dr], 1.0 / (c.d_rank as f64).sqrt(), rng));
        store.insert(self.name("W_out"), Tensor::randn(&[c.d_dr, 1], 1.0 / (c.d_dr as f64).sqrt(), rng));
        store.insert(self.name("b_out"), Tensor::zeros(&[1]));
        self.block.init(store, rng);
    }

    fn rank_embedding(&self, ranks: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ranks.len() * self.cfg.d_rank);
        for &r in ranks {
            sinusoid(r as f64, self.cfg.d_rank / 2, &mut data);
        }
        Tensor::new(&[ranks.len(), self.cfg.d_rank], data)
    }

    /// `[N×1]` gate logits; relations only connect detections of the same class.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, dets: &[Detection], feats: Var) -> Result<Var> {
        let n = dets.len();
        if n == 0 {
            return Err(Error::contract("duplicate removal needs at least one detection"));
        }
        if tape.shape(feats) != [n, self.d_in] {
            return Err(Error::dim(format!("expected [{n}×{}] detection features, got {:?}", self.d_in, tape.shape(feats))));
        }
        let ranks = class_ranks(dets);
        let w_feat = tape.param_from(store, &self.name("W_feat"))?;
        let w_rank = tape.param_from(store, &self.name("W_rank"))?;
        let w_out = tape.param_from(store, &self.name("W_out"))?;
        let b_out = tape.param_from(store, &self.name("b_out"))?;
        let mut total: Option<Var> = None;
        for class in LandmarkClass::ALL {
            let idx: Vec<usize> = (0..n).filter(|&i| dets[i].class == class).collect();
            if idx.is_empty() {
                continue;
            }
            let sub = tape.gather_rows(feats, &idx)?;
            let proj = tape.matmul(sub, w_feat)?;
            let r: Vec<usize> = idx.iter().map(|&i| ranks[i]).collect();
            let re = tape.constant(self.rank_embedding(&r)?);
            let rproj = tape.matmul(re, w_rank)?;
            let x = tape.add(proj, rproj)?;
            let boxes: Vec<BBox> = idx.iter().map(|&i| dets[i].bbox).collect();
            let aug = self.block.forward(tape, store, x, &boxes)?;
            let out = tape.matmul(aug, w_out)?;
            let out = tape.add_row_bias(out, b_out)?;
            let placed = tape.scatter_rows(out, &idx, n)?;
            total = Some(match total {
                Some(t) => tape.add(t, placed)?,
                None => placed,
            });
        }
        Ok(total.expect("at least one class present"))
    }

    /// Mean binary cross-entropy of the gate against [`dedup_targets`].
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, dets: &[Detection], feats: Var, targets: &[f64]) -> Result<Var> {
        let logits = self.logits(tape, store, dets, feats)?;
        let w = vec![1.0 / dets.len() as f64; dets.len()];
        tape.bce_with_logits(logits, targets, &w)
    }

    /// Sigmoid gate per detection.
    pub fn gates(&self, store: &ParamStore, dets: &[Detection], feats: &Tensor, mode: GateMode) -> Result<Vec<f64>> {
        if mode == GateMode::ForcedOpen {
            return Ok(vec![1.0; dets.len()]);
        }
        let mut tape = Tape::inference();
        let f = tape.constant(feats.clone());
        let l = self.logits(&mut tape, store, dets, f)?;
        let g = tape.sigmoid(l);
        Ok(tape.value(g).data().to_vec())
    }

    /// Detections with `score ← score · gate`.
    pub fn rescore(&self, store: &ParamStore, dets: &[Detection], feats: &Tensor, mode: GateMode) -> Result<Vec<Detection>> {
        if dets.iter().any(|d| !(0.0..=1.0).contains(&d.score)) {
            return Err(Error::contract("detection scores must lie in [0, 1]"));
        }
        let gates = self.gates(store, dets, feats, mode)?;
        Ok(dets.iter().zip(gates).map(|(d, g)| Detection { score: d.score * g, ..*d }).collect())
    }
}
