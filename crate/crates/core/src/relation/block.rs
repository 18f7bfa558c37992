use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{relative_geometry, BBox};

/// Relative-geometry features are multiplied by this before the sinusoids.
pub const POSITION_SCALE: f64 = 100.0;
/// Longest sinusoid wavelength; the shortest is 1.
pub const MAX_WAVELENGTH: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationConfig {
    pub d_f: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_g: usize,
}

impl Default for RelationConfig {
    fn default() -> Self {
        RelationConfig { d_f: 128, heads: 4, d_k: 32, d_g: 64 }
    }
}

impl RelationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_f.is_multiple_of(self.heads) {
            return Err(Error::config(format!("feature dim {} is not divisible by {} relation heads", self.d_f, self.heads)));
        }
        if self.d_k == 0 || self.d_g == 0 || !self.d_g.is_multiple_of(8) {
            return Err(Error::config(format!("relation needs d_k > 0 and d_g a positive multiple of 8, got {self:?}")));
        }
        Ok(())
    }

    pub fn d_v(&self) -> usize {
        self.d_f / self.heads
    }
}

/// Appends `(sin, cos)` of `value / λ_j` for `freqs` wavelengths spaced
/// geometrically from 1 to [`MAX_WAVELENGTH`].
pub fn sinusoid(value: f64, freqs: usize, out: &mut Vec<f64>) {
    for j in 0..freqs {
        let lambda = if freqs == 1 { 1.0 } else { MAX_WAVELENGTH.powf(j as f64 / (freqs - 1) as f64) };
        let a = value / lambda;
        out.push(a.sin());
        out.push(a.cos());
    }
}

/// Embedding of one box pair's relative geometry into `d_g` dimensions.
pub fn embed_pair(m: &BBox, n: &BBox, d_g: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d_g);
    for g in relative_geometry(m, n) {
        sinusoid(POSITION_SCALE * g, d_g / 8, &mut out);
    }
    out
}

/// `[N²×d_g]` pair embeddings, row `m·N + n` for source `m` and target `n`.
pub fn geometry_embedding(boxes: &[BBox], d_g: usize) -> Result<Tensor> {
    let n = boxes.len();
    if n == 0 {
        return Err(Error::dim("relation needs at least one object"));
    }
    let mut data = Vec::with_capacity(n * n * d_g);
    for m in boxes {
        for t in boxes {
            data.extend(embed_pair(m, t, d_g));
        }
    }
    Tensor::new(&[n * n, d_g], data)
}

/// Per-head tape outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub geometric: Var,
    pub weights: Var,
    pub feature: Var,
}

/// A multi-head relation block whose weights live in a [`ParamStore`] under
/// `{prefix}head{i}.{WQ|WK|WV|WG}`.
///
/// Weights follow Hu et al.: a scaled dot-product appearance term, a
/// rectified embedded geometric gate, and a gated softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationBlock {
    pub prefix: String,
    pub cfg: RelationConfig,
}

impl RelationBlock {
    pub fn new(prefix: impl Into<String>, cfg: RelationConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(RelationBlock { prefix: prefix.into(), cfg })
    }

    pub fn name(&self, head: usize, w: &str) -> String {
        format!("{}head{head}.{w}", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.cfg.heads).flat_map(|i| ["WQ", "WK", "WV", "WG"].map(|w| self.name(i, w))).collect()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.cfg;
        let s = 1.0 / (c.d_f as f64).sqrt();
        for i in 0..c.heads {
            store.insert(self.name(i, "WQ"), Tensor::randn(&[c.d_f, c.d_k], s, rng));
            store.insert(self.name(i, "WK"), Tensor::randn(&[c.d_f, c.d_k], s, rng));
            store.insert(self.name(i, "WV"), Tensor::randn(&[c.d_f, c.d_v()], s, rng));
            store.insert(self.name(i, "WG"), Tensor::randn(&[c.d_g, 1], 1.0 / (c.d_g as f64).sqrt(), rng));
        }
    }

    fn check_inputs(&self, tape: &Tape, feats: Var, emb: Var) -> Result<usize> {
        let fs = tape.shape(feats);
        if fs.len() != 2 || fs[1] != self.cfg.d_f {
            return Err(Error::dim(format!("relation expects [N×{}] features, got {fs:?}", self.cfg.d_f)));
        }
        let n = fs[0];
        if tape.shape(emb) != [n * n, self.cfg.d_g] {
            return Err(Error::dim(format!("geometry embedding {:?} does not match {n} objects", tape.shape(emb))));
        }
        Ok(n)
    }

    /// One head: ω_G, ω and the relation feature `f_R(n) = Σ_m ω[m][n]·(f_A^m W_V)`.
    pub fn head(&self, tape: &mut Tape, store: &ParamStore, i: usize, feats: Var, emb: Var) -> Result<HeadOutputs> {
        let n = self.check_inputs(tape, feats, emb)?;
        let wq = tape.param_from(store, &self.name(i, "WQ"))?;
        let wk = tape.param_from(store, &self.name(i, "WK"))?;
        let wv = tape.param_from(store, &self.name(i, "WV"))?;
        let wg = tape.param_from(store, &self.name(i, "WG"))?;
        let q = tape.matmul(feats, wq)?;
        let k = tape.matmul(feats, wk)?;
        let qt = tape.transpose(q)?;
        let dots = tape.matmul(k, qt)?;
        let logits = tape.scale(dots, 1.0 / (self.cfg.d_k as f64).sqrt());
        let g = tape.matmul(emb, wg)?;
        let g = tape.relu(g);
        let geometric = tape.reshape(g, &[n, n])?;
        let weights = tape.gated_softmax(logits, geometric)?;
        let v = tape.matmul(feats, wv)?;
        let feature = tape.relation_aggregate(weights, v)?;
        Ok(HeadOutputs { geometric, weights, feature })
    }

    /// `f_A + concat_i f_R^i`, with `emb` from [`geometry_embedding`].
    pub fn augment(&self, tape: &mut Tape, store: &ParamStore, feats: Var, emb: Var) -> Result<Var> {
        self.check_inputs(tape, feats, emb)?;
        let mut parts = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            parts.push(self.head(tape, store, i, feats, emb)?.feature);
        }
        let cat = tape.concat(&parts, 1)?;
        tape.add(feats, cat)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, feats: Var, boxes: &[BBox]) -> Result<Var> {
        let emb = tape.constant(geometry_embedding(boxes, self.cfg.d_g)?);
        self.augment(tape, store, feats, emb)
    }

    fn eval_head(&self, store: &ParamStore, i: usize, feats: &Tensor, boxes: &[BBox]) -> Result<(Tape, HeadOutputs)> {
        if i >= self.cfg.heads {
            return Err(Error::contract(format!("head {i} out of range")));
        }
        let mut tape = Tape::inference();
        let f = tape.constant(feats.clone());
        let emb = tape.constant(geometry_embedding(boxes, self.cfg.d_g)?);
        let out = self.head(&mut tape, store, i, f, emb)?;
        Ok((tape, out))
    }

    /// `[N×N]` rectified geometric gate of head `i`.
    pub fn geometric_weight(&self, store: &ParamStore, i: usize, boxes: &[BBox]) -> Result<Tensor> {
        let n = boxes.len();
        let mut tape = Tape::inference();
        let emb = tape.constant(geometry_embedding(boxes, self.cfg.d_g)?);
        let wg = tape.param_from(store, &self.name(i, "WG"))?;
        let g = tape.matmul(emb, wg)?;
        let g = tape.relu(g);
        let g = tape.reshape(g, &[n, n])?;
        Ok(tape.value(g).clone())
    }

    /// `[N×N]` relation weights of head `i`, columns indexed by target.
    pub fn relation_weight(&self, store: &ParamStore, i: usize, feats: &Tensor, boxes: &[BBox]) -> Result<Tensor> {
        let (tape, out) = self.eval_head(store, i, feats, boxes)?;
        Ok(tape.value(out.weights).clone())
    }

    /// `[N×d_f/N_r]` relation features of head `i`.
    pub fn relation_feature(&self, store: &ParamStore, i: usize, feats: &Tensor, boxes: &[BBox]) -> Result<Tensor> {
        let (tape, out) = self.eval_head(store, i, feats, boxes)?;
        Ok(tape.value(out.feature).clone())
    }

    pub fn relation_augment(&self, store: &ParamStore, feats: &Tensor, boxes: &[BBox]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let f = tape.constant(feats.clone());
        let out = self.forward(&mut tape, store, f, boxes)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_boxes(n: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
        (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
                BBox::new(x, y, x + rng.random_range(5.0..30.0), y + rng.random_range(5.0..30.0)).unwrap()
            })
            .collect()
    }

    fn setup(n: usize, cfg: RelationConfig, seed: u64) -> (RelationBlock, ParamStore, Tensor, Vec<BBox>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = RelationBlock::new("relation.", cfg).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        let feats = Tensor::randn(&[n, cfg.d_f], 1.0, &mut rng);
        (block, store, feats, random_boxes(n, &mut rng))
    }

    fn small() -> RelationConfig {
        RelationConfig { d_f: 8, heads: 2, d_k: 4, d_g: 16 }
    }

    // Loop-based oracles written from the per-pair definitions.
    fn ref_gate(block: &RelationBlock, store: &ParamStore, i: usize, boxes: &[BBox]) -> Vec<Vec<f64>> {
        let wg = store.get(&block.name(i, "WG")).unwrap().data();
        boxes
            .iter()
            .map(|m| {
                boxes
                    .iter()
                    .map(|n| {
                        let mut e = Vec::new();
                        for g in relative_geometry(m, n) {
                            for j in 0..block.cfg.d_g / 8 {
                                let lambda = 1000f64.powf(j as f64 / (block.cfg.d_g / 8 - 1) as f64);
                                e.push((100.0 * g / lambda).sin());
                                e.push((100.0 * g / lambda).cos());
                            }
                        }
                        e.iter().zip(wg).map(|(a, b)| a * b).sum::<f64>().max(0.0)
                    })
                    .collect()
            })
            .collect()
    }

    fn project(f: &[f64], w: &Tensor) -> Vec<f64> {
        let cols = w.shape()[1];
        (0..cols).map(|c| f.iter().enumerate().map(|(r, x)| x * w.at2(r, c)).sum()).collect()
    }

    fn ref_weights(block: &RelationBlock, store: &ParamStore, i: usize, feats: &Tensor, boxes: &[BBox]) -> Vec<Vec<f64>> {
        let n = boxes.len();
        let gate = ref_gate(block, store, i, boxes);
        let wq = store.get(&block.name(i, "WQ")).unwrap();
        let wk = store.get(&block.name(i, "WK")).unwrap();
        let mut w = vec![vec![0.0; n]; n];
        for t in 0..n {
            let q = project(feats.row(t), wq);
            let num: Vec<f64> = (0..n)
                .map(|s| {
                    let k = project(feats.row(s), wk);
                    let a: f64 = k.iter().zip(&q).map(|(x, y)| x * y).sum::<f64>() / (block.cfg.d_k as f64).sqrt();
                    gate[s][t] * a.exp()
                })
                .collect();
            let den: f64 = num.iter().sum();
            for s in 0..n {
                w[s][t] = if den > 0.0 { num[s] / den } else { 0.0 };
            }
        }
        w
    }

    fn ref_feature(block: &RelationBlock, store: &ParamStore, i: usize, feats: &Tensor, boxes: &[BBox]) -> Vec<Vec<f64>> {
        let w = ref_weights(block, store, i, feats, boxes);
        let wv = store.get(&block.name(i, "WV")).unwrap();
        (0..boxes.len())
            .map(|t| {
                let mut acc = vec![0.0; block.cfg.d_v()];
                for (s, ws) in w.iter().enumerate() {
                    for (a, v) in acc.iter_mut().zip(project(feats.row(s), wv)) {
                        *a += ws[t] * v;
                    }
                }
                acc
            })
            .collect()
    }

    #[test]
    fn closed_gate_gives_zero_geometric_weight() {
        let (block, mut store, feats, boxes) = setup(4, small(), 1);
        *store.get_mut(&block.name(0, "WG")).unwrap() = Tensor::zeros(&[16, 1]);
        let g = block.geometric_weight(&store, 0, &boxes).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let w = block.relation_weight(&store, 0, &feats, &boxes).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn geometric_weight_matches_reference() {
        let (block, store, _, boxes) = setup(3, small(), 2);
        let g = block.geometric_weight(&store, 1, &boxes).unwrap();
        let r = ref_gate(&block, &store, 1, &boxes);
        for m in 0..3 {
            for n in 0..3 {
                assert!((g.at2(m, n) - r[m][n]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn geometric_weight_translation_is_bitwise() {
        let (block, store, _, _) = setup(5, small(), 3);
        // Integer coordinates so the shift itself is exact.
        let boxes: Vec<BBox> =
            (0..5).map(|i| BBox::new(7.0 * i as f64, 3.0 * (i * i) as f64, 20.0 + 9.0 * i as f64, 80.0 - i as f64).unwrap()).collect();
        let shifted: Vec<BBox> = boxes.iter().map(|b| b.translated(64.0, -32.0)).collect();
        assert_eq!(block.geometric_weight(&store, 0, &boxes).unwrap(), block.geometric_weight(&store, 0, &shifted).unwrap());
    }

    #[test]
    fn single_object_attends_to_itself() {
        let (block, mut store, feats, boxes) = setup(1, small(), 4);
        // Coincident centres give a fixed embedding; pick W_G along it so the gate is open.
        let e = embed_pair(&boxes[0], &boxes[0], 16);
        *store.get_mut(&block.name(0, "WG")).unwrap() = Tensor::new(&[16, 1], e).unwrap();
        let w = block.relation_weight(&store, 0, &feats, &boxes).unwrap();
        assert_eq!(w.data(), &[1.0]);
        let f = block.relation_feature(&store, 0, &feats, &boxes).unwrap();
        let direct = project(feats.row(0), store.get(&block.name(0, "WV")).unwrap());
        for (a, b) in f.data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// W_G reading only the cos terms of the two size components, which are
    /// cos(0) = 1 for congruent boxes: every pair gets the same open gate.
    fn size_only_gate(d_g: usize) -> Tensor {
        let per = d_g / 4;
        let mut w = vec![0.0; d_g];
        for comp in 2..4 {
            for j in 0..per / 2 {
                w[comp * per + 2 * j + 1] = 1.0;
            }
        }
        Tensor::new(&[d_g, 1], w).unwrap()
    }

    #[test]
    fn mirrored_congruent_pair_splits_evenly() {
        let (block, mut store, _, _) = setup(2, small(), 5);
        *store.get_mut(&block.name(0, "WG")).unwrap() = size_only_gate(16);
        let boxes = [BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), BBox::new(30.0, 0.0, 40.0, 10.0).unwrap()];
        let row = [0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.4, 0.2];
        let feats = Tensor::from_rows(&[&row, &row]).unwrap();
        let w = block.relation_weight(&store, 0, &feats, &boxes).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn weights_and_features_match_reference() {
        for seed in 0..5 {
            let (block, store, feats, boxes) = setup(5, small(), 10 + seed);
            for i in 0..2 {
                let w = block.relation_weight(&store, i, &feats, &boxes).unwrap();
                let rw = ref_weights(&block, &store, i, &feats, &boxes);
                for t in 0..5 {
                    let col: f64 = (0..5).map(|s| w.at2(s, t)).sum();
                    assert!(col == 0.0 || (col - 1.0).abs() < 1e-6);
                    for s in 0..5 {
                        assert!((w.at2(s, t) - rw[s][t]).abs() < 1e-9);
                    }
                }
                let f = block.relation_feature(&store, i, &feats, &boxes).unwrap();
                let rf = ref_feature(&block, &store, i, &feats, &boxes);
                for t in 0..5 {
                    for j in 0..4 {
                        assert!((f.at2(t, j) - rf[t][j]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_weights_and_identical_features_reproduce_projection() {
        let (block, mut store, _, _) = setup(3, small(), 6);
        *store.get_mut(&block.name(0, "WG")).unwrap() = size_only_gate(16);
        let boxes = [
            BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            BBox::new(40.0, 0.0, 50.0, 10.0).unwrap(),
            BBox::new(0.0, 40.0, 10.0, 50.0).unwrap(),
        ];
        let row = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8];
        let feats = Tensor::from_rows(&[&row, &row, &row]).unwrap();
        let w = block.relation_weight(&store, 0, &feats, &boxes).unwrap();
        for &v in w.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let f = block.relation_feature(&store, 0, &feats, &boxes).unwrap();
        let direct = project(&row, store.get(&block.name(0, "WV")).unwrap());
        for t in 0..3 {
            for j in 0..4 {
                assert!((f.at2(t, j) - direct[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_maps_make_augment_identity() {
        let (block, mut store, feats, boxes) = setup(4, small(), 7);
        for i in 0..2 {
            *store.get_mut(&block.name(i, "WV")).unwrap() = Tensor::zeros(&[8, 4]);
        }
        assert_eq!(block.relation_augment(&store, &feats, &boxes).unwrap(), feats);
    }

    #[test]
    fn augment_matches_reference_composition() {
        let (block, store, feats, boxes) = setup(3, small(), 8);
        let out = block.relation_augment(&store, &feats, &boxes).unwrap();
        let h0 = ref_feature(&block, &store, 0, &feats, &boxes);
        let h1 = ref_feature(&block, &store, 1, &feats, &boxes);
        for t in 0..3 {
            let cat: Vec<f64> = h0[t].iter().chain(&h1[t]).cloned().collect();
            for j in 0..8 {
                assert!((out.at2(t, j) - (feats.at2(t, j) + cat[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn indivisible_heads_are_config_errors() {
        let cfg = RelationConfig { d_f: 10, heads: 4, d_k: 4, d_g: 16 };
        assert!(matches!(RelationBlock::new("r.", cfg), Err(Error::Config(_))));
    }

    #[test]
    fn augment_gradient_matches_finite_differences() {
        let (block, store, feats, boxes) = setup(5, small(), 9);
        let net = |tape: &mut Tape, s: &ParamStore| {
            let f = tape.constant(feats.clone());
            let out = block.forward(tape, s, f, &boxes)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum(sq))
        };
        let report = grad_check(&store, net, GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.per_tensor);
    }

    proptest! {
        #[test]
        fn shape_is_preserved(n in 1usize..6, heads in 1usize..4, per in 1usize..4, seed in any::<u64>()) {
            let cfg = RelationConfig { d_f: heads * per, heads, d_k: 3, d_g: 8 };
            let (block, store, feats, boxes) = setup(n, cfg, seed);
            let out = block.relation_augment(&store, &feats, &boxes).unwrap();
            prop_assert_eq!(out.shape(), feats.shape());
        }

        #[test]
        fn permutation_equivariance_is_exact(seed in any::<u64>()) {
            let (block, store, feats, boxes) = setup(5, small(), seed);
            let perm = [3usize, 0, 4, 1, 2];
            let rows: Vec<&[f64]> = perm.iter().map(|&p| feats.row(p)).collect();
            let pf = Tensor::from_rows(&rows).unwrap();
            let pb: Vec<BBox> = perm.iter().map(|&p| boxes[p]).collect();
            let out = block.relation_augment(&store, &feats, &boxes).unwrap();
            let pout = block.relation_augment(&store, &pf, &pb).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert_eq!(pout.row(i), out.row(p));
            }
        }
    }
}
