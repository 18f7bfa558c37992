use super::anchors::AnchorLabel;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub class: Var,
    pub boxes: Var,
}

/// Cross-entropy weights: positives plus the hardest negatives at
/// `ratio : 1`, each weighted `1 / max(P, 1)`. Ignored anchors get 0.
pub fn class_weights(logits: &Tensor, labels: &[AnchorLabel], ratio: f64) -> Result<Vec<f64>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim(format!("class logits {s:?} for {} anchors", labels.len())));
    }
    let c = s[1];
    let positives = labels.iter().filter(|l| l.is_positive()).count();
    let norm = 1.0 / positives.max(1) as f64;
    let mut negatives: Vec<(f64, usize)> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == AnchorLabel::Negative)
        .map(|(i, _)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            (lse - row[0], i)
        })
        .collect();
    // Hardest first; index breaks ties.
    negatives.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let keep = ((ratio * positives.max(1) as f64).round() as usize).min(negatives.len());
    let mut w = vec![0.0; labels.len()];
    for (i, l) in labels.iter().enumerate() {
        if l.is_positive() {
            w[i] = norm;
        }
    }
    for &(_, i) in &negatives[..keep] {
        w[i] = norm;
    }
    Ok(w)
}

pub fn class_loss(tape: &mut Tape, logits: Var, labels: &[AnchorLabel], ratio: f64) -> Result<Var> {
    let w = class_weights(tape.value(logits), labels, ratio)?;
    let targets: Vec<usize> = labels.iter().map(AnchorLabel::class_target).collect();
    tape.cross_entropy(logits, &targets, &w)
}

/// Smooth-L1 over positive anchors' deltas, normalised by their count.
/// Exactly zero when there are no positives.
pub fn box_loss(tape: &mut Tape, deltas: Var, labels: &[AnchorLabel]) -> Result<Var> {
    let s = tape.shape(deltas).to_vec();
    if s.len() != 2 || s[1] != 4 || s[0] != labels.len() {
        return Err(Error::dim(format!("box deltas {s:?} for {} anchors", labels.len())));
    }
    let (idx, targets): (Vec<usize>, Vec<[f64; 4]>) = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            AnchorLabel::Positive { deltas, .. } => Some((i, *deltas)),
            _ => None,
        })
        .unzip();
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let p = tape.gather_rows(deltas, &idx)?;
    let t = tape.constant(Tensor::new(&[idx.len(), 4], targets.concat())?);
    let d = tape.sub(p, t)?;
    let h = tape.smooth_l1(d);
    let sum = tape.sum(h);
    Ok(tape.scale(sum, 1.0 / idx.len() as f64))
}

/// Class and box terms summed 1 : 1.
pub fn detection_loss(tape: &mut Tape, logits: Var, deltas: Var, labels: &[AnchorLabel], ratio: f64) -> Result<LossParts> {
    let class = class_loss(tape, logits, labels, ratio)?;
    let boxes = box_loss(tape, deltas, labels)?;
    let total = tape.add(class, boxes)?;
    Ok(LossParts { total, class, boxes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels() -> Vec<AnchorLabel> {
        vec![
            AnchorLabel::Positive { gt: 0, label: 1, deltas: [0.3, -0.2, 0.1, 1.7] },
            AnchorLabel::Negative,
            AnchorLabel::Ignored,
            AnchorLabel::Positive { gt: 1, label: 2, deltas: [-1.4, 0.6, -0.05, 0.2] },
        ]
    }

    fn one_hot(labels: &[AnchorLabel], scale: f64) -> Tensor {
        let mut d = vec![0.0; labels.len() * 3];
        for (i, l) in labels.iter().enumerate() {
            d[i * 3 + l.class_target()] = scale;
        }
        Tensor::new(&[labels.len(), 3], d).unwrap()
    }

    fn perfect_deltas(labels: &[AnchorLabel]) -> Tensor {
        let rows: Vec<f64> = labels
            .iter()
            .flat_map(|l| match l {
                AnchorLabel::Positive { deltas, .. } => *deltas,
                _ => [0.0; 4],
            })
            .collect();
        Tensor::new(&[labels.len(), 4], rows).unwrap()
    }

    fn loss_value(logits: Tensor, deltas: Tensor, labels: &[AnchorLabel]) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let d = tape.constant(deltas);
        let parts = detection_loss(&mut tape, l, d, labels, 3.0).unwrap();
        tape.value(parts.total).item()
    }

    #[test]
    fn perfect_predictions_stay_under_the_softmax_floor() {
        let l = labels();
        let mut prev = f64::INFINITY;
        for scale in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
            let v = loss_value(one_hot(&l, scale), perfect_deltas(&l), &l);
            // Three weighted rows, each at −log of the largest softmax entry.
            let ceiling = scale.exp() / (scale.exp() + 2.0);
            let floor = 3.0 / 2.0 * -ceiling.ln();
            assert!(v <= floor + 1e-12, "scale {scale}: {v} > {floor}");
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn zero_positives_give_zero_box_term() {
        let l = vec![AnchorLabel::Negative, AnchorLabel::Ignored];
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 3]));
        let d = tape.constant(Tensor::full(&[2, 4], 3.0));
        let parts = detection_loss(&mut tape, logits, d, &l, 3.0).unwrap();
        assert_eq!(tape.value(parts.boxes).item(), 0.0);
        assert!(tape.value(parts.class).item() > 0.0);
    }

    #[test]
    fn hard_negatives_are_the_most_confident_mistakes() {
        let l = vec![
            AnchorLabel::Positive { gt: 0, label: 1, deltas: [0.0; 4] },
            AnchorLabel::Negative,
            AnchorLabel::Negative,
            AnchorLabel::Negative,
            AnchorLabel::Negative,
            AnchorLabel::Negative,
        ];
        let logits = Tensor::from_rows(&[
            &[0.0, 1.0, 0.0],
            &[5.0, 0.0, 0.0],
            &[0.0, 3.0, 0.0],
            &[1.0, 1.0, 1.0],
            &[0.0, 0.0, 2.0],
            &[9.0, 0.0, 0.0],
        ])
        .unwrap();
        let w = class_weights(&logits, &l, 3.0).unwrap();
        assert_eq!(w, vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn four_anchor_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("logits", Tensor::randn(&[4, 3], 1.0, &mut rng));
        store.insert("deltas", Tensor::randn(&[4, 4], 1.5, &mut rng));
        let l = labels();
        let report = grad_check(
            &store,
            |tape, s| {
                let a = tape.param_from(s, "logits")?;
                let b = tape.param_from(s, "deltas")?;
                Ok(detection_loss(tape, a, b, &l, 3.0)?.total)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }
}
