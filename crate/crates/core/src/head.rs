//! Embedding projection and the two classification heads: the cosine-margin
//! head on the unit sphere and a plain softmax head used by ablations.

use crate::nn::{init_trunc_normal, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

pub const REAL: usize = 0;
pub const FAKE: usize = 1;

/// `f = LayerNorm(Linear(cls))`.
#[derive(Debug, Clone)]
pub struct EmbedProjection {
    pub linear: Linear,
    pub norm: LayerNorm,
}

impl EmbedProjection {
    pub fn new(store: &mut ParamStore, d_in: usize, d_emb: usize, rng: &mut Rng) -> Self {
        EmbedProjection {
            linear: Linear::new(store, "head.embed", d_in, d_emb, rng, true),
            norm: LayerNorm::new(store, "head.embed_norm", d_emb, true),
        }
    }

    pub fn forward(&self, s: &mut Session, cls: Var) -> Result<Var> {
        let y = self.linear.forward(s, cls)?;
        self.norm.forward(s, y)
    }
}

/// Unit feature rows, unit class-weight rows and their cosines `[B, 2]`.
pub struct NormalizedPair {
    pub x: Var,
    pub w: Var,
    pub cos: Var,
}

pub fn normalize_pair(tape: &mut Tape, f: Var, w: Var) -> Result<NormalizedPair> {
    let x = tape.l2_normalize(f, "normalize_feature")?;
    let wn = tape.l2_normalize(w, "normalize_class_weight")?;
    let wt = tape.transpose(wn)?;
    let cos = tape.matmul(x, wt)?;
    Ok(NormalizedPair { x, w: wn, cos })
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(TensorError::InvalidArgument {
                op: "one_hot",
                detail: format!("label {y} out of range for {classes} classes"),
            });
        }
        t.data_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

/// Mean negative log-likelihood of `labels` under `log_softmax(logits)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "cross_entropy",
            detail: format!("logits {shape:?} for {} labels", labels.len()),
        });
    }
    let onehot = tape.constant(one_hot(labels, shape[1])?);
    let lp = tape.log_softmax(logits);
    let picked = tape.mul(lp, onehot)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

/// Additive cosine margin loss: target logit `s(cos_y − m)`, others `s·cos_j`.
/// NaN cosines pass through to a NaN loss.
pub fn cosface_loss(tape: &mut Tape, cos: Var, labels: &[usize], s: f64, m: f64) -> Result<Var> {
    if let Some(bad) = tape.value(cos).data().iter().find(|c| c.abs() > 1.0 + 1e-12) {
        return Err(TensorError::NumericDomain {
            op: "cosface_loss",
            detail: format!("cosine {bad} outside [-1, 1]"),
        });
    }
    let classes = tape.shape(cos).last().copied().unwrap_or(0);
    let margin = one_hot(labels, classes)?.map(|v| v * s * m);
    let margin = tape.constant(margin);
    let scaled = tape.scale(cos, s);
    let logits = tape.sub(scaled, margin)?;
    cross_entropy(tape, logits, labels)
}

/// Margin-free decision on one row of scaled logits `[real, fake]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub p_fake: f64,
    pub label: usize,
}

pub fn predict_from_logits(logit_real: f64, logit_fake: f64) -> Prediction {
    let d = logit_fake - logit_real;
    let p_fake = if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    };
    Prediction {
        p_fake,
        label: if p_fake > 0.5 { FAKE } else { REAL },
    }
}

/// `p_fake = softmax(s·cos)[fake]`; ties resolve to real.
pub fn predict(cos_real: f64, cos_fake: f64, s: f64) -> Prediction {
    predict_from_logits(s * cos_real, s * cos_fake)
}

#[derive(Debug, Clone)]
pub struct CosfaceHead {
    pub weight: ParamId,
    pub s: f64,
    pub m: f64,
}

impl CosfaceHead {
    pub fn new(store: &mut ParamStore, d_emb: usize, s: f64, m: f64, rng: &mut Rng) -> Result<Self> {
        if !(s > 0.0) || !(m >= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "cosface_head",
                detail: format!("need s > 0 and m >= 0, got s={s}, m={m}"),
            });
        }
        let weight = store.add("head.class_weight", init_trunc_normal(&[2, d_emb], 0.02, rng), true);
        Ok(CosfaceHead { weight, s, m })
    }
}

/// Classifier variants: the hyperspherical head or a linear softmax head.
#[derive(Debug, Clone)]
pub enum Classifier {
    Cosface(CosfaceHead),
    Softmax(Linear),
}

/// What a head produces for one batch.
pub struct HeadOutput {
    /// Margin-free logits `[B, 2]` used for prediction.
    pub logits: Var,
    /// Cosines `[B, 2]` (cosine head only).
    pub cos: Option<Var>,
}

impl Classifier {
    pub fn forward(&self, s: &mut Session, f: Var) -> Result<HeadOutput> {
        match self {
            Classifier::Cosface(h) => {
                let w = s.p(h.weight);
                let pair = normalize_pair(&mut s.tape, f, w)?;
                let logits = s.tape.scale(pair.cos, h.s);
                Ok(HeadOutput {
                    logits,
                    cos: Some(pair.cos),
                })
            }
            Classifier::Softmax(lin) => Ok(HeadOutput {
                logits: lin.forward(s, f)?,
                cos: None,
            }),
        }
    }

    pub fn loss(&self, tape: &mut Tape, out: &HeadOutput, labels: &[usize]) -> Result<Var> {
        match (self, out.cos) {
            (Classifier::Cosface(h), Some(cos)) => cosface_loss(tape, cos, labels, h.s, h.m),
            _ => cross_entropy(tape, out.logits, labels),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn three_four_five() {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let w = tape.constant(t(&[2, 2], &[3.0, 4.0, -4.0, 3.0]));
        let p = normalize_pair(&mut tape, f, w).unwrap();
        assert_eq!(tape.value(p.x).data(), &[0.6, 0.8]);
        let cos = tape.value(p.cos).data();
        assert!((cos[0] - 1.0).abs() < 1e-12 && cos[1].abs() < 1e-12);
    }

    #[test]
    fn zero_feature_is_degenerate() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[1, 2]));
        let w = tape.constant(Tensor::ones(&[2, 2]));
        assert!(matches!(
            normalize_pair(&mut tape, f, w),
            Err(TensorError::Degenerate { .. })
        ));
    }

    #[test]
    fn symmetric_cosines_closed_form() {
        let mut tape = Tape::new();
        let cos = tape.constant(t(&[1, 2], &[0.3, 0.3]));
        let loss = cosface_loss(&mut tape, cos, &[1], 30.0, 0.35).unwrap();
        let expect = (1.0 + 10.5f64.exp()).ln();
        assert!((tape.value(loss).item() - expect).abs() <= 1e-9);
        assert!((expect - 10.500027).abs() < 1e-6);
    }

    #[test]
    fn perfect_separation_is_tiny() {
        let mut tape = Tape::new();
        let cos = tape.constant(t(&[1, 2], &[-1.0, 1.0]));
        let loss = cosface_loss(&mut tape, cos, &[1], 30.0, 0.35).unwrap();
        assert!(tape.value(loss).item() <= 1e-12);
    }

    #[test]
    fn rejects_out_of_range_cosine() {
        let mut tape = Tape::new();
        let cos = tape.constant(t(&[1, 2], &[1.5, 0.0]));
        assert!(cosface_loss(&mut tape, cos, &[0], 30.0, 0.35).is_err());
    }

    #[test]
    fn prediction_ties_and_extremes() {
        let p = predict(0.2, 0.2, 30.0);
        assert_eq!(p.p_fake, 0.5);
        assert_eq!(p.label, REAL);
        let p = predict(-1.0, 1.0, 30.0);
        assert!((p.p_fake - 1.0 / (1.0 + (-60f64).exp())).abs() < 1e-15);
        assert_eq!(p.label, FAKE);
    }

    #[test]
    fn stable_for_huge_scale() {
        let mut tape = Tape::new();
        let cos = tape.constant(t(&[2, 2], &[0.9, -0.9, -0.2, 0.1]));
        let loss = cosface_loss(&mut tape, cos, &[1, 0], 1e4, 0.35).unwrap();
        assert!(tape.value(loss).item().is_finite());
    }
}
