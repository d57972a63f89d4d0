//! Training objectives: segmentation cross-entropy, prediction consistency,
//! feature-statistics style distance and the adversarial transformer loss.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dft::HallucinationTrace;
use crate::error::{Error, Result};
use crate::featstats::{channel_stats_var, content_loss, instance_norm_mean, StatsVar};
use crate::nets::{Encoder, SegNet};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Checks labels against the class count; returns the number of labelled pixels.
pub fn check_labels(labels: &[u8], num_classes: usize) -> Result<usize> {
    let mut counted = 0;
    for &l in labels {
        if l == IGNORE_LABEL {
            continue;
        }
        if l as usize >= num_classes {
            return Err(Error::InvalidLabel {
                label: l as u32,
                classes: num_classes,
            });
        }
        counted += 1;
    }
    Ok(counted)
}

/// Mean pixel cross-entropy over labelled pixels; zero when none are labelled.
pub fn seg_loss<'t, T: Scalar>(logits: Var<'t, T>, labels: &[u8]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("logits must be (B, K, H, W), got {shape:?}")));
    }
    if labels.len() != shape[0] * shape[2] * shape[3] {
        return Err(Error::Shape(format!(
            "{} labels for logits {shape:?}",
            labels.len()
        )));
    }
    if check_labels(labels, shape[1])? == 0 {
        warn!("segmentation batch has no labelled pixels; loss is zero");
    }
    Ok(logits.cross_entropy(labels, IGNORE_LABEL).0)
}

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-8;

/// Per-pixel `KL(p_sty ‖ p_src)` of two probability maps, averaged over
/// pixels and batch, with probabilities floored at [`PROB_FLOOR`] inside the
/// logarithms. Either input may carry gradients.
pub fn consistency_loss<'t, T: Scalar>(p_sty: Var<'t, T>, p_src: Var<'t, T>) -> Result<Var<'t, T>> {
    let p = p_sty.value();
    let q = p_src.value();
    if p.shape() != q.shape() || p.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "consistency needs equal 4-d probability maps, got {:?} and {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let floor = T::lit(PROB_FLOOR);
    let (bs, _, h, w) = p.dims4()?;
    let n = T::lit((bs * h * w) as f64);
    let value = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&pv, &qv)| pv * (pv.max(floor).ln() - qv.max(floor).ln()))
        .sum::<T>()
        / n;
    Ok(p_sty.tape().op(Tensor::scalar(value), &[p_sty, p_src], move |g, needs| {
        let scale = g.data()[0] / n;
        let grad_p = needs[0].then(|| {
            p.zip_map(&q, |pv, qv| {
                let inner = if pv > floor { T::one() } else { T::zero() };
                scale * (pv.max(floor).ln() - qv.max(floor).ln() + inner)
            })
        });
        let grad_q = needs[1].then(|| {
            p.zip_map(&q, |pv, qv| if qv > floor { -scale * pv / qv } else { T::zero() })
        });
        vec![grad_p, grad_q]
    }))
}

/// `Σ_l mean_b(‖μ_t − μ_p‖ + ‖σ_t − σ_p‖)` over paired layers. Targets with
/// batch size 1 are broadcast against the probes.
pub fn style_loss<'t, T: Scalar>(targets: &[StatsVar<'t, T>], probes: &[StatsVar<'t, T>]) -> Result<Var<'t, T>> {
    if targets.len() != probes.len() || targets.is_empty() {
        return Err(Error::Shape(format!(
            "style loss needs matching non-empty layer lists, got {} and {}",
            targets.len(),
            probes.len()
        )));
    }
    let mut total: Option<Var<'t, T>> = None;
    for (t, p) in targets.iter().zip(probes) {
        let ps = p.mean.shape();
        let ts = t.mean.shape();
        if ts[1] != ps[1] || (ts[0] != ps[0] && ts[0] != 1) {
            return Err(Error::Shape(format!("style statistics {ts:?} vs {ps:?}")));
        }
        let tm = t.mean.broadcast_as(&ps);
        let tsd = t.std.broadcast_as(&ps);
        let term = instance_norm_mean(tm - p.mean) + instance_norm_mean(tsd - p.std);
        total = Some(match total {
            Some(acc) => acc + term,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Scalar values of every objective recorded in one training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub cont: f64,
    pub content: f64,
    pub style_pos: f64,
    pub style_neg: f64,
    pub ash_plus: f64,
}

impl LossBreakdown {
    /// Builds a breakdown whose `ash_plus` is composed from the parts.
    pub fn from_terms(seg: f64, cont: f64, content: f64, style_pos: f64, style_neg: f64) -> Self {
        let mut out = Self {
            seg,
            cont,
            content,
            style_pos,
            style_neg,
            ash_plus: 0.0,
        };
        out.ash_plus = out.composed_ash_plus();
        out
    }

    pub fn composed_ash_plus(&self) -> f64 {
        -self.cont + self.content + self.style_pos - self.style_neg
    }
}

/// The four transformer-loss terms and their composition, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct AshPlusTerms<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub cont: Var<'t, T>,
    pub content: Var<'t, T>,
    pub style_pos: Var<'t, T>,
    pub style_neg: Var<'t, T>,
}

impl<T: Scalar> AshPlusTerms<'_, T> {
    pub fn breakdown(&self, seg: f64) -> LossBreakdown {
        LossBreakdown::from_terms(
            seg,
            self.cont.item().as_f64(),
            self.content.item().as_f64(),
            self.style_pos.item().as_f64(),
            self.style_neg.item().as_f64(),
        )
    }
}

/// `−cont + content + style_pos − style_neg` for one hallucination trace.
///
/// The stylized images are re-encoded and segmented with frozen networks.
/// Positive style targets are the style image's shallow statistics plus the
/// perturbed style features at the deepest stage; negative targets are the
/// source image's statistics at every stage.
pub fn ash_plus_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    trace: &HallucinationTrace<'t, T>,
    encoder: &Encoder<T>,
    segmenter: &SegNet<T>,
) -> Result<AshPlusTerms<'t, T>> {
    let pe = encoder.params().bind(tape, false);
    let pg = segmenter.params().bind(tape, false);
    let probe_feats = encoder.forward(&pe, trace.stylized);
    let sty_probs = segmenter.forward(&pg, trace.stylized).softmax_channels();
    let cont = consistency_loss(sty_probs, trace.src_logits.softmax_channels())?;
    let f_src = *trace.src_feats.last().expect("stages");
    let content = content_loss(f_src, trace.merged)?;

    let last = probe_feats.len() - 1;
    let probes: Vec<_> = probe_feats.iter().map(|&f| channel_stats_var(f)).collect();
    let positive: Vec<_> = trace.style_feats[..last]
        .iter()
        .map(|&f| channel_stats_var(f))
        .chain(std::iter::once(channel_stats_var(trace.style_perturbed)))
        .collect();
    let negative: Vec<_> = trace.src_feats.iter().map(|&f| channel_stats_var(f)).collect();
    let style_pos = style_loss(&positive, &probes)?;
    let style_neg = style_loss(&negative, &probes)?;
    let total = content - cont + style_pos - style_neg;
    Ok(AshPlusTerms {
        total,
        cont,
        content,
        style_pos,
        style_neg,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        for k in [2usize, 5, 19] {
            let tape = Tape::<f64>::new();
            let logits = tape.constant(Tensor::zeros(vec![2, k, 3, 3]));
            let labels: Vec<u8> = (0..18).map(|i| (i % k) as u8).collect();
            let l = seg_loss(logits, &labels).unwrap().item();
            assert!((l - (k as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn ignored_pixels_and_bad_labels() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 3, 1, 2]));
        assert_eq!(seg_loss(logits, &[IGNORE_LABEL, IGNORE_LABEL]).unwrap().item(), 0.0);
        assert!(matches!(
            seg_loss(logits, &[0, 3]),
            Err(Error::InvalidLabel { label: 3, classes: 3 })
        ));
        assert!(seg_loss(logits, &[0]).is_err());
    }

    #[test]
    fn consistency_zero_at_equality_and_positive_otherwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::randn(vec![2, 4, 3, 3], &mut rng)).softmax_channels();
        let b = tape.constant(Tensor::<f64>::randn(vec![2, 4, 3, 3], &mut rng)).softmax_channels();
        assert!(consistency_loss(a, a).unwrap().item().abs() < 1e-15);
        assert!(consistency_loss(a, b).unwrap().item() > 0.0);
        assert!(consistency_loss(a, tape.constant(Tensor::zeros(vec![2, 4, 3, 2]))).is_err());
    }

    #[test]
    fn consistency_hand_case_with_floor() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![1.0f64, 0.0]).unwrap());
        let q = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![0.5f64, 0.5]).unwrap());
        let v = consistency_loss(p, q).unwrap().item();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn style_loss_hand_case() {
        let tape = Tape::<f64>::new();
        let t = StatsVar {
            mean: tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap()),
            std: tape.constant(Tensor::ones(vec![1, 2, 1, 1])),
        };
        let p = StatsVar {
            mean: tape.constant(Tensor::zeros(vec![1, 2, 1, 1])),
            std: tape.constant(Tensor::ones(vec![1, 2, 1, 1])),
        };
        assert_eq!(style_loss(&[t], &[p]).unwrap().item(), 5.0);
        assert_eq!(style_loss(&[p], &[t]).unwrap().item(), 5.0);
    }

    #[test]
    fn style_loss_zero_for_identical_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let f = tape.constant(Tensor::<f64>::randn(vec![2, 3, 4, 4], &mut rng));
        let s = channel_stats_var(f);
        assert_eq!(style_loss(&[s, s], &[s, s]).unwrap().item(), 0.0);
        assert!(style_loss(&[s], &[s, s]).is_err());
    }

    #[test]
    fn breakdown_composition_is_exact() {
        let b = LossBreakdown::from_terms(0.3, 0.125, 2.5, 1.75, 0.5);
        assert_eq!(b.ash_plus.to_bits(), (-0.125f64 + 2.5 + 1.75 - 0.5).to_bits());
    }
}
