use serde::{Deserialize, Serialize};

use super::matching::{hungarian_match, match_cost, MatchResult};
use super::LossWeights;
use crate::detector::{ForwardOutput, TokenHeads};
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn compose(cls: f64, l1: f64, giou: f64, weights: LossWeights) -> Self {
        Self {
            cls,
            l1,
            giou,
            total: weights.cls * cls + weights.l1 * l1 + weights.giou * giou,
            weights,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub matching: MatchResult,
}

/// Decoder loss plus, when the forward pass carries token heads, the same
/// loss over every encoder token. Breakdown components are summed.
#[derive(Debug, Clone)]
pub struct ForwardLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub matching: MatchResult,
    pub encoder_matching: Option<MatchResult>,
}

pub fn forward_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    heads: Option<TokenHeads>,
    labels: &[usize],
    gt_boxes: &[[f64; 4]],
    weights: &LossWeights,
    fixed: Option<(&MatchResult, Option<&MatchResult>)>,
) -> Result<ForwardLoss> {
    let dec = detection_loss(tape, out.logits, out.boxes, labels, gt_boxes, weights, fixed.map(|f| f.0))?;
    let Some(heads) = heads else {
        return Ok(ForwardLoss {
            total: dec.total,
            breakdown: dec.breakdown,
            matching: dec.matching,
            encoder_matching: None,
        });
    };
    let enc = detection_loss(tape, heads.logits, heads.boxes, labels, gt_boxes, weights, fixed.and_then(|f| f.1))?;
    let (a, b) = (dec.breakdown, enc.breakdown);
    Ok(ForwardLoss {
        total: tape.add(dec.total, enc.total)?,
        breakdown: LossBreakdown::compose(a.cls + b.cls, a.l1 + b.l1, a.giou + b.giou, *weights),
        matching: dec.matching,
        encoder_matching: Some(enc.matching),
    })
}

/// Matched-pair classification, L1 and GIoU losses for one image.
///
/// `logits` is `[Q, K+1]` with the background slot last, `boxes` is `[Q, 4]`.
/// Unmatched queries are pushed to the background slot with weight
/// `weights.background`, averaged over the unmatched set.
pub fn detection_loss(
    tape: &mut Tape,
    logits: Var,
    boxes: Var,
    labels: &[usize],
    gt_boxes: &[[f64; 4]],
    weights: &LossWeights,
    fixed_matching: Option<&MatchResult>,
) -> Result<ImageLoss> {
    let (q, slots) = {
        let t = tape.value(logits);
        (t.rows(), t.cols())
    };
    if slots < 2 {
        return Err(Error::Dimension("logits need at least one category and the background slot".into()));
    }
    let bg = slots - 1;
    if let Some(&y) = labels.iter().find(|&&y| y >= bg) {
        return Err(Error::Validation(format!("label {y} out of range for {bg} prompts")));
    }
    let matching = match fixed_matching {
        Some(m) => m.clone(),
        None if labels.is_empty() => MatchResult {
            pairs: Vec::new(),
            unmatched: (0..q).collect(),
        },
        None => {
            let probs = softmax_rows(tape.value(logits))?;
            let scores: Vec<Vec<f64>> = probs.chunks(slots).map(<[f64]>::to_vec).collect();
            let pred: Vec<[f64; 4]> = tape
                .values(boxes)
                .chunks(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect();
            let cost = match_cost(&scores, &pred, labels, gt_boxes, weights)?;
            hungarian_match(&cost)?
        }
    };
    let n = matching.pairs.len();
    let u = matching.unmatched.len();
    let mut targets = vec![bg; q];
    let mut w = vec![0.0; q];
    for &(i, j) in &matching.pairs {
        targets[i] = labels[j];
        w[i] = 1.0 / n as f64;
    }
    for &i in &matching.unmatched {
        w[i] = weights.background / u as f64;
    }
    let cls = tape.cross_entropy(logits, &targets, &w)?;
    let mut total = tape.scale(cls, weights.cls);
    let (mut l1v, mut giouv) = (0.0, 0.0);
    if n > 0 {
        let rows: Vec<usize> = matching.pairs.iter().map(|p| p.0).collect();
        let target: Vec<f64> = matching.pairs.iter().flat_map(|p| gt_boxes[p.1]).collect();
        let picked = tape.gather_rows(boxes, &rows)?;
        let l1 = tape.l1_loss(picked, &target)?;
        let giou = tape.giou_loss(picked, &target)?;
        l1v = tape.scalar(l1);
        giouv = tape.scalar(giou);
        let a = tape.scale(l1, weights.l1);
        let b = tape.scale(giou, weights.giou);
        total = tape.add(total, a)?;
        total = tape.add(total, b)?;
    }
    let breakdown = LossBreakdown::compose(tape.scalar(cls), l1v, giouv, *weights);
    Ok(ImageLoss {
        total,
        breakdown,
        matching,
    })
}
