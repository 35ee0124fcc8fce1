//! Segmentation, classification and contrastive losses with set matching.

mod hungarian;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use hungarian::{hungarian_match, hungarian_match_with, MatchAssignment};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid_f64, BoolMatrix, Tape, Tensor, Var};

pub const DICE_EPS: f64 = 1.0;

fn gt_tensor(gt: &BoolMatrix) -> Tensor {
    Tensor::new(
        vec![gt.rows(), gt.cols()],
        gt.data()
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("mask shape")
}

fn check_mask(op: &'static str, tape: &Tape, logits: Var, gt: &BoolMatrix) -> Result<()> {
    let s = tape.shape(logits);
    if s != gt.shape() {
        return Err(Error::shape(op, s, &gt.shape()));
    }
    Ok(())
}

/// Mean binary cross-entropy with logits over every entry.
pub fn bce_mask_loss(tape: &mut Tape, logits: Var, gt: &BoolMatrix) -> Result<Var> {
    check_mask("bce_mask_loss", tape, logits, gt)?;
    let g = tape.constant(gt_tensor(gt));
    let sp = tape.softplus(logits);
    let xg = tape.mul(logits, g)?;
    let l = tape.sub(sp, xg)?;
    Ok(tape.mean(l))
}

/// `1 − (2·Σσ(x)·g + ε) / (Σσ(x) + Σg + ε)` per row, averaged over rows.
pub fn dice_loss(tape: &mut Tape, logits: Var, gt: &BoolMatrix) -> Result<Var> {
    check_mask("dice_loss", tape, logits, gt)?;
    let n = gt.rows();
    let g = gt_tensor(gt);
    let g_sum = Tensor::from_fn(&[n, 1], |i| g.row(i).iter().sum::<f64>() + DICE_EPS);
    let g = tape.constant(g);
    let p = tape.sigmoid(logits);
    let pg = tape.mul(p, g)?;
    let inter = tape.sum_rows(pg);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let ps = tape.sum_rows(p);
    let gs = tape.constant(g_sum);
    let den = tape.add(ps, gs)?;
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean softmax cross-entropy of each row against its label.
pub fn ce_class_loss(tape: &mut Tape, scores: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape("ce_class_loss", &s, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: s[1],
        });
    }
    let ls = tape.log_softmax(scores)?;
    let at: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    let picked = tape.pick(ls, &at)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Symmetric InfoNCE with the diagonal as positives.
pub fn contrastive_loss(tape: &mut Tape, score: Var) -> Result<Var> {
    let s = tape.shape(score).to_vec();
    if s.len() != 2 || s[0] != s[1] || s[0] < 2 {
        return Err(Error::shape("contrastive_loss", &s, &[2, 2]));
    }
    let diag: Vec<usize> = (0..s[0]).collect();
    let rows = ce_class_loss(tape, score, &diag)?;
    let t = tape.transpose(score)?;
    let cols = ce_class_loss(tape, t, &diag)?;
    let sum = tape.add(rows, cols)?;
    Ok(tape.scale(sum, 0.5))
}

/// Pairwise mean BCE between every prediction row and every target row.
pub fn pairwise_bce(logits: &Tensor, gt: &BoolMatrix) -> Tensor {
    let p = logits.cols() as f64;
    Tensor::from_fn(&[logits.rows(), gt.rows()], |k| {
        let (i, j) = (k / gt.rows(), k % gt.rows());
        logits
            .row(i)
            .iter()
            .zip(gt.row(j))
            .map(|(&x, &g)| softplus(x) - if g { x } else { 0.0 })
            .sum::<f64>()
            / p
    })
}

/// Pairwise dice loss between every prediction row and every target row.
pub fn pairwise_dice(logits: &Tensor, gt: &BoolMatrix) -> Tensor {
    let probs: Vec<Vec<f64>> = (0..logits.rows())
        .map(|i| logits.row(i).iter().map(|&x| sigmoid_f64(x)).collect())
        .collect();
    Tensor::from_fn(&[logits.rows(), gt.rows()], |k| {
        let (i, j) = (k / gt.rows(), k % gt.rows());
        let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
        for (&pv, &g) in probs[i].iter().zip(gt.row(j)) {
            ps += pv;
            if g {
                inter += pv;
                gs += 1.0;
            }
        }
        1.0 - (2.0 * inter + DICE_EPS) / (ps + gs + DICE_EPS)
    })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(vec![r, c], out).expect("softmax shape")
}

/// Weights of one segmentation term: class/query CE, mask BCE, mask DICE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl SegWeights {
    pub const DEFAULT: SegWeights = SegWeights {
        alpha: 2.0,
        beta: 5.0,
        gamma: 5.0,
    };
    pub const ZERO: SegWeights = SegWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    fn active(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0 || self.gamma > 0.0
    }
}

/// Linear weights of every loss term.
///
/// `pano`, `grd` and `iseg` weigh (CE, BCE, DICE). `intg` weighs (mask
/// BCE, mask DICE, entity-to-query CE). `theta` weighs image-text
/// contrast and `phi` interleave-image contrast.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub pano: SegWeights,
    pub grd: SegWeights,
    pub iseg: SegWeights,
    pub theta: f64,
    pub phi: f64,
    pub intg: SegWeights,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pano: SegWeights::DEFAULT,
            grd: SegWeights::DEFAULT,
            iseg: SegWeights::DEFAULT,
            theta: 1.0,
            phi: 1.0,
            intg: SegWeights::DEFAULT,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            pano: SegWeights::ZERO,
            grd: SegWeights::ZERO,
            iseg: SegWeights::ZERO,
            theta: 0.0,
            phi: 0.0,
            intg: SegWeights::ZERO,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.pano.alpha,
            self.pano.beta,
            self.pano.gamma,
            self.grd.alpha,
            self.grd.beta,
            self.grd.gamma,
            self.iseg.alpha,
            self.iseg.beta,
            self.iseg.gamma,
            self.theta,
            self.phi,
            self.intg.alpha,
            self.intg.beta,
            self.intg.gamma,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(
                "loss weights must be finite and nonnegative",
            ));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Class-per-query prediction: `class_logits` is `n_pred × (C + 1)` with the
/// last column meaning no-object.
#[derive(Clone, Copy, Debug)]
pub struct PanopticPrediction {
    pub class_logits: Var,
    pub mask_logits: Var,
}

/// Query-per-target prediction: `query_logits` is `n_gt × n_pred`, one
/// distribution over predictions per target.
#[derive(Clone, Copy, Debug)]
pub struct ReferringPrediction {
    pub query_logits: Var,
    pub mask_logits: Var,
}

#[derive(Clone, Debug)]
pub struct PanopticTarget {
    pub labels: Vec<usize>,
    pub masks: BoolMatrix,
}

#[derive(Clone, Debug, Default)]
pub struct TaskOutputs {
    pub pano: Option<PanopticPrediction>,
    pub grd: Option<ReferringPrediction>,
    pub iseg: Option<ReferringPrediction>,
    /// `B × B` image-caption scores.
    pub imgtextr: Option<Var>,
    /// `B × B` interleave-image scores.
    pub intr: Option<Var>,
    pub intg: Option<ReferringPrediction>,
}

#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub pano: Option<PanopticTarget>,
    pub grd: Option<BoolMatrix>,
    pub iseg: Option<BoolMatrix>,
    pub intg: Option<BoolMatrix>,
}

/// Total loss and each computed term's unweighted value.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: Var,
    pub terms: BTreeMap<String, f64>,
    pub matches: BTreeMap<String, MatchAssignment>,
}

impl LossReport {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.terms.iter().map(|(k, v)| v * term_weight(w, k)).sum()
    }
}

pub fn term_weight(w: &LossWeights, term: &str) -> f64 {
    match term {
        "ce_pano" => w.pano.alpha,
        "bce_pano" => w.pano.beta,
        "dice_pano" => w.pano.gamma,
        "ce_grd" => w.grd.alpha,
        "bce_grd" => w.grd.beta,
        "dice_grd" => w.grd.gamma,
        "ce_iseg" => w.iseg.alpha,
        "bce_iseg" => w.iseg.beta,
        "dice_iseg" => w.iseg.gamma,
        "vlc_imgtextr" => w.theta,
        "ic_intr" => w.phi,
        "ce_intg" => w.intg.alpha,
        "dice_intg" => w.intg.beta,
        "ice_intg" => w.intg.gamma,
        _ => 0.0,
    }
}

struct Acc<'a> {
    tape: &'a mut Tape,
    total: Option<Var>,
    terms: BTreeMap<String, f64>,
}

impl Acc<'_> {
    fn add(&mut self, name: &str, weight: f64, term: Var) -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        self.terms
            .insert(name.to_string(), self.tape.value(term).item());
        let wt = self.tape.scale(term, weight);
        self.total = Some(match self.total {
            None => wt,
            Some(t) => self.tape.add(t, wt)?,
        });
        Ok(())
    }
}

/// Hungarian matching for a class-per-query prediction.
pub fn match_panoptic(
    tape: &Tape,
    pred: &PanopticPrediction,
    gt: &PanopticTarget,
    w: &SegWeights,
) -> Result<MatchAssignment> {
    let logits = tape.value(pred.mask_logits);
    let classes = tape.value(pred.class_logits);
    if logits.cols() != gt.masks.cols()
        || gt.labels.len() != gt.masks.rows()
        || classes.rows() != logits.rows()
    {
        return Err(Error::shape(
            "match_panoptic",
            logits.shape(),
            &gt.masks.shape(),
        ));
    }
    let n_cls = classes.cols();
    if let Some(&bad) = gt.labels.iter().find(|&&l| l + 1 >= n_cls) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: n_cls - 1,
        });
    }
    let bce = pairwise_bce(logits, &gt.masks);
    let dice = pairwise_dice(logits, &gt.masks);
    let prob = softmax_rows(classes);
    Ok(hungarian_match_with(
        logits.rows(),
        gt.labels.len(),
        |i, j| w.beta * bce.at(i, j) + w.gamma * dice.at(i, j) - w.alpha * prob.at(i, gt.labels[j]),
    ))
}

/// Hungarian matching for a query-per-target prediction.
pub fn match_referring(
    tape: &Tape,
    pred: &ReferringPrediction,
    gt: &BoolMatrix,
    mask_w: (f64, f64),
    query_w: f64,
) -> Result<MatchAssignment> {
    let logits = tape.value(pred.mask_logits);
    let q = tape.value(pred.query_logits);
    if logits.cols() != gt.cols() || q.rows() != gt.rows() || q.cols() != logits.rows() {
        return Err(Error::shape("match_referring", q.shape(), &gt.shape()));
    }
    let bce = pairwise_bce(logits, gt);
    let dice = pairwise_dice(logits, gt);
    let prob = softmax_rows(q);
    Ok(hungarian_match_with(logits.rows(), gt.rows(), |i, j| {
        mask_w.0 * bce.at(i, j) + mask_w.1 * dice.at(i, j) - query_w * prob.at(j, i)
    }))
}

fn matched_masks(
    tape: &mut Tape,
    logits: Var,
    gt: &BoolMatrix,
    m: &MatchAssignment,
) -> Result<(Var, BoolMatrix)> {
    let preds: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
    let gts: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
    Ok((tape.gather_rows(logits, &preds)?, gt.select_rows(&gts)))
}

struct ReferringNames {
    query: &'static str,
    bce: &'static str,
    dice: &'static str,
}

fn referring_terms(
    acc: &mut Acc,
    pred: &ReferringPrediction,
    gt: &BoolMatrix,
    (wq, wb, wd): (f64, f64, f64),
    names: ReferringNames,
) -> Result<MatchAssignment> {
    let m = match_referring(acc.tape, pred, gt, (wb, wd), wq)?;
    if m.pairs.is_empty() {
        return Ok(m);
    }
    if wq > 0.0 {
        let labels: Vec<usize> = (0..gt.rows())
            .map(|j| {
                m.prediction_for(j)
                    .ok_or_else(|| Error::invalid("fewer predictions than targets"))
            })
            .collect::<Result<_>>()?;
        let ce = ce_class_loss(acc.tape, pred.query_logits, &labels)?;
        acc.add(names.query, wq, ce)?;
    }
    if wb > 0.0 || wd > 0.0 {
        let (lg, g) = matched_masks(acc.tape, pred.mask_logits, gt, &m)?;
        if wb > 0.0 {
            let b = bce_mask_loss(acc.tape, lg, &g)?;
            acc.add(names.bce, wb, b)?;
        }
        if wd > 0.0 {
            let d = dice_loss(acc.tape, lg, &g)?;
            acc.add(names.dice, wd, d)?;
        }
    }
    Ok(m)
}

/// Weighted sum of every term whose weight is positive. Set terms use
/// Hungarian-matched targets.
pub fn combined_loss(
    tape: &mut Tape,
    out: &TaskOutputs,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    let mut acc = Acc {
        tape,
        total: None,
        terms: BTreeMap::new(),
    };
    let mut matches = BTreeMap::new();

    if w.pano.active() {
        let pred = out.pano.as_ref().ok_or(Error::MissingOutput("pano"))?;
        let target = gt
            .pano
            .as_ref()
            .ok_or(Error::MissingOutput("pano target"))?;
        let m = match_panoptic(acc.tape, pred, target, &w.pano)?;
        let n_pred = acc.tape.value(pred.class_logits).rows();
        let no_object = acc.tape.value(pred.class_logits).cols() - 1;
        if w.pano.alpha > 0.0 {
            let labels: Vec<usize> = (0..n_pred)
                .map(|i| m.target_of(i).map_or(no_object, |j| target.labels[j]))
                .collect();
            let ce = ce_class_loss(acc.tape, pred.class_logits, &labels)?;
            acc.add("ce_pano", w.pano.alpha, ce)?;
        }
        if !m.pairs.is_empty() {
            let (lg, g) = matched_masks(acc.tape, pred.mask_logits, &target.masks, &m)?;
            if w.pano.beta > 0.0 {
                let b = bce_mask_loss(acc.tape, lg, &g)?;
                acc.add("bce_pano", w.pano.beta, b)?;
            }
            if w.pano.gamma > 0.0 {
                let d = dice_loss(acc.tape, lg, &g)?;
                acc.add("dice_pano", w.pano.gamma, d)?;
            }
        }
        matches.insert("pano".to_string(), m);
    }

    for (key, weights, pred, target, names) in [
        (
            "grd",
            w.grd,
            out.grd.as_ref(),
            gt.grd.as_ref(),
            ReferringNames {
                query: "ce_grd",
                bce: "bce_grd",
                dice: "dice_grd",
            },
        ),
        (
            "iseg",
            w.iseg,
            out.iseg.as_ref(),
            gt.iseg.as_ref(),
            ReferringNames {
                query: "ce_iseg",
                bce: "bce_iseg",
                dice: "dice_iseg",
            },
        ),
    ] {
        if !weights.active() {
            continue;
        }
        let pred = pred.ok_or(Error::MissingOutput(key))?;
        let target = target.ok_or(Error::MissingOutput("referring target"))?;
        let m = referring_terms(
            &mut acc,
            pred,
            target,
            (weights.alpha, weights.beta, weights.gamma),
            names,
        )?;
        matches.insert(key.to_string(), m);
    }

    if w.theta > 0.0 {
        let s = out.imgtextr.ok_or(Error::MissingOutput("imgtextr"))?;
        let l = contrastive_loss(acc.tape, s)?;
        acc.add("vlc_imgtextr", w.theta, l)?;
    }
    if w.phi > 0.0 {
        let s = out.intr.ok_or(Error::MissingOutput("intr"))?;
        let l = contrastive_loss(acc.tape, s)?;
        acc.add("ic_intr", w.phi, l)?;
    }

    if w.intg.active() {
        let pred = out.intg.as_ref().ok_or(Error::MissingOutput("intg"))?;
        let target = gt
            .intg
            .as_ref()
            .ok_or(Error::MissingOutput("intg target"))?;
        let names = ReferringNames {
            query: "ice_intg",
            bce: "ce_intg",
            dice: "dice_intg",
        };
        let m = referring_terms(
            &mut acc,
            pred,
            target,
            (w.intg.gamma, w.intg.alpha, w.intg.beta),
            names,
        )?;
        matches.insert("intg".to_string(), m);
    }

    let total = match acc.total {
        Some(t) => t,
        None => acc.tape.constant(Tensor::scalar(0.0)),
    };
    Ok(LossReport {
        total,
        terms: acc.terms,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_bce_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let gt =
            BoolMatrix::from_rows(&[vec![true, false, true], vec![false, false, true]]).unwrap();
        let l = bce_mask_loss(&mut tape, x, &gt).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_ce_is_ln_c() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 5]));
        let l = ce_class_loss(&mut tape, x, &[0, 4, 2]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pairwise_costs_match_tape_losses() {
        let logits = Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.7).sin() * 3.0);
        let gt = BoolMatrix::from_rows(&[
            vec![true, true, false, false],
            vec![false, true, false, true],
            vec![false; 4],
        ])
        .unwrap();
        let (b, d) = (pairwise_bce(&logits, &gt), pairwise_dice(&logits, &gt));
        for i in 0..2 {
            for j in 0..3 {
                let mut tape = Tape::new();
                let x = tape.constant(logits.select_rows(&[i]));
                let g = gt.select_rows(&[j]);
                let lb = bce_mask_loss(&mut tape, x, &g).unwrap();
                let ld = dice_loss(&mut tape, x, &g).unwrap();
                assert!((tape.value(lb).item() - b.at(i, j)).abs() < 1e-12);
                assert!((tape.value(ld).item() - d.at(i, j)).abs() < 1e-12);
            }
        }
    }
}
