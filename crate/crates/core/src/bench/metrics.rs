use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::BoolMatrix;

fn check_pairs(pred: &[BoolMatrix], gt: &[BoolMatrix]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.shape() != g.shape() {
            return Err(Error::shape("mask pair", &p.shape(), &g.shape()));
        }
    }
    Ok(())
}

fn inter_union(p: &BoolMatrix, g: &BoolMatrix) -> (usize, usize) {
    p.data()
        .iter()
        .zip(g.data())
        .fold((0, 0), |(i, u), (&a, &b)| {
            (i + usize::from(a && b), u + usize::from(a || b))
        })
}

/// IoU of one pair; two empty masks count as a perfect match.
pub fn iou(p: &BoolMatrix, g: &BoolMatrix) -> f64 {
    let (i, u) = inter_union(p, g);
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Pooled IoU: total intersection over total union.
pub fn metric_ciou(pred: &[BoolMatrix], gt: &[BoolMatrix]) -> Result<f64> {
    check_pairs(pred, gt)?;
    let (i, u) = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| inter_union(p, g))
        .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Mean per-pair IoU.
pub fn metric_miou(pred: &[BoolMatrix], gt: &[BoolMatrix]) -> Result<f64> {
    check_pairs(pred, gt)?;
    if pred.is_empty() {
        return Err(Error::invalid("no mask pairs"));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| iou(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Fraction of queries whose target is among the first `k` ranked items.
/// `k` beyond the ranking length is clamped.
pub fn metric_ir_at_k(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if rankings.len() != targets.len() || rankings.is_empty() {
        return Err(Error::invalid(format!(
            "{} rankings for {} targets",
            rankings.len(),
            targets.len()
        )));
    }
    let mut hits = 0;
    for (r, &t) in rankings.iter().zip(targets) {
        let kk = if k > r.len() {
            log::warn!("k = {k} exceeds ranking length {}; clamping", r.len());
            r.len()
        } else {
            k
        };
        if r[..kk].contains(&t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Grid partition: each cell's segment and each segment's category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub categories: Vec<usize>,
}

impl Partition {
    fn check(&self) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.categories.len()) {
            return Err(Error::invalid(format!(
                "cell labelled with missing segment {bad}"
            )));
        }
        Ok(())
    }

    fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.categories.len()];
        for &l in &self.labels {
            a[l] += 1;
        }
        a
    }
}

/// Panoptic quality with matches at IoU > 0.5 between same-category
/// segments. Segments covering no cell are ignored.
pub fn metric_pq(pred: &Partition, gt: &Partition) -> Result<f64> {
    pred.check()?;
    gt.check()?;
    if pred.labels.len() != gt.labels.len() || pred.labels.is_empty() {
        return Err(Error::invalid("partitions cover different grids"));
    }
    let (pa, ga) = (pred.areas(), gt.areas());
    let mut inter = vec![0usize; pa.len() * ga.len()];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        inter[p * ga.len() + g] += 1;
    }
    let mut tp_iou = 0.0;
    let mut tp = 0usize;
    let mut pred_matched = vec![false; pa.len()];
    let mut gt_matched = vec![false; ga.len()];
    for p in 0..pa.len() {
        for g in 0..ga.len() {
            let i = inter[p * ga.len() + g];
            if i == 0 || pred.categories[p] != gt.categories[g] {
                continue;
            }
            let u = pa[p] + ga[g] - i;
            let v = i as f64 / u as f64;
            if v > 0.5 {
                tp_iou += v;
                tp += 1;
                pred_matched[p] = true;
                gt_matched[g] = true;
            }
        }
    }
    let fp = (0..pa.len())
        .filter(|&p| pa[p] > 0 && !pred_matched[p])
        .count();
    let fn_ = (0..ga.len())
        .filter(|&g| ga[g] > 0 && !gt_matched[g])
        .count();
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    Ok(if denom == 0.0 { 1.0 } else { tp_iou / denom })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&str]) -> BoolMatrix {
        BoolMatrix::from_rows(
            &rows
                .iter()
                .map(|r| r.chars().map(|c| c == '#').collect())
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn iou_pairs() {
        let a = m(&["##..", "...."]);
        let b = m(&["#...", "#..."]);
        assert_eq!(
            metric_miou(&[a.clone(), a.clone()], &[a.clone(), b.clone()]).unwrap(),
            2.0 / 3.0
        );
        assert_eq!(
            metric_ciou(&[a.clone(), a.clone()], &[a.clone(), b]).unwrap(),
            3.0 / 5.0
        );
        let e = m(&["....", "...."]);
        assert_eq!(
            metric_miou(std::slice::from_ref(&e), std::slice::from_ref(&e)).unwrap(),
            1.0
        );
    }

    #[test]
    fn pq_halves_against_whole() {
        let gt = Partition {
            labels: vec![0, 0, 1, 1],
            categories: vec![2, 2],
        };
        let whole = Partition {
            labels: vec![0; 4],
            categories: vec![2],
        };
        assert_eq!(metric_pq(&gt, &gt).unwrap(), 1.0);
        assert_eq!(metric_pq(&whole, &gt).unwrap(), 0.0);
    }

    #[test]
    fn ir_at_k() {
        let r = vec![vec![3, 1, 2], vec![0, 2, 1]];
        assert_eq!(metric_ir_at_k(&r, &[3, 1], 1).unwrap(), 0.5);
        assert_eq!(metric_ir_at_k(&r, &[3, 1], 10).unwrap(), 1.0);
    }
}
