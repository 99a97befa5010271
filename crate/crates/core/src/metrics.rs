//! Segmentation metrics: dataset-level category IoU (`M_J`) and the
//! recall-weighted F-score (`M_F`).

use serde::{Deserialize, Serialize};

use crate::data::BACKGROUND;
use crate::error::{Error, Result};

/// `β²` of the F-score.
pub const BETA_SQ: f64 = 0.3;

/// `(1 + β²)·P·R / (β²·P + R)`, or 0 when both are 0.
pub fn fscore_pr(precision: f64, recall: f64) -> f64 {
    let den = BETA_SQ * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / den
    }
}

/// F-score from foreground counts. An empty prediction of an empty ground
/// truth scores 1; exactly one side empty scores 0.
pub fn fscore_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let pred = tp + fp;
    let gt = tp + fn_;
    match (pred, gt) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => fscore_pr(tp as f64 / pred as f64, tp as f64 / gt as f64),
    }
}

/// Foreground confusion counts `(tp, fp, fn)`.
pub fn foreground_counts(pred: &[bool], gt: &[bool]) -> Result<(u64, u64, u64)> {
    check_len(pred.len(), gt.len())?;
    let mut c = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            _ => {}
        }
    }
    Ok(c)
}

pub fn fscore(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (tp, fp, fn_) = foreground_counts(pred, gt)?;
    Ok(fscore_counts(tp, fp, fn_))
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::validation(format!("prediction has {a} pixels, ground truth has {b}")));
    }
    Ok(())
}

/// Per-category intersection and union counts accumulated over maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Jaccard {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl Jaccard {
    pub fn new(num_categories: usize) -> Self {
        Jaccard { intersection: vec![0; num_categories], union: vec![0; num_categories] }
    }

    /// Add one label map pair. Labels are `0..K` or [`BACKGROUND`].
    pub fn add(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        check_len(pred.len(), gt.len())?;
        let k = self.intersection.len();
        for &l in pred.iter().chain(gt) {
            if l != BACKGROUND && l as usize >= k {
                return Err(Error::validation(format!("label {l} out of range for {k} categories")));
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                if p != BACKGROUND {
                    self.intersection[p as usize] += 1;
                    self.union[p as usize] += 1;
                }
            } else {
                if p != BACKGROUND {
                    self.union[p as usize] += 1;
                }
                if g != BACKGROUND {
                    self.union[g as usize] += 1;
                }
            }
        }
        Ok(())
    }

    /// IoU per category; `None` where the union is empty.
    pub fn per_category(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| if u == 0 { None } else { Some(i as f64 / u as f64) })
            .collect()
    }

    /// Mean IoU over categories with a non-empty union; 1 when there are
    /// none.
    pub fn mean(&self) -> f64 {
        let v: Vec<f64> = self.per_category().into_iter().flatten().collect();
        if v.is_empty() {
            1.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// One-shot per-category IoU and `M_J` for a single pair of maps.
pub fn jaccard(pred: &[u32], gt: &[u32], num_categories: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let mut j = Jaccard::new(num_categories);
    j.add(pred, gt)?;
    Ok((j.per_category(), j.mean()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub index: usize,
    pub m_j: f64,
    pub m_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `null` for categories absent from both predictions and ground truth.
    pub per_category_iou: Vec<Option<f64>>,
    pub m_j: f64,
    /// Equal to `m_f_mean`.
    pub m_f: f64,
    /// F-score from counts pooled over the whole dataset.
    pub m_f_global: f64,
    /// Mean of per-frame F-scores.
    pub m_f_mean: f64,
    pub n_samples: usize,
    pub per_sample: Vec<SampleReport>,
}

/// Accumulates label maps into an [`EvalReport`].
#[derive(Clone, Debug)]
pub struct Evaluator {
    jaccard: Jaccard,
    counts: (u64, u64, u64),
    per_sample: Vec<SampleReport>,
}

impl Evaluator {
    pub fn new(num_categories: usize) -> Self {
        Evaluator { jaccard: Jaccard::new(num_categories), counts: (0, 0, 0), per_sample: Vec::new() }
    }

    pub fn add(&mut self, pred: &[u32], gt: &[u32]) -> Result<()> {
        let k = self.jaccard.intersection.len();
        let (_, m_j) = jaccard(pred, gt, k)?;
        self.jaccard.add(pred, gt)?;
        let pf: Vec<bool> = pred.iter().map(|&l| l != BACKGROUND).collect();
        let gf: Vec<bool> = gt.iter().map(|&l| l != BACKGROUND).collect();
        let (tp, fp, fn_) = foreground_counts(&pf, &gf)?;
        self.counts.0 += tp;
        self.counts.1 += fp;
        self.counts.2 += fn_;
        let index = self.per_sample.len();
        self.per_sample.push(SampleReport { index, m_j, m_f: fscore_counts(tp, fp, fn_) });
        Ok(())
    }

    pub fn finish(self) -> EvalReport {
        let n = self.per_sample.len();
        let m_f_mean =
            if n == 0 { 1.0 } else { self.per_sample.iter().map(|s| s.m_f).sum::<f64>() / n as f64 };
        EvalReport {
            per_category_iou: self.jaccard.per_category(),
            m_j: self.jaccard.mean(),
            m_f: m_f_mean,
            m_f_global: fscore_counts(self.counts.0, self.counts.1, self.counts.2),
            m_f_mean,
            n_samples: n,
            per_sample: self.per_sample,
        }
    }
}
