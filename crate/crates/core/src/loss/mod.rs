//! Set-prediction losses: matching, classification, mask BCE and dice, and
//! their weighted total.

mod hungarian;

pub use hungarian::{hungarian, MatchResult};

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, LayerOutput};
use crate::tensor::{kernels, lit, sigmoid, Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_mask: f64,
    pub lambda_pac: f64,
    /// Class weight of the "no object" label in the cross-entropy.
    pub no_object_weight: f64,
    /// Supervise every decoder block (and the initial prediction), not just
    /// the last.
    pub aux_losses: bool,
    pub use_pac_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_cls: 2.0,
            lambda_mask: 5.0,
            lambda_pac: 1.0,
            no_object_weight: 0.1,
            aux_losses: true,
            use_pac_loss: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_mask, self.lambda_pac, self.no_object_weight];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.no_object_weight == 0.0 {
            return Err(Error::config("no_object_weight must be positive"));
        }
        Ok(())
    }
}

/// `λ_cls·cls + λ_mask·mask + λ_pac·pac`.
pub fn weighted_total(cls: f64, mask: f64, pac: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_cls * cls + cfg.lambda_mask * mask + cfg.lambda_pac * pac
}

/// `1 − (2·Σ p·g + 1) / (Σ p + Σ g + 1)`.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> f64 {
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let sp: f64 = pred.iter().sum();
    let sg: f64 = gt.iter().sum();
    1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0)
}

/// Mean binary cross-entropy of `σ(logits)` against `gt`, stable form.
pub fn bce_logits(logits: &[f64], gt: &[f64]) -> f64 {
    let s: f64 = logits.iter().zip(gt).map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()).sum();
    s / logits.len() as f64
}

/// Supervision for one frame at mask resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub categories: Vec<usize>,
    /// Area-averaged masks, each `h·w` values in `[0, 1]`.
    pub masks: Vec<Vec<f64>>,
    pub size: (usize, usize),
}

impl Targets {
    /// Sounding on-screen objects of `sample`, masks box-averaged down to
    /// `size`.
    pub fn from_sample(sample: &Sample, size: (usize, usize)) -> Result<Self> {
        let (h, w) = (sample.height(), sample.width());
        if size.0 == 0 || size.1 == 0 || h % size.0 != 0 || w % size.1 != 0 || h / size.0 != w / size.1 {
            return Err(Error::shape(format!("cannot reduce a {h}×{w} mask to {}×{}", size.0, size.1)));
        }
        let f = h / size.0;
        let idx = sample.target_objects();
        let masks = idx
            .iter()
            .map(|&i| {
                let m = sample.masks[i].data();
                let mut out = vec![0.0; size.0 * size.1];
                for y in 0..h {
                    for x in 0..w {
                        out[(y / f) * size.1 + x / f] += m[y * w + x] as f64;
                    }
                }
                let area = (f * f) as f64;
                out.iter_mut().for_each(|v| *v /= area);
                out
            })
            .collect();
        Ok(Targets { categories: idx.iter().map(|&i| sample.categories[i]).collect(), masks, size })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

/// Matching cost `[targets × queries]`:
/// `λ_cls·(−p_q[cat]) + λ_mask·(BCE + dice)`.
pub fn matching_cost<T: Real>(
    class_logits: &Tensor<T>,
    mask_logits: &Tensor<T>,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    let (n, kp1) = class_logits.shape2()?;
    let (n2, hw) = mask_logits.shape2()?;
    if n != n2 || hw != targets.size.0 * targets.size.1 {
        return Err(Error::shape(format!(
            "predictions {:?}/{:?} do not fit targets at {:?}",
            class_logits.dims(),
            mask_logits.dims(),
            targets.size
        )));
    }
    if let Some(&c) = targets.categories.iter().find(|&&c| c + 1 >= kp1) {
        return Err(Error::validation(format!("target category {c} out of range for {} classes", kp1 - 1)));
    }
    let to64 = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect() };
    let probs = kernels::softmax_axis(&to64(class_logits), &[n, kp1], 1);
    let logits = to64(mask_logits);
    let mut cost = vec![0.0; targets.len() * n];
    for (t, (&cat, gt)) in targets.categories.iter().zip(&targets.masks).enumerate() {
        for q in 0..n {
            let row = &logits[q * hw..(q + 1) * hw];
            let p: Vec<f64> = row.iter().map(|&l| sigmoid(l)).collect();
            let mask = bce_logits(row, gt) + dice_loss(&p, gt);
            cost[t * n + q] = -cfg.lambda_cls * probs[q * kp1 + cat] + cfg.lambda_mask * mask;
        }
    }
    Ok(cost)
}

/// Loss terms for one supervised prediction.
#[derive(Clone, Debug)]
pub struct BlockLoss {
    pub cls: Var,
    pub bce: Var,
    pub dice: Var,
    pub matching: MatchResult,
}

/// Match, then build the weighted cross-entropy over all queries and the
/// mask BCE and dice over matched pairs.
pub fn block_loss<T: Real>(g: &mut Graph<T>, out: &LayerOutput, targets: &Targets, cfg: &LossConfig) -> Result<BlockLoss> {
    let class_logits = g.value(out.class_logits).clone();
    let (n, kp1) = class_logits.shape2()?;
    let cost = matching_cost(&class_logits, g.value(out.mask_logits), targets, cfg)?;
    let matching = hungarian(&cost, targets.len(), n)?;

    // Weighted CE: matched queries target their category with weight 1,
    // the rest target "no object" with the no-object weight.
    let mut label = vec![kp1 - 1; n];
    let mut weight = vec![cfg.no_object_weight; n];
    for &(q, t) in &matching.pairs {
        label[q] = targets.categories[t];
        weight[q] = 1.0;
    }
    let total_w: f64 = weight.iter().sum();
    let coef = Tensor::from_fn([n, kp1], |i| {
        let (q, c) = (i / kp1, i % kp1);
        if label[q] == c { lit(-weight[q] / total_w) } else { T::zero() }
    });
    let logp = g.log_softmax(out.class_logits)?;
    let weighted = g.mul_const(logp, &coef)?;
    let cls = g.sum(weighted);

    let (bce, dice) = if targets.is_empty() {
        (g.constant(Tensor::scalar(T::zero())), g.constant(Tensor::scalar(T::zero())))
    } else {
        let queries = matching.query_of_target();
        let hw = targets.size.0 * targets.size.1;
        let m = queries.len();
        let gt = Tensor::from_fn([m, hw], |i| lit(targets.masks[i / hw][i % hw]));
        let x = g.select_rows(out.mask_logits, &queries)?;
        let bce = g.bce_with_logits(x, &gt)?;
        let p = g.sigmoid(x);
        let pg = g.mul_const(p, &gt)?;
        let inter = g.row_sum(pg)?;
        let num = g.scale(inter, lit(2.0));
        let num = g.add_scalar(num, T::one());
        let sp = g.row_sum(p)?;
        let gt_sums = Tensor::from_fn([m], |t| lit(targets.masks[t].iter().sum::<f64>() + 1.0));
        let den = g.add_const(sp, &gt_sums)?;
        let ratio = g.div(num, den)?;
        let ratio = g.mean(ratio);
        let dice = g.scale(ratio, -T::one());
        let dice = g.add_scalar(dice, T::one());
        (bce, dice)
    };
    Ok(BlockLoss { cls, bce, dice, matching })
}

/// Scalar loss and its components, averaged over supervised predictions.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub pac: f64,
}

/// Mean over supervised predictions of `λ_cls·cls + λ_mask·(bce + dice)`,
/// plus `λ_pac·pac` when the PAC loss is enabled and available.
pub fn total_loss<T: Real>(g: &mut Graph<T>, fwd: &ForwardOutput, targets: &Targets, cfg: &LossConfig) -> Result<LossOutput> {
    let supervised: Vec<LayerOutput> =
        if cfg.aux_losses { fwd.layers.clone() } else { vec![*fwd.last()] };
    let mut terms = Vec::with_capacity(supervised.len());
    let (mut cls, mut bce, mut dice) = (0.0, 0.0, 0.0);
    for out in &supervised {
        let b = block_loss(g, out, targets, cfg)?;
        cls += g.scalar(b.cls).to_f64().unwrap_or(f64::NAN);
        bce += g.scalar(b.bce).to_f64().unwrap_or(f64::NAN);
        dice += g.scalar(b.dice).to_f64().unwrap_or(f64::NAN);
        let mask = g.add(b.bce, b.dice)?;
        let c = g.scale(b.cls, lit(cfg.lambda_cls));
        let m = g.scale(mask, lit(cfg.lambda_mask));
        terms.push(g.add(c, m)?);
    }
    let count = supervised.len() as f64;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let mut total = g.scale(total, lit(1.0 / count));
    let mut pac = 0.0;
    if let (true, Some(p)) = (cfg.use_pac_loss, fwd.pac) {
        pac = g.scalar(p).to_f64().unwrap_or(f64::NAN);
        let weighted = g.scale(p, lit(cfg.lambda_pac));
        total = g.add(total, weighted)?;
    }
    Ok(LossOutput { total, cls: cls / count, bce: bce / count, dice: dice / count, pac })
}
