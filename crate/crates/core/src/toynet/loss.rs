use super::net::StageOutputs;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::segmetrics::{remap_labels, ClusterMap, Label, LabelGrid};
use crate::tradeoff::SupervisionPlan;

/// Mean cross-entropy over counted pixels and its gradient w.r.t. the logits.
#[derive(Clone, Debug)]
pub struct LossTerm {
    pub loss: f64,
    pub grad: Tensor,
    pub counted: usize,
    /// Every pixel carried the ignore label; loss and gradient are zero.
    pub all_ignored: bool,
}

/// Softmax cross-entropy of `logits` (`[batch, k, h, w]`) against labels
/// mapped through `map`. `labels` stacks the batch vertically, so it is
/// `batch·h` rows by `w` columns.
pub fn cross_entropy_remapped(
    logits: &Tensor,
    labels: &LabelGrid,
    map: &ClusterMap,
    ignore_index: Label,
) -> Result<LossTerm> {
    let (b, k, h, w) = logits.dims4();
    if k != map.num_clusters() {
        return Err(Error::Shape(format!("logits have {k} channels, map has {} clusters", map.num_clusters())));
    }
    if labels.height != b * h || labels.width != w {
        return Err(Error::Shape(format!(
            "labels {}x{} vs logits {b}x{h}x{w}",
            labels.height, labels.width
        )));
    }
    let mapped = remap_labels(labels, map, Some(ignore_index))?;
    let p = h * w;
    let counted = mapped.labels.iter().filter(|&&l| l != ignore_index).count();
    let mut grad = Tensor::zeros(&[b, k, h, w]);
    if counted == 0 {
        return Ok(LossTerm {
            loss: 0.0,
            grad,
            counted,
            all_ignored: true,
        });
    }
    let inv = 1.0 / counted as f64;
    let mut total = 0.0;
    let x = logits.data();
    let g = grad.data_mut();
    let mut probs = vec![0.0; k];
    for s in 0..b {
        for px in 0..p {
            let target = mapped.labels[s * p + px];
            if target == ignore_index {
                continue;
            }
            let idx = |c: usize| (s * k + c) * p + px;
            let max = (0..k).map(|c| x[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (x[idx(c)] - max).exp();
                sum += *pr;
            }
            let t = target as usize;
            total += sum.ln() - (x[idx(t)] - max);
            for (c, pr) in probs.iter().enumerate() {
                let onehot = if c == t { 1.0 } else { 0.0 };
                g[idx(c)] = (pr / sum - onehot) * inv;
            }
        }
    }
    Ok(LossTerm {
        loss: total * inv,
        grad,
        counted,
        all_ignored: false,
    })
}

/// Weighted sum of the head losses and the logit gradients to back-propagate.
#[derive(Clone, Debug)]
pub struct HierarchicalLoss {
    pub total: f64,
    /// Unweighted loss of every intermediate head; empty when all weights are zero.
    pub stage_losses: Vec<f64>,
    pub final_loss: f64,
    /// One entry per head, `None` where the weight is zero.
    pub d_logits: Vec<Option<Tensor>>,
}

/// `Σ γ_i · L_i(S_i) + L_final(S)`. Heads with zero weight contribute nothing
/// to the gradient; when every weight is zero the intermediate losses are not
/// evaluated at all.
pub fn hierarchical_loss(
    outputs: &StageOutputs,
    labels: &LabelGrid,
    plan: &SupervisionPlan,
    ignore_index: Label,
) -> Result<HierarchicalLoss> {
    let n = outputs.logits.len() - 1;
    if plan.num_stages() != n {
        return Err(Error::InvalidArgument(format!(
            "plan has {} stages, network has {n} intermediate heads",
            plan.num_stages()
        )));
    }
    let full = ClusterMap::identity(plan.num_classes);
    let fin = cross_entropy_remapped(outputs.final_logits(), labels, &full, ignore_index)?;
    let mut d_logits: Vec<Option<Tensor>> = vec![None; n + 1];
    let mut stage_losses = Vec::new();
    let mut weighted = 0.0;
    if plan.stages.iter().any(|s| s.gamma != 0.0) {
        for (i, stage) in plan.stages.iter().enumerate() {
            let term = cross_entropy_remapped(&outputs.logits[i], labels, &stage.class_set, ignore_index)
                .map_err(|e| e.at_stage(stage.stage_id))?;
            stage_losses.push(term.loss);
            if stage.gamma != 0.0 {
                weighted += stage.gamma * term.loss;
                let mut g = term.grad;
                g.scale(stage.gamma);
                d_logits[i] = Some(g);
            }
        }
    }
    let total = if stage_losses.is_empty() { fin.loss } else { weighted + fin.loss };
    d_logits[n] = Some(fin.grad);
    Ok(HierarchicalLoss {
        total,
        stage_losses,
        final_loss: fin.loss,
        d_logits,
    })
}
