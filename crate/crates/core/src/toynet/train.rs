use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::hierarchical_loss;
use super::net::{Network, NetworkConfig};
use super::optim::Sgd;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;
use crate::segmetrics::{remap_labels, ClusterMap, ConfusionMatrix, Label, LabelGrid, DEFAULT_IGNORE_INDEX};
use crate::synthdata::Dataset;
use crate::tradeoff::SupervisionPlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ignore_index: Label,
    /// Global gradient-norm bound applied before each step.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            ignore_index: DEFAULT_IGNORE_INDEX,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {}", self.momentum)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument(format!("gradient clip {:?}", self.grad_clip)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub total_loss: f64,
    pub stage_losses: Vec<f64>,
    pub val_miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub stage_columns: usize,
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,total_loss,stage1_loss,...,val_miou`; stage columns only appear
    /// when some intermediate head was supervised.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total_loss");
        for i in 0..self.stage_columns {
            write!(out, ",stage{}_loss", i + 1).unwrap();
        }
        out.push_str(",val_miou\n");
        for r in &self.records {
            write!(out, "{},{}", r.epoch, r.total_loss).unwrap();
            for l in &r.stage_losses {
                write!(out, ",{l}").unwrap();
            }
            match r.val_miou {
                Some(m) => writeln!(out, ",{m}").unwrap(),
                None => out.push_str(",\n"),
            }
        }
        out
    }
}

/// Trains a freshly initialised network with heads sized for `plan`.
pub fn train(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    plan: &SupervisionPlan,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<(Network, History)> {
    let net_cfg = net_cfg.with_stage_classes(&plan.head_classes())?;
    let net = Network::new(net_cfg, cfg.seed)?;
    train_network(net, train_set, val_set, plan, cfg)
}

/// Continues training `net`; batches are reshuffled every epoch from the
/// `shuffle` stream of the seed.
pub fn train_network(
    mut net: Network,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    plan: &SupervisionPlan,
    cfg: &TrainConfig,
) -> Result<(Network, History)> {
    cfg.validate()?;
    plan.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let heads = &net.config().head_classes;
    if heads[..heads.len() - 1] != plan.head_classes()[..] || net.config().num_classes() != plan.num_classes {
        return Err(Error::InvalidArgument(format!(
            "network heads {:?} do not match plan heads {:?} + {}",
            heads,
            plan.head_classes(),
            plan.num_classes
        )));
    }
    let mut opt = Sgd::new(net.params(), cfg.learning_rate, cfg.momentum);
    opt.max_grad_norm = cfg.grad_clip;
    let mut history = History {
        stage_columns: if plan.gammas().iter().any(|&g| g != 0.0) { plan.num_stages() } else { 0 },
        records: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::indexed(cfg.seed, "shuffle", epoch as u64));
        let mut total = 0.0;
        let mut stages = vec![0.0; history.stage_columns];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_set.images(chunk);
            let y = train_set.labels(chunk);
            let (out, trace) = net.forward_traced(&x)?;
            let loss = hierarchical_loss(&out, &y, plan, cfg.ignore_index)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {} at batch {batches}", loss.total),
                });
            }
            let grads = net.backward(&trace, &loss.d_logits)?;
            opt.step(net.params_mut(), &grads).map_err(|e| Error::Diverged {
                epoch,
                detail: e.to_string(),
            })?;
            total += loss.total;
            for (s, l) in stages.iter_mut().zip(&loss.stage_losses) {
                *s += l;
            }
            batches += 1;
        }
        let n = batches as f64;
        let val_miou = match val_set {
            Some(v) => evaluate(&net, v, cfg.batch_size)?.metrics().miou,
            None => None,
        };
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            total_loss: total / n,
            stage_losses: stages.into_iter().map(|s| s / n).collect(),
            val_miou,
        });
    }
    Ok((net, history))
}

/// Per-pixel argmax over channels; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor) -> LabelGrid {
    let (b, k, h, w) = logits.dims4();
    let p = h * w;
    let x = logits.data();
    let mut labels = Vec::with_capacity(b * p);
    for s in 0..b {
        for px in 0..p {
            let mut best = 0;
            for c in 1..k {
                if x[(s * k + c) * p + px] > x[(s * k + best) * p + px] {
                    best = c;
                }
            }
            labels.push(best as Label);
        }
    }
    LabelGrid {
        height: b * h,
        width: w,
        labels,
    }
}

/// Confusion of every head. Head `i` is scored against labels mapped
/// through `maps[i]`; the final head always uses the full class set.
pub fn head_confusions(net: &Network, ds: &Dataset, maps: &[ClusterMap], batch_size: usize) -> Result<Vec<ConfusionMatrix>> {
    let s = net.config().num_stages();
    if maps.len() != s - 1 {
        return Err(Error::InvalidArgument(format!("{} maps for {} intermediate heads", maps.len(), s - 1)));
    }
    let full = ClusterMap::identity(net.config().num_classes());
    let all: Vec<&ClusterMap> = maps.iter().chain(std::iter::once(&full)).collect();
    let mut confs: Vec<ConfusionMatrix> = all.iter().map(|m| ConfusionMatrix::new(m.num_clusters())).collect();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let out = net.forward(&ds.images(chunk))?;
        let gt = ds.labels(chunk);
        for ((conf, map), logits) in confs.iter_mut().zip(&all).zip(&out.logits) {
            let pred = argmax_labels(logits);
            let gt = remap_labels(&gt, map, Some(DEFAULT_IGNORE_INDEX))?;
            conf.accumulate(&gt, &pred)?;
        }
    }
    Ok(confs)
}

/// Final-head confusion over `ds`.
pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::new(net.config().num_classes());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let out = net.forward(&ds.images(chunk))?;
        conf.accumulate(&ds.labels(chunk), &argmax_labels(out.final_logits()))?;
    }
    Ok(conf)
}
