use serde::{Deserialize, Serialize};

use super::net::{Network, NetworkConfig};
use super::train::{head_confusions, train, train_network, History, TrainConfig};
use crate::error::{Error, Result};
use crate::ocrfuse::{attach_fuse, FusePlan};
use crate::segmetrics::{ClusterMap, ConfusionMatrix};
use crate::speclust::{AffinityOptions, ClassEmbeddingSet};
use crate::synthdata::{split, Dataset};
use crate::tradeoff::{derive_supervision_plan, manual_plan, Grouping, PlanDerivation, SelectorConfig, SupervisionPlan};

/// How intermediate class sets are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clustering {
    /// Spectral clustering of the analysis confusion.
    #[default]
    Spectral,
    /// k-means on the phase-1 head weight rows.
    Kmeans,
    /// Contiguous blocks with halving class counts; no analysis phase.
    Manual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub selector: SelectorConfig,
    pub gammas: Vec<f64>,
    pub clustering: Clustering,
    pub affinity: AffinityOptions,
    /// Share of the training set kept for phase 1; the rest is the analysis set.
    pub reduced_fraction: f64,
    /// Start phase 2 from the phase-1 weights wherever shapes agree.
    pub warm_start: bool,
    pub fuse: Option<FusePlan>,
}

impl PipelineConfig {
    pub fn new(selector: SelectorConfig, gammas: Vec<f64>) -> Self {
        Self {
            selector,
            gammas,
            clustering: Clustering::Spectral,
            affinity: AffinityOptions::default(),
            reduced_fraction: 0.9,
            warm_start: false,
            fuse: None,
        }
    }
}

pub struct PipelineOutput {
    pub net: Network,
    pub plan: SupervisionPlan,
    pub history: History,
    /// Absent when the class sets were fixed by hand.
    pub derivation: Option<PlanDerivation>,
    pub phase1: Option<(Network, History)>,
    /// Analysis-set confusion of every phase-1 head, final head last.
    pub analysis_confusions: Vec<ConfusionMatrix>,
    /// Classes with no pixel in the analysis set.
    pub absent_classes: Vec<usize>,
}

/// Confusion of every head of a deep-supervision network on `ds`.
pub fn analysis_confusions(net: &Network, ds: &Dataset, batch_size: usize) -> Result<Vec<ConfusionMatrix>> {
    let k = net.config().num_classes();
    let n = net.config().num_stages() - 1;
    if net.config().head_classes.iter().any(|&c| c != k) {
        return Err(Error::InvalidArgument("analysis needs every head on the full class set".into()));
    }
    head_confusions(net, ds, &vec![ClusterMap::identity(k); n], batch_size)
}

/// Phase 1 trains with deep supervision on a reduced split and measures
/// per-head confusion on the held-out rest; the derived plan then drives a
/// second training run on the whole training set.
pub fn two_phase_pipeline(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let k = train_set.num_classes;
    let n = net_cfg.num_stages() - 1;
    if cfg.gammas.len() != n {
        return Err(Error::InvalidArgument(format!("{} loss weights for {n} intermediate stages", cfg.gammas.len())));
    }
    cfg.selector.validate()?;
    let seed = train_cfg.seed;
    let (plan, derivation, phase1, confs, absent) = if cfg.clustering == Clustering::Manual {
        (manual_plan(k, &cfg.gammas)?, None, None, Vec::new(), Vec::new())
    } else {
        let (reduced, analysis) = split(train_set, cfg.reduced_fraction, seed)?;
        let absent = analysis.absent_classes();
        let ds_plan = SupervisionPlan::deep_supervision(k, &cfg.gammas);
        let (p1, h1) = train(&reduced, val_set, &ds_plan, net_cfg, train_cfg)?;
        let confs = analysis_confusions(&p1, &analysis, train_cfg.batch_size)?;
        let grouping = match cfg.clustering {
            Clustering::Spectral => Grouping::Spectral(cfg.affinity),
            _ => Grouping::KMeans((0..n).map(|i| ClassEmbeddingSet::new(p1.head_rows(i))).collect::<Result<_>>()?),
        };
        let d = derive_supervision_plan(&confs[..n], &confs[n], &cfg.selector, &cfg.gammas, &grouping, seed)?;
        (d.plan.clone(), Some(d), Some((p1, h1)), confs, absent)
    };
    let cfg2 = net_cfg.with_stage_classes(&plan.head_classes())?;
    let mut net = Network::new(cfg2, seed)?;
    if cfg.warm_start {
        if let Some((p1, _)) = &phase1 {
            net.copy_matching(p1);
        }
    }
    if let Some(fp) = &cfg.fuse {
        net = attach_fuse(net, fp.clone(), seed)?;
    }
    let (net, history) = train_network(net, train_set, val_set, &plan, train_cfg)?;
    Ok(PipelineOutput {
        net,
        plan,
        history,
        derivation,
        phase1,
        analysis_confusions: confs,
        absent_classes: absent,
    })
}
