//! Performance-vs-complexity curves per supervision stage, and selection of
//! each stage's reduced class set.
//!
//! A curve holds, for every candidate class count `k`, the mIoU a stage
//! reaches once its classes are merged into `k` clusters. The final output's
//! `(K, mIoU)` is the reference point. The ratio rule picks the `k` whose
//! `mIoU / k` best matches the reference ratio; the angle rule generalizes it
//! to any line through the reference point (0° keeps the full class set,
//! 90° asks every stage to match the reference mIoU).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmetrics::{merge_confusion, ClusterMap, ConfusionMatrix};
use crate::speclust::{
    class_counts_by_halving, cluster_embeddings, manual_cluster, spectral_cluster, symmetrize_affinity,
    AffinityOptions, ClassEmbeddingSet,
};

/// Conventional auxiliary-loss weight used when none is given.
pub const DEFAULT_GAMMA: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub k: usize,
    pub miou: f64,
    pub map: ClusterMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffCurve {
    pub stage_id: usize,
    pub points: Vec<CurvePoint>,
}

impl TradeoffCurve {
    /// Curve from explicit `(k, miou)` values; maps are contiguous groupings.
    /// Handy for fixtures and for curves computed elsewhere.
    pub fn from_values(stage_id: usize, num_classes: usize, values: &[(usize, f64)]) -> Result<Self> {
        let mut points = Vec::with_capacity(values.len());
        for &(k, miou) in values {
            if points.last().is_some_and(|p: &CurvePoint| p.k >= k) {
                return Err(Error::InvalidArgument("curve k values must strictly increase".into()));
            }
            points.push(CurvePoint {
                k,
                miou,
                map: manual_cluster(num_classes, k)?,
            });
        }
        Ok(Self { stage_id, points })
    }

    pub fn k_full(&self) -> Option<usize> {
        self.points.last().map(|p| p.k)
    }

    pub fn point(&self, k: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.k == k)
    }
}

/// How classes are grouped for each candidate `k`.
#[derive(Clone, Debug)]
pub enum Grouping {
    Spectral(AffinityOptions),
    /// k-means over one embedding set per stage (shallow to deep).
    KMeans(Vec<ClassEmbeddingSet>),
}

impl Default for Grouping {
    fn default() -> Self {
        Grouping::Spectral(AffinityOptions::default())
    }
}

pub fn build_tradeoff_curve(conf: &ConfusionMatrix, seed: u64) -> Result<TradeoffCurve> {
    build_curve_with(1, conf, &Grouping::default(), seed)
}

pub fn build_curve_with(stage_id: usize, conf: &ConfusionMatrix, grouping: &Grouping, seed: u64) -> Result<TradeoffCurve> {
    let k_full = conf.num_classes();
    if k_full < 3 {
        return Err(Error::InvalidArgument(format!("trade-off curve needs K >= 3, got {k_full}")));
    }
    if conf.total() == 0 {
        return Err(Error::EmptyConfusion);
    }
    let affinity = match grouping {
        Grouping::Spectral(opts) => Some(symmetrize_affinity(conf, *opts)?),
        Grouping::KMeans(_) => None,
    };
    let mut points = Vec::with_capacity(k_full - 1);
    for k in 2..k_full {
        let map = match (grouping, &affinity) {
            (Grouping::Spectral(_), Some(a)) => spectral_cluster(a, k, seed)?,
            (Grouping::KMeans(sets), _) => {
                let set = sets.get(stage_id - 1).ok_or_else(|| {
                    Error::InvalidArgument(format!("no class embeddings for stage {stage_id}"))
                })?;
                if set.num_classes() != k_full {
                    return Err(Error::Shape(format!(
                        "stage {stage_id} embeddings cover {} classes, confusion has {k_full}",
                        set.num_classes()
                    )));
                }
                cluster_embeddings(set, k, seed)?
            }
            _ => unreachable!("affinity is built for spectral grouping"),
        };
        points.push(point_for(conf, map)?);
    }
    points.push(point_for(conf, ClusterMap::identity(k_full))?);
    Ok(TradeoffCurve { stage_id, points })
}

fn point_for(conf: &ConfusionMatrix, map: ClusterMap) -> Result<CurvePoint> {
    let merged = merge_confusion(conf, &map)?;
    let miou = merged.metrics().miou.ok_or(Error::EmptyConfusion)?;
    Ok(CurvePoint {
        k: map.num_clusters(),
        miou,
        map,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub k_full: usize,
    pub miou_ref: f64,
}

impl ReferencePoint {
    pub fn new(k_full: usize, miou_ref: f64) -> Result<Self> {
        if k_full < 2 || !(0.0..=1.0).contains(&miou_ref) {
            return Err(Error::InvalidArgument(format!("reference point ({k_full}, {miou_ref})")));
        }
        Ok(Self { k_full, miou_ref })
    }

    pub fn ratio(&self) -> f64 {
        self.miou_ref / self.k_full as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorMode {
    Ratio,
    Theta,
}

/// Plot-space scaling: a curve point maps to `(k * x, miou * y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisScale {
    pub x: f64,
    pub y: f64,
}

impl AxisScale {
    /// Puts the reference point at `(1, miou_ref)`.
    pub fn default_for(k_full: usize) -> Self {
        Self {
            x: 1.0 / k_full as f64,
            y: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub mode: SelectorMode,
    pub theta_degrees: f64,
    /// `None` uses [`AxisScale::default_for`] the reference class count.
    pub axis_scale: Option<AxisScale>,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self::ratio()
    }
}

impl SelectorConfig {
    pub fn ratio() -> Self {
        Self {
            mode: SelectorMode::Ratio,
            theta_degrees: 0.0,
            axis_scale: None,
        }
    }

    pub fn theta(theta_degrees: f64) -> Self {
        Self {
            mode: SelectorMode::Theta,
            theta_degrees,
            axis_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=90.0).contains(&self.theta_degrees) {
            return Err(Error::InvalidArgument(format!("theta {}° outside [0, 90]", self.theta_degrees)));
        }
        if let Some(s) = self.axis_scale {
            if !(s.x > 0.0 && s.y > 0.0 && s.x.is_finite() && s.y.is_finite()) {
                return Err(Error::InvalidArgument(format!("axis scale ({}, {}) must be positive", s.x, s.y)));
            }
        }
        Ok(())
    }

    fn scale_for(&self, reference: &ReferencePoint) -> AxisScale {
        self.axis_scale.unwrap_or_else(|| AxisScale::default_for(reference.k_full))
    }

    /// Angle whose selection line passes through the origin, i.e. the ratio rule.
    pub fn origin_theta(reference: &ReferencePoint, scale: AxisScale) -> f64 {
        let x = reference.k_full as f64 * scale.x;
        let y = reference.miou_ref * scale.y;
        x.atan2(y).to_degrees()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub k: usize,
    pub map: ClusterMap,
    /// Class-count abscissa where the selection line meets the curve.
    pub crossing_k: Option<f64>,
    /// No crossing inside the curve's range; the nearest endpoint was taken.
    pub clamped: bool,
}

/// Point whose `miou / k` is closest to the reference ratio; ties go to the larger `k`.
pub fn select_by_ratio(curve: &TradeoffCurve, reference: &ReferencePoint) -> Result<Selection> {
    let target = reference.ratio();
    let mut best: Option<(&CurvePoint, f64)> = None;
    for p in &curve.points {
        let d = (p.miou / p.k as f64 - target).abs();
        if best.is_none_or(|(_, bd)| d <= bd) {
            best = Some((p, d));
        }
    }
    let (p, _) = best.ok_or_else(|| Error::InvalidArgument("empty trade-off curve".into()))?;
    Ok(Selection {
        k: p.k,
        map: p.map.clone(),
        crossing_k: None,
        clamped: false,
    })
}

pub fn select_by_theta(curve: &TradeoffCurve, reference: &ReferencePoint, cfg: &SelectorConfig) -> Result<Selection> {
    cfg.validate()?;
    if curve.points.is_empty() {
        return Err(Error::InvalidArgument("empty trade-off curve".into()));
    }
    let scale = cfg.scale_for(reference);
    let px = reference.k_full as f64 * scale.x;
    let py = reference.miou_ref * scale.y;

    let (crossing_k, clamped) = if cfg.theta_degrees == 0.0 {
        (reference.k_full as f64, false)
    } else {
        let cot = 1.0 / cfg.theta_degrees.to_radians().tan();
        let gap = |p: &CurvePoint| {
            let x = p.k as f64 * scale.x;
            p.miou * scale.y - (py - (px - x) * cot)
        };
        let pts = &curve.points;
        let gaps: Vec<f64> = pts.iter().map(gap).collect();
        let mut crossing = None;
        let last = pts.len() - 1;
        if gaps[last] == 0.0 {
            crossing = Some(pts[last].k as f64);
        }
        for j in (0..last).rev() {
            if crossing.is_some() {
                break;
            }
            let (g0, g1) = (gaps[j], gaps[j + 1]);
            if g0 == 0.0 {
                crossing = Some(pts[j].k as f64);
            } else if (g0 < 0.0) != (g1 < 0.0) && g1 != 0.0 {
                let (k0, k1) = (pts[j].k as f64, pts[j + 1].k as f64);
                crossing = Some(k0 + (k1 - k0) * g0 / (g0 - g1));
            }
        }
        match crossing {
            Some(k) => (k, false),
            // Curve entirely above the line: the stage can afford the most classes.
            None if gaps.iter().all(|&g| g > 0.0) => (pts[last].k as f64, true),
            None => (pts[0].k as f64, true),
        }
    };

    let mut best: Option<(&CurvePoint, f64)> = None;
    for p in &curve.points {
        let d = (p.k as f64 - crossing_k).abs();
        if best.is_none_or(|(_, bd)| d <= bd) {
            best = Some((p, d));
        }
    }
    let (p, _) = best.expect("curve is non-empty");
    Ok(Selection {
        k: p.k,
        map: p.map.clone(),
        crossing_k: Some(crossing_k),
        clamped,
    })
}

pub fn select(curve: &TradeoffCurve, reference: &ReferencePoint, cfg: &SelectorConfig) -> Result<Selection> {
    match cfg.mode {
        SelectorMode::Ratio => select_by_ratio(curve, reference),
        SelectorMode::Theta => select_by_theta(curve, reference, cfg),
    }
}

/// Points `(k, miou)` on the selection line in unscaled coordinates, for plotting.
pub fn selector_line(reference: &ReferencePoint, cfg: &SelectorConfig, k_min: f64) -> Vec<(f64, f64)> {
    let k_full = reference.k_full as f64;
    let slope = match cfg.mode {
        SelectorMode::Ratio => reference.miou_ref / k_full,
        SelectorMode::Theta if cfg.theta_degrees == 0.0 => return vec![(k_full, 0.0), (k_full, 1.0)],
        SelectorMode::Theta => {
            let scale = cfg.scale_for(reference);
            scale.x / (scale.y * cfg.theta_degrees.to_radians().tan())
        }
    };
    let steps = 32;
    (0..=steps)
        .map(|i| {
            let k = k_min + (k_full - k_min) * i as f64 / steps as f64;
            (k, reference.miou_ref - (k_full - k) * slope)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage_id: usize,
    pub class_set: ClusterMap,
    pub gamma: f64,
}

/// Class set and loss weight for every intermediate head; the final head
/// always trains on the full set with weight 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanJson", into = "PlanJson")]
pub struct SupervisionPlan {
    pub num_classes: usize,
    pub stages: Vec<StagePlan>,
}

#[derive(Serialize, Deserialize)]
struct PlanJson {
    num_classes: usize,
    stages: Vec<StageJson>,
}

#[derive(Serialize, Deserialize)]
struct StageJson {
    stage_id: usize,
    k: usize,
    gamma: f64,
    assignment: Vec<usize>,
}

impl From<SupervisionPlan> for PlanJson {
    fn from(p: SupervisionPlan) -> Self {
        PlanJson {
            num_classes: p.num_classes,
            stages: p
                .stages
                .into_iter()
                .map(|s| StageJson {
                    stage_id: s.stage_id,
                    k: s.class_set.num_clusters(),
                    gamma: s.gamma,
                    assignment: s.class_set.assignment().to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<PlanJson> for SupervisionPlan {
    type Error = Error;

    fn try_from(j: PlanJson) -> Result<Self> {
        let stages = j
            .stages
            .into_iter()
            .map(|s| {
                Ok(StagePlan {
                    stage_id: s.stage_id,
                    class_set: ClusterMap::new(s.k, s.assignment)?,
                    gamma: s.gamma,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let plan = SupervisionPlan {
            num_classes: j.num_classes,
            stages,
        };
        plan.validate()?;
        Ok(plan)
    }
}

impl SupervisionPlan {
    /// Every intermediate head on the full class set.
    pub fn deep_supervision(num_classes: usize, gammas: &[f64]) -> Self {
        Self {
            num_classes,
            stages: gammas
                .iter()
                .enumerate()
                .map(|(i, &gamma)| StagePlan {
                    stage_id: i + 1,
                    class_set: ClusterMap::identity(num_classes),
                    gamma,
                })
                .collect(),
        }
    }

    pub fn from_maps(num_classes: usize, maps: Vec<ClusterMap>, gammas: &[f64]) -> Result<Self> {
        if maps.len() != gammas.len() {
            return Err(Error::InvalidArgument(format!("{} class sets but {} weights", maps.len(), gammas.len())));
        }
        let plan = Self {
            num_classes,
            stages: maps
                .into_iter()
                .zip(gammas)
                .enumerate()
                .map(|(i, (class_set, &gamma))| StagePlan {
                    stage_id: i + 1,
                    class_set,
                    gamma,
                })
                .collect(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("plan needs at least one intermediate stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.stage_id != i + 1 {
                return Err(Error::InvalidArgument(format!("stage ids must run 1..N, found {} at {}", s.stage_id, i)));
            }
            if !(s.gamma.is_finite() && s.gamma >= 0.0) {
                return Err(Error::InvalidArgument(format!("stage {} weight {}", s.stage_id, s.gamma)));
            }
            if s.class_set.num_source_classes() != self.num_classes {
                return Err(Error::ClusterMap(format!(
                    "stage {} maps {} classes, plan has {}",
                    s.stage_id,
                    s.class_set.num_source_classes(),
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.gamma).collect()
    }

    pub fn head_classes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.class_set.num_clusters()).collect()
    }

    pub fn with_gammas(mut self, gammas: &[f64]) -> Result<Self> {
        if gammas.len() != self.stages.len() {
            return Err(Error::InvalidArgument(format!("{} weights for {} stages", gammas.len(), self.stages.len())));
        }
        for (s, &g) in self.stages.iter_mut().zip(gammas) {
            s.gamma = g;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Everything the analysis phase produces.
#[derive(Clone, Debug)]
pub struct PlanDerivation {
    pub plan: SupervisionPlan,
    pub reference: ReferencePoint,
    pub curves: Vec<TradeoffCurve>,
    pub selections: Vec<Selection>,
}

pub fn derive_supervision_plan(
    stage_confusions: &[ConfusionMatrix],
    final_conf: &ConfusionMatrix,
    cfg: &SelectorConfig,
    gammas: &[f64],
    grouping: &Grouping,
    seed: u64,
) -> Result<PlanDerivation> {
    if stage_confusions.is_empty() {
        return Err(Error::InvalidArgument("need at least one intermediate stage".into()));
    }
    if gammas.len() != stage_confusions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} stages",
            gammas.len(),
            stage_confusions.len()
        )));
    }
    cfg.validate()?;
    let k_full = final_conf.num_classes();
    for (i, c) in stage_confusions.iter().enumerate() {
        if c.num_classes() != k_full {
            return Err(Error::Shape(format!("{} classes vs final {k_full}", c.num_classes())).at_stage(i + 1));
        }
    }
    let miou_ref = final_conf.metrics().miou.ok_or(Error::EmptyConfusion)?;
    let reference = ReferencePoint::new(k_full, miou_ref)?;

    let mut curves = Vec::new();
    let mut selections = Vec::new();
    for (i, conf) in stage_confusions.iter().enumerate() {
        let stage = i + 1;
        let curve = build_curve_with(stage, conf, grouping, seed).map_err(|e| e.at_stage(stage))?;
        let sel = select(&curve, &reference, cfg).map_err(|e| e.at_stage(stage))?;
        curves.push(curve);
        selections.push(sel);
    }
    let maps = selections.iter().map(|s| s.map.clone()).collect();
    let plan = SupervisionPlan::from_maps(k_full, maps, gammas)?;
    Ok(PlanDerivation {
        plan,
        reference,
        curves,
        selections,
    })
}

/// Single-phase plan: halving class counts with contiguous class groups.
pub fn manual_plan(num_classes: usize, gammas: &[f64]) -> Result<SupervisionPlan> {
    let counts = class_counts_by_halving(num_classes, gammas.len());
    let maps = counts
        .iter()
        .map(|&k| manual_cluster(num_classes, k.min(num_classes)))
        .collect::<Result<Vec<_>>>()?;
    SupervisionPlan::from_maps(num_classes, maps, gammas)
}

pub fn curves_to_csv(curves: &[TradeoffCurve]) -> String {
    let mut out = String::from("stage,k,miou\n");
    for c in curves {
        for p in &c.points {
            out.push_str(&format!("{},{},{}\n", c.stage_id, p.k, p.miou));
        }
    }
    out
}
