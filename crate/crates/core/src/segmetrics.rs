//! Confusion-matrix algebra and segmentation metrics, including evaluation
//! on merged (clustered) class sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_csv;

pub type Label = u8;

/// Benchmark void label. Pixels carrying it never enter counts or losses.
pub const DEFAULT_IGNORE_INDEX: Label = 255;

/// Row-major H×W grid of class labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Label>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label grid {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: Label) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_rows(rows: &[&[Label]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged label rows".into()));
        }
        Ok(Self {
            height,
            width,
            labels: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Label {
        self.labels[row * self.width + col]
    }
}

/// K×K pixel counts; `counts[g * K + p]` is the number of pixels with ground
/// truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    ignore_index: Option<Label>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self::with_ignore(num_classes, Some(DEFAULT_IGNORE_INDEX))
    }

    pub fn with_ignore(num_classes: usize, ignore_index: Option<Label>) -> Self {
        assert!(num_classes >= 1, "confusion matrix needs at least one class");
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignore_index,
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if num_classes == 0 || counts.len() != num_classes * num_classes {
            return Err(Error::Shape(format!(
                "{} counts for a {num_classes}x{num_classes} confusion matrix",
                counts.len()
            )));
        }
        Ok(Self {
            num_classes,
            counts,
            ignore_index: Some(DEFAULT_IGNORE_INDEX),
        })
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion rows must form a square matrix".into()));
        }
        Self::from_counts(k, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> Option<Label> {
        self.ignore_index
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.num_classes..(c + 1) * self.num_classes].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(g, c)).sum()
    }

    /// Adds one (ground truth, prediction) pair of label grids. The matrix is
    /// left untouched when any pixel is rejected.
    pub fn accumulate(&mut self, gt: &LabelGrid, pred: &LabelGrid) -> Result<()> {
        if gt.height != pred.height || gt.width != pred.width {
            return Err(Error::Shape(format!(
                "ground truth {}x{} vs prediction {}x{}",
                gt.height, gt.width, pred.height, pred.width
            )));
        }
        let k = self.num_classes;
        let out_of_range = |i: usize, label: Label| Error::LabelOutOfRange {
            row: i / gt.width,
            col: i % gt.width,
            label: label as u32,
            num_classes: k,
        };
        for (i, (&g, &p)) in gt.labels.iter().zip(&pred.labels).enumerate() {
            if Some(g) == self.ignore_index {
                continue;
            }
            if g as usize >= k {
                return Err(out_of_range(i, g));
            }
            if p as usize >= k {
                return Err(out_of_range(i, p));
            }
        }
        for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
            if Some(g) == self.ignore_index {
                continue;
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Entry-wise sum; the deterministic reduction for batch-parallel accumulation.
    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "cannot add {0}x{0} confusion to {1}x{1}",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn metrics(&self) -> ClassMetrics {
        metrics_from_confusion(self)
    }

    pub fn to_csv(&self, class_names: Option<&[String]>) -> Result<String> {
        let names = match class_names {
            Some(n) => n.to_vec(),
            None => matrix_csv::default_class_names(self.num_classes),
        };
        matrix_csv::write(&names, self.num_classes, &self.counts)
    }

    pub fn from_csv(text: &str) -> Result<(Vec<String>, Self)> {
        let (names, counts) = matrix_csv::parse::<u64>(text)?;
        let cm = Self::from_counts(names.len(), counts)?;
        Ok((names, cm))
    }
}

/// Per-class IoU, mIoU and pixel accuracy. `None` marks a value that is
/// undefined (absent class, or an empty matrix).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
}

pub fn metrics_from_confusion(conf: &ConfusionMatrix) -> ClassMetrics {
    let k = conf.num_classes();
    let per_class_iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = conf.get(c, c);
            let union = conf.row_sum(c) + conf.col_sum(c) - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let total = conf.total();
    let miou = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    let pixel_accuracy = (total > 0).then(|| conf.trace() as f64 / total as f64);
    ClassMetrics {
        per_class_iou,
        miou,
        pixel_accuracy,
    }
}

/// Surjective map from K source classes onto k cluster ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawClusterMap")]
pub struct ClusterMap {
    num_source_classes: usize,
    num_clusters: usize,
    assignment: Vec<usize>,
}

#[derive(Deserialize)]
struct RawClusterMap {
    num_source_classes: usize,
    num_clusters: usize,
    assignment: Vec<usize>,
}

impl TryFrom<RawClusterMap> for ClusterMap {
    type Error = Error;

    fn try_from(raw: RawClusterMap) -> Result<Self> {
        if raw.assignment.len() != raw.num_source_classes {
            return Err(Error::ClusterMap(format!(
                "assignment has {} entries for {} source classes",
                raw.assignment.len(),
                raw.num_source_classes
            )));
        }
        let map = ClusterMap::new(raw.num_clusters, raw.assignment)?;
        Ok(map)
    }
}

impl ClusterMap {
    pub fn new(num_clusters: usize, assignment: Vec<usize>) -> Result<Self> {
        let k_src = assignment.len();
        if num_clusters == 0 || num_clusters > k_src {
            return Err(Error::ClusterMap(format!(
                "{num_clusters} clusters for {k_src} source classes"
            )));
        }
        let mut seen = vec![false; num_clusters];
        for (c, &a) in assignment.iter().enumerate() {
            if a >= num_clusters {
                return Err(Error::ClusterMap(format!(
                    "class {c} assigned to cluster {a}, outside [0, {num_clusters})"
                )));
            }
            seen[a] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::ClusterMap(format!("cluster {empty} has no member classes")));
        }
        Ok(Self {
            num_source_classes: k_src,
            num_clusters,
            assignment,
        })
    }

    /// Builds a map from arbitrary labels, renumbering clusters in order of
    /// first appearance so equal partitions compare equal.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let mut relabel = std::collections::HashMap::new();
        let assignment: Vec<usize> = labels
            .iter()
            .map(|l| {
                let next = relabel.len();
                *relabel.entry(*l).or_insert(next)
            })
            .collect();
        Self::new(relabel.len(), assignment)
    }

    pub fn identity(k: usize) -> Self {
        Self {
            num_source_classes: k,
            num_clusters: k,
            assignment: (0..k).collect(),
        }
    }

    pub fn all_in_one(k: usize) -> Self {
        Self {
            num_source_classes: k,
            num_clusters: 1,
            assignment: vec![0; k],
        }
    }

    pub fn num_source_classes(&self) -> usize {
        self.num_source_classes
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    #[inline]
    pub fn cluster_of(&self, class: usize) -> usize {
        self.assignment[class]
    }

    pub fn is_identity(&self) -> bool {
        self.num_clusters == self.num_source_classes
            && self.assignment.iter().enumerate().all(|(i, &a)| i == a)
    }

    /// Same partition with clusters renumbered by first appearance.
    pub fn canonical(&self) -> Self {
        Self::from_labels(&self.assignment).expect("a valid map stays valid under relabeling")
    }

    /// `outer ∘ self`: first apply this map, then `outer` on its clusters.
    pub fn then(&self, outer: &ClusterMap) -> Result<ClusterMap> {
        if outer.num_source_classes != self.num_clusters {
            return Err(Error::ClusterMap(format!(
                "cannot compose: inner map has {} clusters, outer expects {}",
                self.num_clusters, outer.num_source_classes
            )));
        }
        ClusterMap::new(
            outer.num_clusters,
            self.assignment.iter().map(|&a| outer.assignment[a]).collect(),
        )
    }

    /// Member classes of every cluster, in cluster order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_clusters];
        for (c, &a) in self.assignment.iter().enumerate() {
            groups[a].push(c);
        }
        groups
    }
}

pub fn merge_confusion(conf: &ConfusionMatrix, map: &ClusterMap) -> Result<ConfusionMatrix> {
    let k = conf.num_classes();
    if map.num_source_classes() != k {
        return Err(Error::ClusterMap(format!(
            "map covers {} classes, confusion matrix has {k}",
            map.num_source_classes()
        )));
    }
    let m = map.num_clusters();
    let mut merged = vec![0u64; m * m];
    for g in 0..k {
        let a = map.cluster_of(g);
        for p in 0..k {
            merged[a * m + map.cluster_of(p)] += conf.get(g, p);
        }
    }
    Ok(ConfusionMatrix {
        num_classes: m,
        counts: merged,
        ignore_index: conf.ignore_index(),
    })
}

pub fn remap_labels(labels: &LabelGrid, map: &ClusterMap, ignore_index: Option<Label>) -> Result<LabelGrid> {
    let k = map.num_source_classes();
    let mut out = Vec::with_capacity(labels.labels.len());
    for (i, &l) in labels.labels.iter().enumerate() {
        if Some(l) == ignore_index {
            out.push(l);
        } else if (l as usize) < k {
            out.push(map.cluster_of(l as usize) as Label);
        } else {
            return Err(Error::LabelOutOfRange {
                row: i / labels.width,
                col: i % labels.width,
                label: l as u32,
                num_classes: k,
            });
        }
    }
    Ok(LabelGrid {
        height: labels.height,
        width: labels.width,
        labels: out,
    })
}

/// Adjusted Rand index between two partitions of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&v| pairs(v)).sum();
    let row: f64 = (0..ka).map(|i| pairs(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let col: f64 = (0..kb)
        .map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum()))
        .sum();
    let total = pairs(n as u64);
    let expected = row * col / total;
    let max = (row + col) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        // Both partitions trivial (all singletons or one block).
        return if index == row && index == col { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}
