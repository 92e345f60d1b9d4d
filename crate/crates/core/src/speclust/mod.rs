//! Class clustering engines: spectral clustering on symmetrized confusion
//! affinities, k-means on class embeddings, and fixed-ratio manual grouping.

mod eigen;
mod kmeans;

pub use eigen::{symmetric_eig, SquareMatrix, SymmetricEigen};
pub use kmeans::{kmeans, kmeans_with, KMeansConfig, KMeansResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_csv;
use crate::segmetrics::{ClusterMap, ConfusionMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffinityOptions {
    /// Divide each confusion row by its sum before symmetrizing.
    pub row_normalize: bool,
    /// Keep the (self-confusion) diagonal instead of zeroing it.
    pub keep_diagonal: bool,
}

impl Default for AffinityOptions {
    fn default() -> Self {
        Self {
            row_normalize: true,
            keep_diagonal: false,
        }
    }
}

impl AffinityOptions {
    /// The unnormalized `(C + Cᵀ) / 2` with zeroed diagonal.
    pub fn literal() -> Self {
        Self {
            row_normalize: false,
            keep_diagonal: false,
        }
    }
}

/// Symmetric non-negative class affinity.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    weights: SquareMatrix,
}

impl AffinityMatrix {
    pub fn new(weights: SquareMatrix) -> Result<Self> {
        let n = weights.n();
        for i in 0..n {
            for j in 0..n {
                let w = weights.get(i, j);
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidArgument(format!("affinity ({i}, {j}) = {w}")));
                }
                if w != weights.get(j, i) {
                    return Err(Error::Asymmetric {
                        i,
                        j,
                        diff: (w - weights.get(j, i)).abs(),
                    });
                }
            }
        }
        Ok(Self { weights })
    }

    pub fn size(&self) -> usize {
        self.weights.n()
    }

    pub fn weights(&self) -> &SquareMatrix {
        &self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights.get(i, j)
    }

    pub fn degree(&self, i: usize) -> f64 {
        (0..self.size()).map(|j| self.get(i, j)).sum()
    }

    /// Permuted copy: entry `(i, j)` of the result is `(perm[i], perm[j])` of self.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.size();
        let mut w = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                w.set(i, j, self.get(perm[i], perm[j]));
            }
        }
        Self { weights: w }
    }

    pub fn to_csv(&self, class_names: Option<&[String]>) -> Result<String> {
        let names = match class_names {
            Some(n) => n.to_vec(),
            None => matrix_csv::default_class_names(self.size()),
        };
        matrix_csv::write(&names, self.size(), self.weights.as_slice())
    }

    pub fn from_csv(text: &str) -> Result<(Vec<String>, Self)> {
        let (names, values) = matrix_csv::parse::<f64>(text)?;
        let m = SquareMatrix::from_vec(names.len(), values)?;
        Ok((names, Self::new(m)?))
    }
}

pub fn symmetrize_affinity(conf: &ConfusionMatrix, opts: AffinityOptions) -> Result<AffinityMatrix> {
    let k = conf.num_classes();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("affinity needs at least 2 classes, got {k}")));
    }
    let mut c = SquareMatrix::zeros(k);
    for g in 0..k {
        let row_sum = conf.row_sum(g) as f64;
        for p in 0..k {
            let v = conf.get(g, p) as f64;
            let v = if opts.row_normalize {
                if row_sum > 0.0 {
                    v / row_sum
                } else {
                    0.0
                }
            } else {
                v
            };
            c.set(g, p, v);
        }
    }
    let mut a = SquareMatrix::zeros(k);
    for i in 0..k {
        for j in i..k {
            // (x + y) / 2 is symmetric in x, y bit for bit.
            let v = if i == j && !opts.keep_diagonal {
                0.0
            } else {
                (c.get(i, j) + c.get(j, i)) / 2.0
            };
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    AffinityMatrix::new(a)
}

/// `L = I − D^{-1/2} A D^{-1/2}`; zero-degree vertices get an isolated unit row.
pub fn normalized_laplacian(a: &AffinityMatrix) -> SquareMatrix {
    let n = a.size();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d = a.degree(i);
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let norm = a.get(i, j) * inv_sqrt[i] * inv_sqrt[j];
            let v = if i == j { 1.0 - norm } else { -norm };
            l.set(i, j, v);
        }
    }
    // Exact symmetry regardless of multiplication order.
    for i in 0..n {
        for j in i + 1..n {
            let v = l.get(i, j);
            l.set(j, i, v);
        }
    }
    l
}

/// Rows of the `k` lowest Laplacian eigenvectors, each scaled to unit length.
#[derive(Clone, Debug)]
pub struct SpectralEmbedding {
    pub points: Vec<Vec<f64>>,
    pub source_k: usize,
}

pub fn spectral_embedding(a: &AffinityMatrix, k: usize) -> Result<SpectralEmbedding> {
    let n = a.size();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("embedding dimension {k} for {n} classes")));
    }
    let eig = symmetric_eig(&normalized_laplacian(a))?;
    let points = (0..n)
        .map(|i| {
            let row: Vec<f64> = eig.vectors[..k].iter().map(|v| v[i]).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|x| x / norm).collect()
            } else {
                row
            }
        })
        .collect();
    Ok(SpectralEmbedding { points, source_k: k })
}

pub fn spectral_cluster(a: &AffinityMatrix, k: usize, seed: u64) -> Result<ClusterMap> {
    spectral_cluster_with(a, k, seed, &KMeansConfig::default())
}

pub fn spectral_cluster_with(a: &AffinityMatrix, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<ClusterMap> {
    let n = a.size();
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("spectral clustering into {k} of {n} classes")));
    }
    let emb = spectral_embedding(a, k)?;
    let result = kmeans_with(&emb.points, k, seed, cfg)?;
    ClusterMap::from_labels(&result.assignment)
}

/// One embedding vector per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingSet {
    vectors: Vec<Vec<f64>>,
}

impl ClassEmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let d = vectors.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::Shape("class embeddings need at least one class and dimension".into()));
        }
        for (c, v) in vectors.iter().enumerate() {
            if v.len() != d {
                return Err(Error::Shape(format!("class {c} embedding has {} dims, expected {d}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of class {c}")));
            }
        }
        Ok(Self { vectors })
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }
}

pub fn cluster_embeddings(e: &ClassEmbeddingSet, k: usize, seed: u64) -> Result<ClusterMap> {
    let n = e.num_classes();
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("k-means into {k} of {n} classes")));
    }
    let result = kmeans(e.vectors(), k, seed)?;
    ClusterMap::from_labels(&result.assignment)
}

/// Class counts for `stages` intermediate heads, halving from the full set:
/// the deepest stage gets `ceil(K/2)`, each shallower one half of the next.
pub fn class_counts_by_halving(num_classes: usize, stages: usize) -> Vec<usize> {
    let mut counts = vec![0; stages];
    let mut next = num_classes;
    for slot in counts.iter_mut().rev() {
        next = next.div_ceil(2).max(2);
        *slot = next;
    }
    counts
}

/// Groups consecutive class indices into `k` near-equal blocks.
pub fn manual_cluster(num_classes: usize, k: usize) -> Result<ClusterMap> {
    if k == 0 || k > num_classes {
        return Err(Error::InvalidArgument(format!("{k} groups for {num_classes} classes")));
    }
    ClusterMap::new(k, (0..num_classes).map(|c| c * k / num_classes).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affinity_literal_and_normalized() {
        let c = ConfusionMatrix::from_rows(&[&[8, 2], &[4, 6]]).unwrap();
        let a = symmetrize_affinity(&c, AffinityOptions::literal()).unwrap();
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.get(1, 0), 3.0);
        assert_eq!(a.get(0, 0), 0.0);
        assert_eq!(a.get(1, 1), 0.0);

        let a = symmetrize_affinity(&c, AffinityOptions::default()).unwrap();
        assert!((a.get(0, 1) - 0.3).abs() < 1e-15);
        assert_eq!(a.get(0, 1), a.get(1, 0));

        let keep = AffinityOptions {
            row_normalize: false,
            keep_diagonal: true,
        };
        assert_eq!(symmetrize_affinity(&c, keep).unwrap().get(0, 0), 8.0);
    }

    #[test]
    fn affinity_without_confusion_is_zero() {
        let c = ConfusionMatrix::from_rows(&[&[4, 0, 0], &[0, 2, 0], &[0, 0, 9]]).unwrap();
        let a = symmetrize_affinity(&c, AffinityOptions::default()).unwrap();
        assert!(a.weights().as_slice().iter().all(|&w| w == 0.0));
        assert!(symmetrize_affinity(&ConfusionMatrix::new(1), AffinityOptions::default()).is_err());
    }

    #[test]
    fn laplacian_examples() {
        let a = AffinityMatrix::new(SquareMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap()).unwrap();
        let l = normalized_laplacian(&a);
        assert_eq!(l.as_slice(), &[1.0, -1.0, -1.0, 1.0]);

        let zero = AffinityMatrix::new(SquareMatrix::zeros(3)).unwrap();
        assert_eq!(normalized_laplacian(&zero), SquareMatrix::identity(3));
    }

    #[test]
    fn halving_counts() {
        assert_eq!(class_counts_by_halving(19, 2), vec![5, 10]);
        assert_eq!(class_counts_by_halving(40, 2), vec![10, 20]);
        assert_eq!(class_counts_by_halving(4, 3), vec![2, 2, 2]);
    }

    #[test]
    fn manual_blocks() {
        let m = manual_cluster(5, 2).unwrap();
        assert_eq!(m.assignment(), &[0, 0, 0, 1, 1]);
        assert!(manual_cluster(3, 4).is_err());
    }

    #[test]
    fn block_affinity_recovers_components() {
        let mut w = SquareMatrix::zeros(5);
        for &(i, j) in &[(0, 1), (1, 2), (0, 2), (3, 4)] {
            w.set(i, j, 1.0);
            w.set(j, i, 1.0);
        }
        let a = AffinityMatrix::new(w).unwrap();
        let m = spectral_cluster(&a, 2, 1).unwrap();
        assert_eq!(m.assignment(), &[0, 0, 0, 1, 1]);
        assert!(spectral_cluster(&a, 1, 1).is_err());
        assert!(spectral_cluster(&a, 6, 1).is_err());
    }

    #[test]
    fn zero_affinity_with_k_equal_n_separates_all() {
        let a = AffinityMatrix::new(SquareMatrix::zeros(4)).unwrap();
        assert!(spectral_cluster(&a, 4, 0).unwrap().is_identity());
    }

    #[test]
    fn embeddings_cluster_pairs() {
        let e = ClassEmbeddingSet::new(vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![0.1, 0.0], vec![5.1, 5.0]]).unwrap();
        let m = cluster_embeddings(&e, 2, 0).unwrap();
        assert_eq!(m.assignment(), &[0, 1, 0, 1]);
        assert!(cluster_embeddings(&e, 4, 0).unwrap().is_identity());
        let same = ClassEmbeddingSet::new(vec![vec![1.0]; 4]).unwrap();
        assert_eq!(cluster_embeddings(&same, 2, 0).unwrap().num_clusters(), 2);
        assert!(cluster_embeddings(&e, 1, 0).is_err());
    }

    #[test]
    fn affinity_csv_round_trip() {
        let c = ConfusionMatrix::from_rows(&[&[8, 2], &[4, 6]]).unwrap();
        let a = symmetrize_affinity(&c, AffinityOptions::default()).unwrap();
        let (_, back) = AffinityMatrix::from_csv(&a.to_csv(None).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
