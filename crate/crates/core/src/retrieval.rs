//! Image retrieval with learned descriptors.
//!
//! Two rankings are supported: counting matched keypoints between bags
//! (hard threshold `tau` on squared descriptor distance), and inner products
//! of VLAD vectors built on a k-means codebook. Both are scored with the
//! nearest neighbour, first tier and second tier measures.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bag_match::{row_min_sqdist, GramPair};
use crate::data::BagDataset;
use crate::error::{shape_err, Error, Result};
use crate::net::DescriptorNet;
use crate::tensor::Tensor;

/// One database image: a descriptor matrix `[n, d]` or a VLAD vector.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub image_id: usize,
    pub object_id: u32,
    pub item: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
}

impl RetrievalIndex {
    /// Image ids must be unique.
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        let mut ids: Vec<usize> = entries.iter().map(|e| e.image_id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("duplicate image id {}", w[0])));
        }
        Ok(Self { entries })
    }

    /// Describes every bag of a dataset; image ids are bag positions.
    pub fn describe(net: &DescriptorNet, dataset: &BagDataset) -> Result<Self> {
        let entries = dataset
            .bags
            .par_iter()
            .enumerate()
            .map(|(i, bag)| {
                Ok(IndexEntry {
                    image_id: i,
                    object_id: bag.object_id,
                    item: net.forward_bag(&bag.patches)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of images per object.
    pub fn class_sizes(&self) -> BTreeMap<u32, usize> {
        let mut sizes = BTreeMap::new();
        for e in &self.entries {
            *sizes.entry(e.object_id).or_insert(0) += 1;
        }
        sizes
    }

    /// All descriptor rows stacked into one `[sum n, d]` matrix.
    pub fn stacked_rows(&self) -> Result<Tensor> {
        let Some(first) = self.entries.first() else {
            return Err(Error::InvalidArgument("index is empty".into()));
        };
        let d = first.item.cols();
        let mut data = Vec::new();
        for e in &self.entries {
            if e.item.shape().len() != 2 || e.item.cols() != d {
                return shape_err(format!("entry {} is not an [n, {d}] matrix", e.image_id));
            }
            data.extend_from_slice(e.item.data());
        }
        let rows = data.len() / d;
        Tensor::new(&[rows, d], data)
    }
}

/// One result of a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub image_id: usize,
    pub object_id: u32,
    pub score: f64,
}

fn rank(mut results: Vec<Ranked>) -> Vec<Ranked> {
    results.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image_id.cmp(&b.image_id)));
    results
}

/// Ranks the index by the fraction of the query's keypoints matched within
/// `tau`. An entry with the query's image id is left out.
pub fn match_retrieve(query: &IndexEntry, index: &RetrievalIndex, tau: f64) -> Result<Vec<Ranked>> {
    if index.is_empty() {
        return Err(Error::InvalidArgument("index is empty".into()));
    }
    let results = index
        .entries
        .iter()
        .filter(|e| e.image_id != query.image_id)
        .map(|e| {
            let mins = row_min_sqdist(&GramPair::new(query.item.clone(), e.item.clone())?);
            Ok(Ranked {
                image_id: e.image_id,
                object_id: e.object_id,
                score: count_within(&mins, tau) as f64 / mins.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(results))
}

fn count_within(mins: &[f64], tau: f64) -> usize {
    mins.iter().filter(|&&d| d <= tau).count()
}

/// Ranks the index by inner product with the query's VLAD vector. An entry
/// with the query's image id is left out.
pub fn vlad_retrieve(query: &IndexEntry, index: &RetrievalIndex) -> Result<Vec<Ranked>> {
    if index.is_empty() {
        return Err(Error::InvalidArgument("index is empty".into()));
    }
    let q = query.item.data();
    let results = index
        .entries
        .iter()
        .filter(|e| e.image_id != query.image_id)
        .map(|e| {
            if e.item.len() != q.len() {
                return shape_err(format!(
                    "VLAD length {} does not match query length {}",
                    e.item.len(),
                    q.len()
                ));
            }
            Ok(Ranked {
                image_id: e.image_id,
                object_id: e.object_id,
                score: q.iter().zip(e.item.data()).map(|(a, b)| a * b).sum(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(results))
}

/// Nearest neighbour, first tier and second tier, averaged over queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub nn: f64,
    pub ft: f64,
    pub st: f64,
}

/// A query's object and its ranked results.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub object_id: u32,
    pub ranked: Vec<Ranked>,
}

/// For a query whose class has `C` members (the query included), counts
/// same-class results in the top 1, `C - 1` and `2 (C - 1)`; the last two
/// are divided by `C - 1`.
pub fn nn_ft_st(queries: &[QueryResult], class_sizes: &BTreeMap<u32, usize>) -> Result<Scores> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let mut total = Scores {
        nn: 0.0,
        ft: 0.0,
        st: 0.0,
    };
    for q in queries {
        let c = class_sizes.get(&q.object_id).copied().unwrap_or(0);
        if c < 2 {
            return Err(Error::InvalidArgument(format!(
                "object {} has {c} images; at least 2 are needed",
                q.object_id
            )));
        }
        let relevant = c - 1;
        let hits = |k: usize| q.ranked.iter().take(k).filter(|r| r.object_id == q.object_id).count() as f64;
        total.nn += hits(1);
        total.ft += hits(relevant) / relevant as f64;
        total.st += hits(2 * relevant) / relevant as f64;
    }
    let m = queries.len() as f64;
    Ok(Scores {
        nn: total.nn / m,
        ft: total.ft / m,
        st: total.st / m,
    })
}

/// Uses every entry as a query against the rest of the index.
pub fn evaluate<F>(index: &RetrievalIndex, retrieve: F) -> Result<Scores>
where
    F: Fn(&IndexEntry) -> Result<Vec<Ranked>> + Sync,
{
    let queries = index
        .entries
        .par_iter()
        .map(|e| {
            Ok(QueryResult {
                object_id: e.object_id,
                ranked: retrieve(e)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    nn_ft_st(&queries, &index.class_sizes())
}

/// Matching retrieval scores at one threshold.
pub fn evaluate_matching(index: &RetrievalIndex, tau: f64) -> Result<Scores> {
    evaluate(index, |q| match_retrieve(q, index, tau))
}

/// `0.05, 0.10, ..., 2.00`.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=40).map(|i| f64::from(i) / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauSweep {
    pub best_tau: f64,
    pub best: Scores,
    /// One row per grid value, in grid order.
    pub rows: Vec<(f64, Scores)>,
}

/// Matching retrieval at every threshold of `grid`. The best threshold has
/// the highest NN, then the highest FT, then the smallest value.
pub fn sweep_tau(index: &RetrievalIndex, grid: &[f64]) -> Result<TauSweep> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("tau grid is empty".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && **t < 4.0)) {
        return Err(Error::InvalidArgument(format!("tau {t} outside (0, 4)")));
    }
    if index.is_empty() {
        return Err(Error::InvalidArgument("index is empty".into()));
    }
    // Row minima do not depend on tau: compute them once per ordered pair.
    let entries = &index.entries;
    let minima = entries
        .par_iter()
        .map(|q| {
            entries
                .iter()
                .map(|e| {
                    if e.image_id == q.image_id {
                        return Ok(Vec::new());
                    }
                    Ok(row_min_sqdist(&GramPair::new(q.item.clone(), e.item.clone())?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let sizes = index.class_sizes();
    let mut rows = Vec::with_capacity(grid.len());
    for &tau in grid {
        let queries: Vec<QueryResult> = entries
            .iter()
            .zip(&minima)
            .map(|(q, per_entry)| {
                let results = entries
                    .iter()
                    .zip(per_entry)
                    .filter(|(e, _)| e.image_id != q.image_id)
                    .map(|(e, mins)| Ranked {
                        image_id: e.image_id,
                        object_id: e.object_id,
                        score: count_within(mins, tau) as f64 / mins.len() as f64,
                    })
                    .collect();
                QueryResult {
                    object_id: q.object_id,
                    ranked: rank(results),
                }
            })
            .collect();
        rows.push((tau, nn_ft_st(&queries, &sizes)?));
    }
    let (best_tau, best) = rows
        .iter()
        .copied()
        .reduce(|a, b| {
            let better = b.1.nn > a.1.nn || (b.1.nn == a.1.nn && (b.1.ft > a.1.ft || (b.1.ft == a.1.ft && b.0 < a.0)));
            if better {
                b
            } else {
                a
            }
        })
        .expect("grid is non-empty");
    Ok(TauSweep { best_tau, best, rows })
}

/// `tau,NN,FT,ST` rows.
pub fn sweep_csv(rows: &[(f64, Scores)]) -> String {
    let mut out = String::from("tau,NN,FT,ST\n");
    for (tau, s) in rows {
        let _ = writeln!(out, "{tau},{},{},{}", s.nn, s.ft, s.st);
    }
    out
}

/// `k,vlad_dim,NN,FT,ST` rows.
pub fn vlad_csv(rows: &[(usize, usize, Scores)]) -> String {
    let mut out = String::from("k,vlad_dim,NN,FT,ST\n");
    for (k, dim, s) in rows {
        let _ = writeln!(out, "{k},{dim},{},{},{}", s.nn, s.ft, s.st);
    }
    out
}

/// k-means centroids used to aggregate descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct VladCodebook {
    centroids: Tensor,
}

impl VladCodebook {
    /// `centroids` is `[k, d]`: finite, with no two rows identical.
    pub fn new(centroids: Tensor) -> Result<Self> {
        if centroids.shape().len() != 2 {
            return shape_err(format!("centroids must be [k, d], got {:?}", centroids.shape()));
        }
        centroids.check_finite("centroids")?;
        let k = centroids.rows();
        for a in 0..k {
            for b in a + 1..k {
                if centroids.row(a) == centroids.row(b) {
                    return Err(Error::InvalidArgument(format!("centroids {a} and {b} coincide")));
                }
            }
        }
        Ok(Self { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    /// Index and squared distance of the closest centroid; lowest index on ties.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        nearest(&self.centroids, x)
    }
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Tensor, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sqdist(centroids.row(c), x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Sums of residuals to the nearest centroid, concatenated and scaled to
/// unit length. All-zero residuals give the zero vector.
pub fn vlad_encode(descriptors: &Tensor, codebook: &VladCodebook) -> Result<Tensor> {
    let d = codebook.dim();
    if descriptors.shape().len() != 2 || descriptors.cols() != d {
        return shape_err(format!(
            "descriptors {:?} do not match codebook dimension {d}",
            descriptors.shape()
        ));
    }
    let mut v = vec![0.0; codebook.k() * d];
    for i in 0..descriptors.rows() {
        let x = descriptors.row(i);
        let (c, _) = codebook.nearest(x);
        let centroid = codebook.centroids.row(c);
        for ((acc, xi), ci) in v[c * d..(c + 1) * d].iter_mut().zip(x).zip(centroid) {
            *acc += xi - ci;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    Tensor::new(&[codebook.k() * d], v)
}

/// Replaces every descriptor matrix of `index` by its VLAD vector.
pub fn vlad_index(index: &RetrievalIndex, codebook: &VladCodebook) -> Result<RetrievalIndex> {
    let entries = index
        .entries
        .par_iter()
        .map(|e| {
            Ok(IndexEntry {
                image_id: e.image_id,
                object_id: e.object_id,
                item: vlad_encode(&e.item, codebook)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::new(entries)
}

/// VLAD retrieval scores over an index of descriptor matrices.
pub fn evaluate_vlad(index: &RetrievalIndex, codebook: &VladCodebook) -> Result<Scores> {
    let vlads = vlad_index(index, codebook)?;
    evaluate(&vlads, |q| vlad_retrieve(q, &vlads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub codebook: VladCodebook,
    pub assignments: Vec<usize>,
    /// Mean squared distance to the assigned centroid after each
    /// assignment step.
    pub distortion: Vec<f64>,
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` updates have run. A cluster left empty is moved
/// onto the point farthest from its current centroid.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    if points.shape().len() != 2 {
        return shape_err(format!("points must be [m, d], got {:?}", points.shape()));
    }
    points.check_finite("k-means input")?;
    let m = points.rows();
    if k == 0 || m < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 1 <= k <= m, got k = {k}, m = {m}"
        )));
    }
    let d = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.random_range(0..m)];
    let mut closest: Vec<f64> = (0..m).map(|i| sqdist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = closest.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(format!("fewer than {k} distinct points")));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = m - 1;
        for (i, &w) in closest.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        // guard against rounding landing on an existing centroid
        if closest[pick] == 0.0 {
            pick = closest.iter().rposition(|&w| w > 0.0).expect("positive total");
        }
        chosen.push(pick);
        for (i, c) in closest.iter_mut().enumerate() {
            *c = c.min(sqdist(points.row(i), points.row(pick)));
        }
    }
    let mut centroids = Tensor::zeros(&[k, d]);
    for (c, &i) in chosen.iter().enumerate() {
        centroids.data_mut()[c * d..(c + 1) * d].copy_from_slice(points.row(i));
    }

    let mut assignments = vec![usize::MAX; m];
    let mut distortion = Vec::new();
    for _ in 0..=max_iters {
        let mut changed = false;
        let mut total = 0.0;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (c, dist) = nearest(&centroids, points.row(i));
            total += dist;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        distortion.push(total / m as f64);
        if !changed || distortion.len() > max_iters {
            break;
        }
        update_centroids(points, &assignments, &mut centroids);
    }
    Ok(KMeansFit {
        codebook: VladCodebook::new(centroids)?,
        assignments,
        distortion,
    })
}

fn update_centroids(points: &Tensor, assignments: &[usize], centroids: &mut Tensor) {
    let (k, d) = (centroids.rows(), centroids.cols());
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for (dst, s) in centroids.data_mut()[c * d..(c + 1) * d].iter_mut().zip(&sums[c * d..]) {
                *dst = s / counts[c] as f64;
            }
        }
    }
    for c in (0..k).filter(|&c| counts[c] == 0) {
        let far = (0..points.rows())
            .map(|i| (i, sqdist(points.row(i), centroids.row(assignments[i]))))
            .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
        centroids.data_mut()[c * d..(c + 1) * d].copy_from_slice(points.row(far.0));
    }
}
