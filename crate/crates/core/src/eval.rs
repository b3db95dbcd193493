//! Quantitative evaluation: silhouette width, adjusted Rand index, k-means
//! with restarts, mean-difference goodness-of-fit tables, an MST lineage
//! skeleton over cluster centroids, and a log-count PCA baseline.

use crate::data::{CountMatrix, DesignMatrices};
use crate::error::{Error, Result};
use crate::model::{compute_psi, ModelState};
use crate::rng::RngStream;
use crate::scalar::{psi_clamp_bound, Real};
use nalgebra::{DMatrix, DVector};

/// A low-dimensional representation: one column per cell, with optional
/// cluster labels.
#[derive(Debug, Clone)]
pub struct Embedding<T: Real> {
    pub points: DMatrix<T>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Real> Embedding<T> {
    pub fn new(points: DMatrix<T>, labels: Option<Vec<usize>>) -> Result<Self> {
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "embedding points".to_string(),
            });
        }
        if let Some(ls) = &labels {
            if ls.len() != points.ncols() {
                return Err(Error::dim("labels vs points", points.ncols(), ls.len()));
            }
        }
        Ok(Embedding { points, labels })
    }
}

fn sq_dist<T: Real>(points: &DMatrix<T>, a: usize, b: usize) -> T {
    let mut acc = T::zero();
    for d in 0..points.nrows() {
        let diff = points[(d, a)] - points[(d, b)];
        acc += diff * diff;
    }
    acc
}

fn cluster_members(labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let n_clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_clusters];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    if members.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    if let Some(empty) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::invalid(format!("cluster {empty} is empty")));
    }
    Ok(members)
}

/// Silhouette widths s_j = (b_j - a_j) / max(a_j, b_j) under Euclidean
/// distance, with a_j the mean distance to the sample's own cluster
/// (excluding itself) and b_j the smallest mean distance to any other
/// cluster. Singleton clusters and the 0/0 case score 0. Returns the
/// per-sample widths and their average.
pub fn silhouette_width<T: Real>(points: &DMatrix<T>, labels: &[usize]) -> Result<(Vec<T>, T)> {
    let n = points.ncols();
    if labels.len() != n {
        return Err(Error::dim("labels vs points", n, labels.len()));
    }
    let members = cluster_members(labels)?;
    let mut widths = Vec::with_capacity(n);
    for i in 0..n {
        let own = labels[i];
        let a = if members[own].len() <= 1 {
            // Singleton: defined as s = 0 below via a = b = 0.
            T::zero()
        } else {
            let sum: T = members[own]
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| sq_dist(points, i, j).sqrt())
                .sum();
            sum / T::of((members[own].len() - 1) as f64)
        };
        let mut b = T::of(f64::INFINITY);
        for (c, m) in members.iter().enumerate() {
            if c == own {
                continue;
            }
            let sum: T = m.iter().map(|&j| sq_dist(points, i, j).sqrt()).sum();
            b = b.min(sum / T::of(m.len() as f64));
        }
        let s = if members[own].len() <= 1 {
            T::zero()
        } else if a.max(b) == T::zero() {
            T::zero()
        } else {
            (b - a) / a.max(b)
        };
        widths.push(s);
    }
    let avg = widths.iter().copied().sum::<T>() / T::of(n as f64);
    Ok((widths, avg))
}

fn comb2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items, in
/// [-1, 1]; 1 iff the partitions are identical.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("label vectors", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty labelings"));
    }
    let ka = a.iter().copied().max().unwrap() + 1;
    let kb = b.iter().copied().max().unwrap() + 1;
    let mut table = vec![0u64; ka * kb];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let n = a.len() as f64;
    let sum_cells: f64 = table.iter().map(|&c| comb2(c as f64)).sum();
    let sum_rows: f64 = rows.iter().map(|&c| comb2(c as f64)).sum();
    let sum_cols: f64 = cols.iter().map(|&c| comb2(c as f64)).sum();
    let expected = sum_rows * sum_cols / comb2(n);
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom == 0.0 {
        // Degenerate partitions (all-singletons or one cluster on both
        // sides): 1 when they agree, 0 otherwise.
        return Ok(if sum_cells == max_index { 1.0 } else { 0.0 });
    }
    Ok((sum_cells - expected) / denom)
}

/// k-means fit detail: labels, centroids (one column per cluster), final
/// within-cluster SSE, and the SSE trace of the winning restart.
#[derive(Debug, Clone)]
pub struct KmeansFit<T: Real> {
    pub labels: Vec<usize>,
    pub centroids: DMatrix<T>,
    pub sse: T,
    pub sse_trace: Vec<T>,
}

/// Lloyd's algorithm with k-means++ seeding, best of `restarts` runs by
/// within-cluster SSE.
pub fn kmeans_detail<T: Real>(
    points: &DMatrix<T>,
    k: usize,
    restarts: usize,
    rng: &RngStream,
) -> Result<KmeansFit<T>> {
    let n = points.ncols();
    let d = points.nrows();
    if k == 0 || k > n {
        return Err(Error::domain(format!("k = {k} outside 1..={n}")));
    }
    let mut best: Option<KmeansFit<T>> = None;
    for restart in 0..restarts.max(1) {
        let mut rng = rng.substream(restart as u64);
        // k-means++ seeding
        let mut centroids = DMatrix::zeros(d, k);
        let first = (T::open01(&mut rng).to_f64().unwrap() * n as f64) as usize % n;
        centroids.set_column(0, &points.column(first));
        let mut min_d2 = vec![T::zero(); n];
        for i in 0..n {
            min_d2[i] = col_sq_dist(points, i, &centroids, 0);
        }
        for c in 1..k {
            let total: T = min_d2.iter().copied().sum();
            let pick = if total > T::zero() {
                let target = T::open01(&mut rng) * total;
                let mut acc = T::zero();
                let mut chosen = n - 1;
                for (i, &d2) in min_d2.iter().enumerate() {
                    acc += d2;
                    if target < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            } else {
                (T::open01(&mut rng).to_f64().unwrap() * n as f64) as usize % n
            };
            centroids.set_column(c, &points.column(pick));
            for i in 0..n {
                min_d2[i] = min_d2[i].min(col_sq_dist(points, i, &centroids, c));
            }
        }

        // Lloyd iterations
        let mut labels = vec![0usize; n];
        let mut sse_trace = Vec::new();
        let mut prev_sse = T::of(f64::INFINITY);
        for _ in 0..100 {
            let mut sse = T::zero();
            for i in 0..n {
                let mut best_c = 0;
                let mut best_d = col_sq_dist(points, i, &centroids, 0);
                for c in 1..k {
                    let dd = col_sq_dist(points, i, &centroids, c);
                    if dd < best_d {
                        best_d = dd;
                        best_c = c;
                    }
                }
                labels[i] = best_c;
                sse += best_d;
            }
            sse_trace.push(sse);
            let mut sums = DMatrix::<T>::zeros(d, k);
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[labels[i]] += 1;
                for row in 0..d {
                    sums[(row, labels[i])] += points[(row, i)];
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    let inv = T::one() / T::of(counts[c] as f64);
                    for row in 0..d {
                        centroids[(row, c)] = sums[(row, c)] * inv;
                    }
                }
                // Empty clusters keep their previous centroid.
            }
            if sse >= prev_sse {
                break;
            }
            prev_sse = sse;
        }
        let fit = KmeansFit {
            labels,
            centroids,
            sse: *sse_trace.last().unwrap(),
            sse_trace,
        };
        let better = match &best {
            Some(b) => fit.sse < b.sse,
            None => true,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

fn col_sq_dist<T: Real>(points: &DMatrix<T>, i: usize, centroids: &DMatrix<T>, c: usize) -> T {
    let mut acc = T::zero();
    for d in 0..points.nrows() {
        let diff = points[(d, i)] - centroids[(d, c)];
        acc += diff * diff;
    }
    acc
}

/// Cluster labels from k-means with the default 8 restarts.
pub fn kmeans<T: Real>(
    points: &DMatrix<T>,
    k: usize,
    rng: &RngStream,
) -> Result<Vec<usize>> {
    Ok(kmeans_detail(points, k, 8, rng)?.labels)
}

/// One bin of a mean-difference table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdBin<T> {
    pub x_mean: T,
    pub y_mean: T,
    pub y_sd: T,
    pub count: usize,
}

/// Mean-difference data: per entry x = (n + e)/2 and y = n - e with e the
/// model-expected count, plus an equal-count binned running mean.
#[derive(Debug, Clone)]
pub struct MdTable<T> {
    pub pairs: Vec<(T, T)>,
    pub bins: Vec<MdBin<T>>,
}

/// Build the mean-difference table over every (gene, cell) entry at the
/// given state, with `n_bins` equal-count bins (the running-mean stand-in
/// for a local regression fit).
pub fn md_plot_data<T: Real>(
    counts: &CountMatrix,
    state: &ModelState<T>,
    designs: &DesignMatrices<T>,
    n_bins: usize,
) -> Result<MdTable<T>> {
    let psi = compute_psi(&state.params, designs);
    let bound = psi_clamp_bound::<T>();
    let v_genes = counts.n_genes();
    let j_cells = counts.n_cells();
    let half = T::of(0.5);
    let mut pairs = Vec::with_capacity(v_genes * j_cells);
    for j in 0..j_cells {
        let r_j = state.params.r[j];
        let mut nz = counts.col(j).iter().peekable();
        for v in 0..v_genes {
            let ps = psi[(v, j)];
            if ps >= bound {
                return Err(Error::domain(format!(
                    "expected count diverges at ({v}, {j})"
                )));
            }
            let e = r_j * ps.exp();
            let n = match nz.peek() {
                Some(&&(g, n)) if g as usize == v => {
                    nz.next();
                    T::of(n as f64)
                }
                _ => T::zero(),
            };
            pairs.push(((n + e) * half, n - e));
        }
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        pairs[a]
            .0
            .partial_cmp(&pairs[b].0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let n_bins = n_bins.max(1).min(pairs.len());
    let mut bins = Vec::with_capacity(n_bins);
    let total = pairs.len();
    for b in 0..n_bins {
        let start = b * total / n_bins;
        let end = (b + 1) * total / n_bins;
        let count = end - start;
        if count == 0 {
            continue;
        }
        let mut x_sum = T::zero();
        let mut y_sum = T::zero();
        for &idx in &order[start..end] {
            x_sum += pairs[idx].0;
            y_sum += pairs[idx].1;
        }
        let cf = T::of(count as f64);
        let x_mean = x_sum / cf;
        let y_mean = y_sum / cf;
        let mut ssq = T::zero();
        for &idx in &order[start..end] {
            let d = pairs[idx].1 - y_mean;
            ssq += d * d;
        }
        let y_sd = if count > 1 {
            (ssq / T::of((count - 1) as f64)).sqrt()
        } else {
            T::zero()
        };
        bins.push(MdBin {
            x_mean,
            y_mean,
            y_sd,
            count,
        });
    }
    Ok(MdTable { pairs, bins })
}

/// Minimum spanning tree over Euclidean distances between centroid
/// columns (Kruskal with deterministic lexicographic tie-breaks). Returns
/// edges as (i, j) with i < j.
pub fn mst_lineage<T: Real>(centroids: &DMatrix<T>) -> Result<Vec<(usize, usize)>> {
    let c = centroids.ncols();
    if c < 2 {
        return Err(Error::domain(format!("MST needs >= 2 centroids, got {c}")));
    }
    let mut edges = Vec::with_capacity(c * (c - 1) / 2);
    for i in 0..c {
        for j in (i + 1)..c {
            edges.push((sq_dist(centroids, i, j), i, j));
        }
    }
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut parent: Vec<usize> = (0..c).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = x;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    let mut out = Vec::with_capacity(c - 1);
    for (_, i, j) in edges {
        let ri = find(&mut parent, i);
        let rj = find(&mut parent, j);
        if ri != rj {
            parent[ri] = rj;
            out.push((i, j));
            if out.len() == c - 1 {
                break;
            }
        }
    }
    Ok(out)
}

/// Total Euclidean weight of an edge list over centroid columns.
pub fn tree_weight<T: Real>(centroids: &DMatrix<T>, edges: &[(usize, usize)]) -> T {
    edges
        .iter()
        .map(|&(i, j)| sq_dist(centroids, i, j).sqrt())
        .sum()
}

const PCA_INIT_SEED: u64 = 0x9ca_ba5e;

/// Log-count PCA baseline: log(1 + count) with optional per-cell
/// total-count normalization to the median depth, gene centering, and the
/// top principal scores extracted by power iteration with deflation on the
/// cells-side Gram matrix.
pub fn pca_baseline<T: Real>(
    counts: &CountMatrix,
    dims: usize,
    total_count_normalize: bool,
) -> Result<Embedding<T>> {
    let v_genes = counts.n_genes();
    let j_cells = counts.n_cells();
    if dims == 0 || dims > v_genes.min(j_cells) {
        return Err(Error::domain(format!(
            "dims = {dims} outside 1..={}",
            v_genes.min(j_cells)
        )));
    }
    let totals = counts.cell_totals();
    let mut sorted = totals.clone();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2].max(1) as f64;
    let mut y = DMatrix::<T>::zeros(v_genes, j_cells);
    for (v, j, n) in counts.iter_nonzero() {
        let scale = if total_count_normalize && totals[j] > 0 {
            median / totals[j] as f64
        } else {
            1.0
        };
        y[(v, j)] = T::of((n as f64 * scale).ln_1p());
    }
    // Center genes.
    let inv_j = T::one() / T::of(j_cells as f64);
    for v in 0..v_genes {
        let mean: T = y.row(v).iter().copied().sum::<T>() * inv_j;
        for j in 0..j_cells {
            y[(v, j)] -= mean;
        }
    }
    let gram = y.tr_mul(&y); // J x J

    let mut points = DMatrix::zeros(dims, j_cells);
    let mut eigvecs: Vec<DVector<T>> = Vec::with_capacity(dims);
    let mut eigvals: Vec<T> = Vec::with_capacity(dims);
    for comp in 0..dims {
        let mut rng = RngStream::new(PCA_INIT_SEED, comp as u64);
        let mut v = DVector::from_fn(j_cells, |_, _| T::std_normal(&mut rng));
        v /= v.norm();
        let mut lambda = T::zero();
        for _ in 0..5000 {
            let mut w = &gram * &v;
            for (u, &l) in eigvecs.iter().zip(&eigvals) {
                let proj = u.dot(&w);
                w.axpy(-proj, u, T::one());
                let _ = l;
            }
            let norm = w.norm();
            if norm == T::zero() {
                break;
            }
            w /= norm;
            if w.dot(&v) < T::zero() {
                w = -w;
            }
            let delta = (&w - &v).norm();
            v = w;
            lambda = v.dot(&(&gram * &v));
            if delta < T::of(1e-14) {
                break;
            }
        }
        // Sign convention: largest-magnitude coordinate positive.
        let mut max_idx = 0;
        for i in 0..j_cells {
            if v[i].abs() > v[max_idx].abs() {
                max_idx = i;
            }
        }
        if v[max_idx] < T::zero() {
            v = -v;
        }
        let scale = lambda.max(T::zero()).sqrt();
        for j in 0..j_cells {
            points[(comp, j)] = scale * v[j];
        }
        eigvecs.push(v);
        eigvals.push(lambda);
    }
    Embedding::new(points, None)
}
