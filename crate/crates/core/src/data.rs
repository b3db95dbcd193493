//! Input data containers: the sparse count matrix, covariate design
//! matrices, and fixed model constants.

use crate::error::{Error, Result};
use crate::scalar::Real;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Sparse genes x cells matrix of non-negative read counts.
///
/// Zeros are implicit; every stored entry is >= 1. Both per-cell (column)
/// and per-gene (row) adjacency are kept because Gibbs phases alternate
/// between cell-major and gene-major traversal, and zero counts still carry
/// likelihood terms so sweeps walk the full dense index set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    n_genes: usize,
    n_cells: usize,
    /// cols[j] = sorted (gene index, count) pairs for cell j.
    cols: Vec<Vec<(u32, u32)>>,
    /// rows[v] = sorted (cell index, count) pairs for gene v.
    rows: Vec<Vec<(u32, u32)>>,
    nnz: usize,
    total: u64,
}

impl CountMatrix {
    /// Build from (gene, cell, count) triplets. Zero counts are dropped;
    /// duplicate or out-of-range coordinates are rejected.
    pub fn from_triplets<I>(n_genes: usize, n_cells: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, u32)>,
    {
        if n_genes == 0 || n_cells == 0 {
            return Err(Error::invalid(format!(
                "count matrix dimensions must be >= 1, got {n_genes} x {n_cells}"
            )));
        }
        let mut cols: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_cells];
        for (v, j, n) in triplets {
            if v >= n_genes || j >= n_cells {
                return Err(Error::IndexOutOfRange {
                    context: format!(
                        "count entry ({v}, {j}) outside {n_genes} x {n_cells}"
                    ),
                });
            }
            if n == 0 {
                continue;
            }
            cols[j].push((v as u32, n));
        }
        let mut nnz = 0usize;
        let mut total = 0u64;
        let mut rows: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_genes];
        for (j, col) in cols.iter_mut().enumerate() {
            col.sort_unstable_by_key(|&(v, _)| v);
            for w in col.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::invalid(format!(
                        "duplicate count entry at gene {}, cell {j}",
                        w[0].0
                    )));
                }
            }
            for &(v, n) in col.iter() {
                rows[v as usize].push((j as u32, n));
                nnz += 1;
                total += u64::from(n);
            }
        }
        // rows are filled in increasing j order, already sorted
        Ok(CountMatrix {
            n_genes,
            n_cells,
            cols,
            rows,
            nnz,
            total,
        })
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn total_count(&self) -> u64 {
        self.total
    }

    /// Fraction of the dense index set holding a zero.
    pub fn zero_fraction(&self) -> f64 {
        1.0 - self.nnz as f64 / (self.n_genes as f64 * self.n_cells as f64)
    }

    /// Sorted nonzero entries of cell j as (gene, count).
    pub fn col(&self, j: usize) -> &[(u32, u32)] {
        &self.cols[j]
    }

    /// Sorted nonzero entries of gene v as (cell, count).
    pub fn row(&self, v: usize) -> &[(u32, u32)] {
        &self.rows[v]
    }

    /// Count at (v, j); zero when not stored.
    pub fn get(&self, v: usize, j: usize) -> u32 {
        match self.cols[j].binary_search_by_key(&(v as u32), |&(g, _)| g) {
            Ok(i) => self.cols[j][i].1,
            Err(_) => 0,
        }
    }

    /// All nonzero entries in (cell-major) order.
    pub fn iter_nonzero(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.cols.iter().enumerate().flat_map(|(j, col)| {
            col.iter().map(move |&(v, n)| (v as usize, j, n))
        })
    }

    /// Per-cell total read counts.
    pub fn cell_totals(&self) -> Vec<u64> {
        self.cols
            .iter()
            .map(|c| c.iter().map(|&(_, n)| u64::from(n)).sum())
            .collect()
    }

    /// Restrict to the given genes (in the given order).
    pub fn select_genes(&self, keep: &[usize]) -> Result<CountMatrix> {
        let mut triplets = Vec::new();
        for (new_v, &v) in keep.iter().enumerate() {
            if v >= self.n_genes {
                return Err(Error::IndexOutOfRange {
                    context: format!("gene {v} outside 0..{}", self.n_genes),
                });
            }
            for &(j, n) in self.row(v) {
                triplets.push((new_v, j as usize, n));
            }
        }
        CountMatrix::from_triplets(keep.len(), self.n_cells, triplets)
    }
}

/// Known covariates: one column per cell on the cell side (P x J) and one
/// column per gene on the gene side (Q x V). Either block may have zero
/// rows. When an intercept flag is set the first row must be all ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices<T: Real> {
    pub cell: DMatrix<T>,
    pub gene: DMatrix<T>,
    pub cell_intercept: bool,
    pub gene_intercept: bool,
}

impl<T: Real> DesignMatrices<T> {
    pub fn new(
        cell: DMatrix<T>,
        gene: DMatrix<T>,
        cell_intercept: bool,
        gene_intercept: bool,
    ) -> Result<Self> {
        for (name, m) in [("cell", &cell), ("gene", &gene)] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("{name} covariates contain a non-finite entry"),
                });
            }
        }
        if cell_intercept && (cell.nrows() == 0 || cell.row(0).iter().any(|x| *x != T::one()))
        {
            return Err(Error::invalid(
                "cell intercept flag set but first covariate row is not all ones",
            ));
        }
        if gene_intercept && (gene.nrows() == 0 || gene.row(0).iter().any(|x| *x != T::one()))
        {
            return Err(Error::invalid(
                "gene intercept flag set but first covariate row is not all ones",
            ));
        }
        Ok(DesignMatrices {
            cell,
            gene,
            cell_intercept,
            gene_intercept,
        })
    }

    /// Intercept-only designs for a V x J count matrix.
    pub fn intercept_only(n_genes: usize, n_cells: usize) -> Self {
        DesignMatrices {
            cell: DMatrix::from_element(1, n_cells, T::one()),
            gene: DMatrix::from_element(1, n_genes, T::one()),
            cell_intercept: true,
            gene_intercept: true,
        }
    }

    /// Number of cell-level covariates P.
    pub fn n_cell_covariates(&self) -> usize {
        self.cell.nrows()
    }

    /// Number of gene-level covariates Q.
    pub fn n_gene_covariates(&self) -> usize {
        self.gene.nrows()
    }

    /// Check column counts against a count matrix.
    pub fn check_dims(&self, counts: &CountMatrix) -> Result<()> {
        if self.cell.ncols() != counts.n_cells() {
            return Err(Error::dim(
                "cell covariate columns vs cells",
                counts.n_cells(),
                self.cell.ncols(),
            ));
        }
        if self.gene.ncols() != counts.n_genes() {
            return Err(Error::dim(
                "gene covariate columns vs genes",
                counts.n_genes(),
                self.gene.ncols(),
            ));
        }
        Ok(())
    }
}

/// Fixed constants of a model run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Hyperparams<T: Real> {
    /// Gamma shape shared by the dispersion, precision, and rate priors.
    pub e0: T,
    /// Gamma rate shared by the precision and rate priors.
    pub f0: T,
    /// Number of latent factors K.
    pub k: usize,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl<T: Real> Hyperparams<T> {
    pub fn new(k: usize) -> Self {
        Hyperparams {
            e0: T::of(0.01),
            f0: T::of(0.01),
            k,
            n_iterations: 2000,
            burn_in: 1000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e0 > T::zero()) || !(self.f0 > T::zero()) {
            return Err(Error::domain("e0 and f0 must be positive"));
        }
        if self.k == 0 {
            return Err(Error::domain("K must be >= 1"));
        }
        if self.burn_in >= self.n_iterations {
            return Err(Error::domain(format!(
                "burn-in ({}) must be smaller than the iteration count ({})",
                self.burn_in, self.n_iterations
            )));
        }
        // Iteration index is packed into 20 bits of the stream id.
        if self.n_iterations >= (1 << 20) {
            return Err(Error::domain(
                "iteration counts above 2^20 are not supported",
            ));
        }
        Ok(())
    }
}
