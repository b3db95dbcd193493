//! Model state and probability computations for the hierarchical
//! gamma-negative binomial factor model.
//!
//! Counts follow n_vj ~ NB(r_j, p_vj) with
//! logit(p_vj) = beta_v' x_j + delta_j' z_v + phi_v' theta_j. Zero counts
//! carry likelihood mass ((1-p)^r), so every computation here walks the
//! full dense index set even though counts are stored sparse.

use crate::data::{CountMatrix, DesignMatrices, Hyperparams};
use crate::error::{Error, Result};
use crate::scalar::{clamp_psi, ln_gamma, psi_clamp_bound, sigmoid, softplus, Real};
use nalgebra::{DMatrix, DVector};

/// Problem dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_genes: usize,
    pub n_cells: usize,
    pub n_factors: usize,
    pub n_cell_covariates: usize,
    pub n_gene_covariates: usize,
}

/// The inferential parameter blocks of one MCMC iteration.
///
/// Matrices are column-per-unit: `beta` is P x V (column v = beta_v),
/// `delta` is Q x J, `phi` is K x V, `theta` is K x J.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState<T: Real> {
    /// Cell-level NB dispersions r_j (length J, all positive).
    pub r: DVector<T>,
    /// Rate of the gamma prior on r.
    pub h: T,
    /// Gene regression coefficients (P x V).
    pub beta: DMatrix<T>,
    /// Cell regression coefficients (Q x J).
    pub delta: DMatrix<T>,
    /// Factor loadings (K x V).
    pub phi: DMatrix<T>,
    /// Factor scores (K x J).
    pub theta: DMatrix<T>,
    /// ARD precisions of the beta rows (length P).
    pub alpha: DVector<T>,
    /// ARD precisions of the delta rows (length Q).
    pub eta: DVector<T>,
    /// Precisions of the theta rows (length K).
    pub gamma: DVector<T>,
}

impl<T: Real> ParamState<T> {
    pub fn zeros(dims: Dims) -> Self {
        ParamState {
            r: DVector::from_element(dims.n_cells, T::one()),
            h: T::one(),
            beta: DMatrix::zeros(dims.n_cell_covariates, dims.n_genes),
            delta: DMatrix::zeros(dims.n_gene_covariates, dims.n_cells),
            phi: DMatrix::zeros(dims.n_factors, dims.n_genes),
            theta: DMatrix::zeros(dims.n_factors, dims.n_cells),
            alpha: DVector::from_element(dims.n_cell_covariates, T::one()),
            eta: DVector::from_element(dims.n_gene_covariates, T::one()),
            gamma: DVector::from_element(dims.n_factors, T::one()),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n_genes: self.beta.ncols(),
            n_cells: self.delta.ncols(),
            n_factors: self.phi.nrows(),
            n_cell_covariates: self.beta.nrows(),
            n_gene_covariates: self.delta.nrows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r.iter().any(|x| !(*x > T::zero()) || !x.is_finite()) {
            return Err(Error::domain("dispersions must be positive and finite"));
        }
        if !(self.h > T::zero()) || !self.h.is_finite() {
            return Err(Error::domain("dispersion rate h must be positive and finite"));
        }
        for (name, v) in [("alpha", &self.alpha), ("eta", &self.eta), ("gamma", &self.gamma)] {
            if v.iter().any(|x| !(*x > T::zero()) || !x.is_finite()) {
                return Err(Error::domain(format!("{name} precisions must be positive and finite")));
            }
        }
        for (name, m) in [
            ("beta", &self.beta),
            ("delta", &self.delta),
            ("phi", &self.phi),
            ("theta", &self.theta),
        ] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("parameter block {name}"),
                });
            }
        }
        Ok(())
    }
}

/// CRT auxiliary counts, stored aligned with the nonzero structure of the
/// count matrix (ell_vj = 0 wherever n_vj = 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrtCounts {
    /// cols[j][i] pairs with counts.col(j)[i].
    pub cols: Vec<Vec<u32>>,
}

impl CrtCounts {
    pub fn zeros_like(counts: &CountMatrix) -> Self {
        CrtCounts {
            cols: (0..counts.n_cells())
                .map(|j| vec![0u32; counts.col(j).len()])
                .collect(),
        }
    }

    /// ell at (v, j); zero when n_vj = 0.
    pub fn get(&self, counts: &CountMatrix, v: usize, j: usize) -> u32 {
        match counts.col(j).binary_search_by_key(&(v as u32), |&(g, _)| g) {
            Ok(i) => self.cols[j][i],
            Err(_) => 0,
        }
    }

    /// Sum of ell over genes for cell j.
    pub fn col_sum(&self, j: usize) -> u64 {
        self.cols[j].iter().map(|&l| u64::from(l)).sum()
    }
}

/// All latent variables of one MCMC iteration: the parameter blocks plus
/// the data-augmentation auxiliaries. Mutated only by the Gibbs engine;
/// safe to share read-only between sweep phases.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Real> {
    pub params: ParamState<T>,
    /// Polya-Gamma auxiliaries (V x J). Empty (0 x 0) when the engine runs
    /// in recompute mode and never materializes them.
    pub omega: DMatrix<T>,
    /// CRT auxiliaries, aligned with the count matrix nonzeros.
    pub crt: CrtCounts,
}

impl<T: Real> ModelState<T> {
    /// Fresh state with auxiliaries sized for `counts`.
    pub fn with_dims(dims: Dims, counts: &CountMatrix) -> Self {
        ModelState {
            params: ParamState::zeros(dims),
            omega: DMatrix::from_element(dims.n_genes, dims.n_cells, T::of(0.25)),
            crt: CrtCounts::zeros_like(counts),
        }
    }

    /// Re-align the CRT block with a new count matrix of identical shape
    /// (the values are redrawn at the start of every sweep before use).
    pub fn reset_crt(&mut self, counts: &CountMatrix) {
        self.crt = CrtCounts::zeros_like(counts);
    }

    pub fn validate(&self, counts: &CountMatrix) -> Result<()> {
        self.params.validate()?;
        let dims = self.params.dims();
        if dims.n_genes != counts.n_genes() || dims.n_cells != counts.n_cells() {
            return Err(Error::dim(
                "state vs counts",
                format!("{} x {}", dims.n_genes, dims.n_cells),
                format!("{} x {}", counts.n_genes(), counts.n_cells()),
            ));
        }
        if !self.omega.is_empty() {
            if self.omega.nrows() != dims.n_genes || self.omega.ncols() != dims.n_cells {
                return Err(Error::dim(
                    "omega vs counts",
                    format!("{} x {}", dims.n_genes, dims.n_cells),
                    format!("{} x {}", self.omega.nrows(), self.omega.ncols()),
                ));
            }
            if self.omega.iter().any(|x| !(*x >= T::zero()) || !x.is_finite()) {
                return Err(Error::domain("omega entries must be non-negative and finite"));
            }
        }
        for j in 0..counts.n_cells() {
            let col = counts.col(j);
            if self.crt.cols[j].len() != col.len() {
                return Err(Error::invalid("CRT block misaligned with counts"));
            }
            for (i, &(_, n)) in col.iter().enumerate() {
                if self.crt.cols[j][i] > n {
                    return Err(Error::domain("CRT count exceeds observed count"));
                }
            }
        }
        Ok(())
    }
}

/// Check that state, designs, and counts agree on every dimension.
pub fn check_consistent<T: Real>(
    params: &ParamState<T>,
    designs: &DesignMatrices<T>,
    counts: &CountMatrix,
) -> Result<()> {
    designs.check_dims(counts)?;
    let dims = params.dims();
    if dims.n_genes != counts.n_genes() || dims.n_cells != counts.n_cells() {
        return Err(Error::dim(
            "parameter blocks vs counts",
            format!("{} x {}", counts.n_genes(), counts.n_cells()),
            format!("{} x {}", dims.n_genes, dims.n_cells),
        ));
    }
    if dims.n_cell_covariates != designs.n_cell_covariates() {
        return Err(Error::dim(
            "beta rows vs cell covariates",
            designs.n_cell_covariates(),
            dims.n_cell_covariates,
        ));
    }
    if dims.n_gene_covariates != designs.n_gene_covariates() {
        return Err(Error::dim(
            "delta rows vs gene covariates",
            designs.n_gene_covariates(),
            dims.n_gene_covariates,
        ));
    }
    if params.theta.nrows() != dims.n_factors {
        return Err(Error::dim("theta rows vs factors", dims.n_factors, params.theta.nrows()));
    }
    Ok(())
}

/// The NB logit psi_vj = beta_v' x_j + delta_j' z_v + phi_v' theta_j for a
/// single entry.
pub fn logit_psi<T: Real>(
    state: &ModelState<T>,
    designs: &DesignMatrices<T>,
    v: usize,
    j: usize,
) -> Result<T> {
    let dims = state.params.dims();
    if v >= dims.n_genes || j >= dims.n_cells {
        return Err(Error::IndexOutOfRange {
            context: format!(
                "({v}, {j}) outside {} x {}",
                dims.n_genes, dims.n_cells
            ),
        });
    }
    if designs.n_cell_covariates() != dims.n_cell_covariates
        || designs.n_gene_covariates() != dims.n_gene_covariates
        || designs.cell.ncols() != dims.n_cells
        || designs.gene.ncols() != dims.n_genes
    {
        return Err(Error::dim(
            "designs vs state",
            format!("P={}, Q={}", dims.n_cell_covariates, dims.n_gene_covariates),
            format!("P={}, Q={}", designs.n_cell_covariates(), designs.n_gene_covariates()),
        ));
    }
    let p = &state.params;
    let psi = p.beta.column(v).dot(&designs.cell.column(j))
        + p.delta.column(j).dot(&designs.gene.column(v))
        + p.phi.column(v).dot(&p.theta.column(j));
    if !psi.is_finite() {
        return Err(Error::NonFinite {
            context: format!("psi at ({v}, {j})"),
        });
    }
    Ok(psi)
}

/// Dense V x J matrix of NB logits, built with three small matrix products.
pub fn compute_psi<T: Real>(params: &ParamState<T>, designs: &DesignMatrices<T>) -> DMatrix<T> {
    let mut psi = params.beta.tr_mul(&designs.cell);
    psi += designs.gene.tr_mul(&params.delta);
    psi += params.phi.tr_mul(&params.theta);
    psi
}

/// Log PMF of NB(r, p) at n: ln Gamma(n+r) - ln n! - ln Gamma(r)
/// + n ln p + r ln(1-p).
pub fn nb_log_pmf<T: Real>(n: u64, r: T, p: T) -> Result<T> {
    if !(r > T::zero()) || !r.is_finite() {
        return Err(Error::domain(format!("NB dispersion must be positive, got {r}")));
    }
    if !(p > T::zero() && p < T::one()) {
        return Err(Error::domain(format!("NB probability must lie in (0,1), got {p}")));
    }
    let nf = T::of(n as f64);
    Ok(ln_gamma(nf + r) - ln_gamma(nf + T::one()) - ln_gamma(r) + nf * p.ln()
        + r * (T::one() - p).ln())
}

/// Log-likelihood value plus the number of probability clamps applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLik<T> {
    pub value: T,
    pub clamp_events: u64,
}

/// Full-data log-likelihood sum_{v,j} log NB(n_vj; r_j, sigmoid(psi_vj)),
/// including every zero entry. Probabilities are clamped to
/// [prob_floor, 1 - prob_floor] before log transforms and the clamp count
/// is reported.
pub fn log_likelihood_detail<T: Real>(
    counts: &CountMatrix,
    params: &ParamState<T>,
    designs: &DesignMatrices<T>,
) -> Result<LogLik<T>> {
    check_consistent(params, designs, counts)?;
    let psi = compute_psi(params, designs);
    let v_genes = counts.n_genes();
    let mut clamps = 0u64;
    let mut total = T::zero();
    for j in 0..counts.n_cells() {
        let r = params.r[j];
        let lg_r = ln_gamma(r);
        let col = psi.column(j);
        // r ln(1-p) = -r softplus(psi) accumulated over the dense column.
        let mut sp_sum = T::zero();
        for v in 0..v_genes {
            let raw = col[v];
            if !raw.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("psi at ({v}, {j})"),
                });
            }
            let (c, hit) = clamp_psi(raw);
            if hit {
                clamps += 1;
            }
            sp_sum += softplus(c);
        }
        total -= r * sp_sum;
        // Nonzero entries add the combinatorial factor and n ln p.
        for &(v, n) in counts.col(j) {
            let (c, _) = clamp_psi(col[v as usize]);
            let nf = T::of(n as f64);
            let ln_p = -softplus(-c);
            total += ln_gamma(nf + r) - ln_gamma(nf + T::one()) - lg_r + nf * ln_p;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: "data log-likelihood".to_string(),
        });
    }
    Ok(LogLik {
        value: total,
        clamp_events: clamps,
    })
}

/// Full-data log-likelihood of a model state.
pub fn data_log_likelihood<T: Real>(
    counts: &CountMatrix,
    state: &ModelState<T>,
    designs: &DesignMatrices<T>,
) -> Result<T> {
    Ok(log_likelihood_detail(counts, &state.params, designs)?.value)
}

/// NB mean r_j p / (1 - p) at the current parameters. Errors when p is
/// numerically 1 (infinite mean).
pub fn expected_count<T: Real>(
    state: &ModelState<T>,
    designs: &DesignMatrices<T>,
    v: usize,
    j: usize,
) -> Result<T> {
    let psi = logit_psi(state, designs, v, j)?;
    if psi >= psi_clamp_bound::<T>() {
        return Err(Error::domain(format!(
            "NB probability numerically 1 at ({v}, {j}); mean diverges"
        )));
    }
    // p/(1-p) = e^psi
    Ok(state.params.r[j] * psi.exp())
}

/// Probability parameter sigmoid(psi_vj) for one entry.
pub fn success_probability<T: Real>(
    state: &ModelState<T>,
    designs: &DesignMatrices<T>,
    v: usize,
    j: usize,
) -> Result<T> {
    Ok(sigmoid(logit_psi(state, designs, v, j)?))
}

/// Stored posterior draws, per-iteration log-likelihood trace, and the
/// highest-likelihood post-burn-in state.
#[derive(Debug, Clone)]
pub struct ChainOutput<T: Real> {
    /// Post-burn-in parameter snapshots (auxiliaries omitted), possibly
    /// thinned.
    pub samples: Vec<ParamState<T>>,
    /// Iteration numbers of the stored samples.
    pub sample_iterations: Vec<usize>,
    /// Log-likelihood after every sweep (length = n_iterations).
    pub log_likelihoods: Vec<T>,
    /// Post-burn-in state with the highest data log-likelihood.
    pub point_estimate: ModelState<T>,
    pub point_log_likelihood: T,
    /// 1-based iteration the point estimate was drawn at.
    pub point_iteration: usize,
    pub meta: RunMeta<T>,
}

/// Echo of the configuration that produced a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta<T: Real> {
    pub hyper: Hyperparams<T>,
    pub dims: Dims,
    pub thin: usize,
    pub pg_trunc: usize,
    pub clamp_events_total: u64,
}

impl<T: Real> ChainOutput<T> {
    /// Point-estimate invariant: its log-likelihood equals the maximum over
    /// post-burn-in iterations.
    pub fn validate(&self) -> Result<()> {
        let burn = self.meta.hyper.burn_in;
        let best = self.log_likelihoods[burn..]
            .iter()
            .copied()
            .fold(T::of(f64::NEG_INFINITY), |a, b| a.max(b));
        if self.point_log_likelihood != best {
            return Err(Error::invalid(format!(
                "point estimate log-likelihood {} does not match post-burn-in maximum {}",
                self.point_log_likelihood, best
            )));
        }
        Ok(())
    }
}
