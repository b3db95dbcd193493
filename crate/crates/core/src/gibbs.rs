//! The Gibbs sampler: one sweep per iteration in the order
//! CRT -> dispersions -> PG auxiliaries -> (delta, beta) -> (phi, theta)
//! -> (alpha, eta, gamma) -> h, plus chain scheduling, burn-in handling,
//! point-estimate selection, and checkpoint/restore.
//!
//! Every update derives one RNG stream per updated unit (gene column, cell
//! column, hyper block) from `(seed, iteration, phase, index)`, so results
//! are bit-identical regardless of worker count, and a resumed chain
//! continues exactly where the straight run would have been.

use crate::data::{CountMatrix, DesignMatrices, Hyperparams};
use crate::dist::{sample_crt, sample_gamma, GaussianConditional, PgSampler};
use crate::error::{Error, Result};
use crate::model::{
    check_consistent, compute_psi, log_likelihood_detail, ChainOutput, CrtCounts, Dims,
    ModelState, ParamState, RunMeta,
};
use crate::rng::RngStream;
use crate::scalar::{clamp_psi, softplus, Real};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

/// Sweep phases, used as the phase field of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
enum Phase {
    Init = 0,
    Crt = 1,
    Dispersion = 2,
    Omega = 3,
    CellCoeff = 4,
    GeneCoeff = 5,
    Loading = 6,
    Score = 7,
    Precision = 8,
    RateH = 9,
    OmegaCell = 10,
    OmegaGene = 11,
    OmegaLoading = 12,
    OmegaScore = 13,
}

const PHASE_SHIFT: u32 = 40;
const ITER_SHIFT: u32 = 44;

/// Parent stream for one (iteration, phase); per-unit streams are the
/// parent id plus the unit index (the low 40 bits are reserved for it).
fn phase_stream(seed: u64, iter: usize, phase: Phase) -> RngStream {
    let id = ((iter as u64) << ITER_SHIFT) | ((phase as u64) << PHASE_SHIFT);
    RngStream::new(seed, id)
}

fn unit_stream(parent: &RngStream, idx: usize) -> RngStream {
    debug_assert!((idx as u64) < (1u64 << PHASE_SHIFT));
    RngStream::new(parent.seed(), parent.stream_id() | idx as u64)
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Run small index ranges inline; larger ones through rayon. Both paths
/// produce identical results because streams are keyed by index.
fn map_units<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Send + Sync,
{
    if n < 32 {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

// ---------------------------------------------------------------------------
// Full conditionals
// ---------------------------------------------------------------------------

/// Full conditional of the gene regression block beta_v:
/// precision diag(alpha) + sum_j omega_vj x_j x_j', linear term
/// sum_j ((n_vj - r_j)/2 - omega_vj (delta_j' z_v + phi_v' theta_j)) x_j.
///
/// `n_at(j)` and `omega_at(j)` supply the count and PG auxiliary for cell j.
pub fn gene_coeff_conditional<T: Real>(
    params: &ParamState<T>,
    designs: &DesignMatrices<T>,
    v: usize,
    n_at: impl Fn(usize) -> u32,
    omega_at: impl Fn(usize) -> T,
) -> GaussianConditional<T> {
    let dims = params.dims();
    let p = dims.n_cell_covariates;
    let q = dims.n_gene_covariates;
    let k = dims.n_factors;
    let half = T::of(0.5);
    let x = designs.cell.as_slice();
    let z_v = &designs.gene.as_slice()[v * q..(v + 1) * q];
    let phi_v = &params.phi.as_slice()[v * k..(v + 1) * k];
    let delta = params.delta.as_slice();
    let theta = params.theta.as_slice();

    let mut data_prec = DMatrix::zeros(p, p);
    let mut linear = DVector::zeros(p);
    for j in 0..dims.n_cells {
        let w = omega_at(j);
        let off = dot(&delta[j * q..(j + 1) * q], z_v) + dot(phi_v, &theta[j * k..(j + 1) * k]);
        let kappa = (T::of(n_at(j) as f64) - params.r[j]) * half - w * off;
        let x_j = &x[j * p..(j + 1) * p];
        for a in 0..p {
            linear[a] += kappa * x_j[a];
            let wa = w * x_j[a];
            for b in 0..p {
                data_prec[(b, a)] += wa * x_j[b];
            }
        }
    }
    GaussianConditional::assemble(&params.alpha, data_prec, linear)
}

/// Full conditional of the cell regression block delta_j (the mirror of
/// [`gene_coeff_conditional`] with genes and cells exchanged and offset
/// beta_v' x_j + phi_v' theta_j).
pub fn cell_coeff_conditional<T: Real>(
    params: &ParamState<T>,
    designs: &DesignMatrices<T>,
    j: usize,
    n_at: impl Fn(usize) -> u32,
    omega_at: impl Fn(usize) -> T,
) -> GaussianConditional<T> {
    let dims = params.dims();
    let p = dims.n_cell_covariates;
    let q = dims.n_gene_covariates;
    let k = dims.n_factors;
    let half = T::of(0.5);
    let z = designs.gene.as_slice();
    let x_j = &designs.cell.as_slice()[j * p..(j + 1) * p];
    let theta_j = &params.theta.as_slice()[j * k..(j + 1) * k];
    let beta = params.beta.as_slice();
    let phi = params.phi.as_slice();
    let r_j = params.r[j];

    let mut data_prec = DMatrix::zeros(q, q);
    let mut linear = DVector::zeros(q);
    for v in 0..dims.n_genes {
        let w = omega_at(v);
        let off = dot(&beta[v * p..(v + 1) * p], x_j) + dot(&phi[v * k..(v + 1) * k], theta_j);
        let kappa = (T::of(n_at(v) as f64) - r_j) * half - w * off;
        let z_v = &z[v * q..(v + 1) * q];
        for a in 0..q {
            linear[a] += kappa * z_v[a];
            let wa = w * z_v[a];
            for b in 0..q {
                data_prec[(b, a)] += wa * z_v[b];
            }
        }
    }
    GaussianConditional::assemble(&params.eta, data_prec, linear)
}

/// Full conditional of the factor loading phi_v: identity prior precision,
/// data precision sum_j omega_vj theta_j theta_j', offset
/// beta_v' x_j + delta_j' z_v.
pub fn loading_conditional<T: Real>(
    params: &ParamState<T>,
    designs: &DesignMatrices<T>,
    v: usize,
    n_at: impl Fn(usize) -> u32,
    omega_at: impl Fn(usize) -> T,
) -> GaussianConditional<T> {
    let dims = params.dims();
    let p = dims.n_cell_covariates;
    let q = dims.n_gene_covariates;
    let k = dims.n_factors;
    let half = T::of(0.5);
    let x = designs.cell.as_slice();
    let z_v = &designs.gene.as_slice()[v * q..(v + 1) * q];
    let beta_v = &params.beta.as_slice()[v * p..(v + 1) * p];
    let delta = params.delta.as_slice();
    let theta = params.theta.as_slice();

    let mut data_prec = DMatrix::zeros(k, k);
    let mut linear = DVector::zeros(k);
    for j in 0..dims.n_cells {
        let w = omega_at(j);
        let off = dot(beta_v, &x[j * p..(j + 1) * p]) + dot(&delta[j * q..(j + 1) * q], z_v);
        let kappa = (T::of(n_at(j) as f64) - params.r[j]) * half - w * off;
        let theta_j = &theta[j * k..(j + 1) * k];
        for a in 0..k {
            linear[a] += kappa * theta_j[a];
            let wa = w * theta_j[a];
            for b in 0..k {
                data_prec[(b, a)] += wa * theta_j[b];
            }
        }
    }
    let ones = DVector::from_element(k, T::one());
    GaussianConditional::assemble(&ones, data_prec, linear)
}

/// Full conditional of the factor score theta_j: prior precision
/// diag(gamma), data precision sum_v omega_vj phi_v phi_v', offset
/// beta_v' x_j + delta_j' z_v.
pub fn score_conditional<T: Real>(
    params: &ParamState<T>,
    designs: &DesignMatrices<T>,
    j: usize,
    n_at: impl Fn(usize) -> u32,
    omega_at: impl Fn(usize) -> T,
) -> GaussianConditional<T> {
    let dims = params.dims();
    let p = dims.n_cell_covariates;
    let q = dims.n_gene_covariates;
    let k = dims.n_factors;
    let half = T::of(0.5);
    let z = designs.gene.as_slice();
    let x_j = &designs.cell.as_slice()[j * p..(j + 1) * p];
    let delta_j = &params.delta.as_slice()[j * q..(j + 1) * q];
    let beta = params.beta.as_slice();
    let phi = params.phi.as_slice();
    let r_j = params.r[j];

    let mut data_prec = DMatrix::zeros(k, k);
    let mut linear = DVector::zeros(k);
    for v in 0..dims.n_genes {
        let w = omega_at(v);
        let off = dot(&beta[v * p..(v + 1) * p], x_j) + dot(&z[v * q..(v + 1) * q], delta_j);
        let kappa = (T::of(n_at(v) as f64) - r_j) * half - w * off;
        let phi_v = &phi[v * k..(v + 1) * k];
        for a in 0..k {
            linear[a] += kappa * phi_v[a];
            let wa = w * phi_v[a];
            for b in 0..k {
                data_prec[(b, a)] += wa * phi_v[b];
            }
        }
    }
    GaussianConditional::assemble(&params.gamma, data_prec, linear)
}

// ---------------------------------------------------------------------------
// Sweep phases
// ---------------------------------------------------------------------------

fn dense_col(counts: &CountMatrix, j: usize) -> Vec<u32> {
    let mut buf = vec![0u32; counts.n_genes()];
    for &(v, n) in counts.col(j) {
        buf[v as usize] = n;
    }
    buf
}

fn dense_row(counts: &CountMatrix, v: usize) -> Vec<u32> {
    let mut buf = vec![0u32; counts.n_cells()];
    for &(j, n) in counts.row(v) {
        buf[j as usize] = n;
    }
    buf
}

/// Redraw every CRT auxiliary: ell_vj ~ CRT(n_vj, r_j); zero counts keep
/// ell = 0 without consuming randomness.
pub fn update_crt_counts<T: Real>(
    state: &mut ModelState<T>,
    counts: &CountMatrix,
    parent: &RngStream,
) -> Result<()> {
    let r = &state.params.r;
    let new_cols = map_units(counts.n_cells(), |j| {
        let mut rng = unit_stream(parent, j);
        let r_j = r[j];
        counts
            .col(j)
            .iter()
            .map(|&(_, n)| sample_crt(n, r_j, &mut rng))
            .collect::<Result<Vec<u32>>>()
    })?;
    state.crt = CrtCounts { cols: new_cols };
    Ok(())
}

/// Redraw every cell dispersion:
/// r_j ~ Gamma(e0 + sum_v ell_vj, 1 / (h + sum_v softplus(psi_vj))),
/// the softplus sum running over the full dense column (zeros included).
pub fn update_dispersions<T: Real>(
    state: &mut ModelState<T>,
    counts: &CountMatrix,
    designs: &DesignMatrices<T>,
    hyper: &Hyperparams<T>,
    parent: &RngStream,
    clamps: &AtomicU64,
) -> Result<()> {
    let psi = compute_psi(&state.params, designs);
    let v_genes = counts.n_genes();
    let crt = &state.crt;
    let h = state.params.h;
    let e0 = hyper.e0;
    let new_r = map_units(counts.n_cells(), |j| {
        let mut rng = unit_stream(parent, j);
        let mut hit = 0u64;
        let col = psi.column(j);
        let mut sp = T::zero();
        for v in 0..v_genes {
            let (c, clamped) = clamp_psi(col[v]);
            if clamped {
                hit += 1;
            }
            sp += softplus(c);
        }
        if hit > 0 {
            clamps.fetch_add(hit, Ordering::Relaxed);
        }
        let shape = e0 + T::of(crt.col_sum(j) as f64);
        let rate = h + sp;
        sample_gamma(shape, T::one() / rate, &mut rng)
    })?;
    state.params.r = DVector::from_vec(new_r);
    Ok(())
}

/// Redraw every PG auxiliary omega_vj ~ PG(n_vj + r_j, psi_vj), including
/// the zero-count entries.
pub fn update_pg_auxiliaries<T: Real>(
    state: &mut ModelState<T>,
    counts: &CountMatrix,
    designs: &DesignMatrices<T>,
    pg: &PgSampler,
    parent: &RngStream,
) -> Result<()> {
    let psi = compute_psi(&state.params, designs);
    let v_genes = counts.n_genes();
    let j_cells = counts.n_cells();
    let r = &state.params.r;
    if state.omega.nrows() != v_genes || state.omega.ncols() != j_cells {
        state.omega = DMatrix::zeros(v_genes, j_cells);
    }
    let psi_slice = psi.as_slice();
    let run = |(j, out): (usize, &mut [T])| -> Result<()> {
        let mut rng = unit_stream(parent, j);
        let r_j = r[j];
        let col_psi = &psi_slice[j * v_genes..(j + 1) * v_genes];
        let mut nz = counts.col(j).iter().peekable();
        for v in 0..v_genes {
            let n = match nz.peek() {
                Some(&&(g, n)) if g as usize == v => {
                    nz.next();
                    n
                }
                _ => 0,
            };
            out[v] = pg.draw(T::of(n as f64) + r_j, col_psi[v], &mut rng)?;
        }
        Ok(())
    };
    let cols = state.omega.as_mut_slice().chunks_mut(v_genes);
    if j_cells < 32 {
        cols.enumerate().try_for_each(run)?;
    } else {
        state
            .omega
            .as_mut_slice()
            .par_chunks_mut(v_genes)
            .enumerate()
            .try_for_each(run)?;
    }
    Ok(())
}

/// Redraw every cell regression column delta_j from its MVN full
/// conditional (requires materialized omega).
pub fn update_cell_regression<T: Real>(
    state: &mut ModelState<T>,
    counts: &CountMatrix,
    designs: &DesignMatrices<T>,
    parent: &RngStream,
) -> Result<()> {
    let v_genes = counts.n_genes();
    let params = &state.params;
    let omega = state.omega.as_slice();
    let new_cols = map_units(counts.n_cells(), |j| {
        let mut rng = unit_stream(parent, j);
        let ncol = dense_col(counts, j);
        let ocol = &omega[j * v_genes..(j + 1) * v_genes];
        cell_coeff_conditional(params, designs, j, |v| ncol[v], |v| ocol[v])
            .sample(&mut rng)
            .map_err(|e| with_unit(e, "cell", j))
    })?;
    write_columns(&mut state.params.delta, &new_cols);
    Ok(())
}

/// Redraw every gene regression column beta_v from its MVN full
/// conditional (requires materialized omega).
pub fn update_gene_regression<T: Real>(
    state: &mut ModelState<T>,
    counts: &CountMatrix,
    designs: &DesignMatrices<T>,
    parent: &RngStream,
) -> Result<()> {
    let v_genes = counts.n_genes();
    let params = &state.params;
    let omega = state.omega.as_slice();
    let new_cols = map_units(v_genes, |v| {
        let mut rng = unit_stream(parent, v);
        let nrow = dense_row(counts, v);
        gene_coeff_conditional(params, designs, v, |j| nrow[j], |j| omega[j * v_genes + v])
            .sample(&mut rng)
            .map_err(|e| with_unit(e, "gene", v))
    })?;
    write_columns(&mut state.params.beta, &new_cols);
    Ok(())
}

/// Redraw every factor loading column phi_v (requires materialized omega).
pub fn update_factor_loadings<T: Real>(
    state: &mut ModelState<T>,
    counts: &CountMatrix,
    designs: &DesignMatrices<T>,
    parent: &RngStream,
) -> Result<()> {
    let v_genes = counts.n_genes();
    let params = &state.params;
    let omega = state.omega.as_slice();
    let new_cols = map_units(v_genes, |v| {
        let mut rng = unit_stream(parent, v);
        let nrow = dense_row(counts, v);
        loading_conditional(params, designs, v, |j| nrow[j], |j| omega[j * v_genes + v])
            .sample(&mut rng)
            .map_err(|e| with_unit(e, "gene", v))
    })?;
    write_columns(&mut state.params.phi, &new_cols);
    Ok(())
}

/// Redraw every factor score column theta_j (requires materialized omega).
pub fn update_factor_scores<T: Real>(
    state: &mut ModelState<T>,
    counts: &CountMatrix,
    designs: &DesignMatrices<T>,
    parent: &RngStream,
) -> Result<()> {
    let v_genes = counts.n_genes();
    let params = &state.params;
    let omega = state.omega.as_slice();
    let new_cols = map_units(counts.n_cells(), |j| {
        let mut rng = unit_stream(parent, j);
        let ncol = dense_col(counts, j);
        let ocol = &omega[j * v_genes..(j + 1) * v_genes];
        score_conditional(params, designs, j, |v| ncol[v], |v| ocol[v])
            .sample(&mut rng)
            .map_err(|e| with_unit(e, "cell", j))
    })?;
    write_columns(&mut state.params.theta, &new_cols);
    Ok(())
}

/// Redraw the ARD precisions by normal-gamma conjugacy:
/// alpha_p ~ Gamma(e0 + V/2, 1/(f0 + sum_v beta_vp^2 / 2)), and the same
/// pattern over cells for eta_q (delta) and gamma_k (theta).
pub fn update_precisions<T: Real>(
    state: &mut ModelState<T>,
    hyper: &Hyperparams<T>,
    parent: &RngStream,
) -> Result<()> {
    let mut rng = unit_stream(parent, 0);
    let half = T::of(0.5);
    let dims = state.params.dims();
    let v_half = T::of(dims.n_genes as f64) * half;
    let j_half = T::of(dims.n_cells as f64) * half;
    for p in 0..dims.n_cell_covariates {
        let ssq: T = state.params.beta.row(p).iter().map(|b| *b * *b).sum();
        state.params.alpha[p] =
            sample_gamma(hyper.e0 + v_half, T::one() / (hyper.f0 + ssq * half), &mut rng)?;
    }
    for q in 0..dims.n_gene_covariates {
        let ssq: T = state.params.delta.row(q).iter().map(|d| *d * *d).sum();
        state.params.eta[q] =
            sample_gamma(hyper.e0 + j_half, T::one() / (hyper.f0 + ssq * half), &mut rng)?;
    }
    for k in 0..dims.n_factors {
        let ssq: T = state.params.theta.row(k).iter().map(|t| *t * *t).sum();
        state.params.gamma[k] =
            sample_gamma(hyper.e0 + j_half, T::one() / (hyper.f0 + ssq * half), &mut rng)?;
    }
    Ok(())
}

/// Redraw the dispersion-prior rate by gamma-gamma conjugacy:
/// h ~ Gamma(e0 (1 + J), 1/(f0 + sum_j r_j)).
pub fn update_rate_h<T: Real>(
    state: &mut ModelState<T>,
    hyper: &Hyperparams<T>,
    parent: &RngStream,
) -> Result<()> {
    let mut rng = unit_stream(parent, 0);
    let j_cells = T::of(state.params.r.len() as f64);
    let sum_r: T = state.params.r.iter().copied().sum();
    state.params.h = sample_gamma(
        hyper.e0 * (T::one() + j_cells),
        T::one() / (hyper.f0 + sum_r),
        &mut rng,
    )?;
    Ok(())
}

fn write_columns<T: Real>(target: &mut DMatrix<T>, cols: &[DVector<T>]) {
    for (j, col) in cols.iter().enumerate() {
        target.set_column(j, col);
    }
}

fn with_unit(e: Error, kind: &str, idx: usize) -> Error {
    match e {
        Error::NotSpd { context } => Error::NotSpd {
            context: format!("{context} ({kind} {idx})"),
        },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Chain driver
// ---------------------------------------------------------------------------

/// Whether PG auxiliaries are stored dense for the whole sweep or redrawn
/// inside each consuming phase (less memory, roughly 4x the PG draws, and a
/// different but equally valid chain trajectory).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaPolicy {
    Materialized,
    Recompute,
}

/// Which blocks a sweep updates. Everything on for plain fits; the
/// `transform` flow freezes the gene side to score new cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateMask {
    pub crt: bool,
    pub dispersions: bool,
    pub omega: bool,
    pub cell_coeffs: bool,
    pub gene_coeffs: bool,
    pub loadings: bool,
    pub scores: bool,
    pub precisions: bool,
    pub rate_h: bool,
}

impl UpdateMask {
    pub fn all() -> Self {
        UpdateMask {
            crt: true,
            dispersions: true,
            omega: true,
            cell_coeffs: true,
            gene_coeffs: true,
            loadings: true,
            scores: true,
            precisions: true,
            rate_h: true,
        }
    }

    /// Gene-side blocks and global hyperparameters frozen; cell-side blocks
    /// (r, delta, theta) and the auxiliaries keep updating.
    pub fn cell_side_only() -> Self {
        UpdateMask {
            crt: true,
            dispersions: true,
            omega: true,
            cell_coeffs: true,
            gene_coeffs: false,
            loadings: false,
            scores: true,
            precisions: false,
            rate_h: false,
        }
    }
}

/// Engine knobs beyond the model hyperparameters.
#[derive(Debug, Clone)]
pub struct GibbsConfig {
    /// PG series truncation level.
    pub pg_trunc: usize,
    /// Store every `thin`-th post-burn-in sample.
    pub thin: usize,
    /// Keep parameter snapshots at all (likelihood trace and point estimate
    /// are always kept).
    pub store_samples: bool,
    pub omega: OmegaPolicy,
    pub updates: UpdateMask,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub workers: Option<usize>,
    /// Where to write a checkpoint if a sweep aborts.
    pub abort_checkpoint: Option<PathBuf>,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            pg_trunc: 200,
            thin: 1,
            store_samples: true,
            omega: OmegaPolicy::Materialized,
            updates: UpdateMask::all(),
            workers: None,
            abort_checkpoint: None,
        }
    }
}

/// Per-iteration progress record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepReport<T> {
    pub iteration: usize,
    pub log_likelihood: T,
    pub elapsed: Duration,
    pub clamp_events: u64,
}

/// Highest-likelihood post-burn-in draw seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSample<T: Real> {
    pub iteration: usize,
    pub log_likelihood: T,
    pub state: ModelState<T>,
}

/// Complete chain bookkeeping; serializable as a checkpoint and sufficient
/// to resume bit-identically.
#[derive(Debug, Clone)]
pub struct ChainCheckpoint<T: Real> {
    pub hyper: Hyperparams<T>,
    pub dims: Dims,
    pub thin: usize,
    pub pg_trunc: usize,
    /// 1-based iteration the next sweep will run.
    pub next_iteration: usize,
    pub state: ModelState<T>,
    pub log_likelihoods: Vec<T>,
    pub samples: Vec<ParamState<T>>,
    pub sample_iterations: Vec<usize>,
    pub best: Option<BestSample<T>>,
    pub clamp_total: u64,
}

/// Chain runner binding data, designs, hyperparameters, and engine config.
pub struct GibbsRunner<'a, T: Real> {
    counts: &'a CountMatrix,
    designs: &'a DesignMatrices<T>,
    hyper: &'a Hyperparams<T>,
    cfg: GibbsConfig,
    pg: PgSampler,
}

impl<'a, T: Real> GibbsRunner<'a, T> {
    pub fn new(
        counts: &'a CountMatrix,
        designs: &'a DesignMatrices<T>,
        hyper: &'a Hyperparams<T>,
        cfg: GibbsConfig,
    ) -> Result<Self> {
        hyper.validate()?;
        designs.check_dims(counts)?;
        if cfg.thin == 0 {
            return Err(Error::domain("thinning interval must be >= 1"));
        }
        let pg = PgSampler::new(cfg.pg_trunc);
        Ok(GibbsRunner {
            counts,
            designs,
            hyper,
            cfg,
            pg,
        })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n_genes: self.counts.n_genes(),
            n_cells: self.counts.n_cells(),
            n_factors: self.hyper.k,
            n_cell_covariates: self.designs.n_cell_covariates(),
            n_gene_covariates: self.designs.n_gene_covariates(),
        }
    }

    /// Weak, scale-neutral start: r = 1, h = 1, unit precisions, and
    /// N(0, 0.01) draws for the regression and factor blocks.
    pub fn init_state(&self) -> ModelState<T> {
        let dims = self.dims();
        let mut state = ModelState::with_dims(dims, self.counts);
        let mut rng = phase_stream(self.hyper.seed, 0, Phase::Init);
        let sd = T::of(0.1);
        for m in [
            &mut state.params.beta,
            &mut state.params.delta,
            &mut state.params.phi,
            &mut state.params.theta,
        ] {
            for x in m.iter_mut() {
                *x = sd * T::std_normal(&mut rng);
            }
        }
        if self.cfg.omega == OmegaPolicy::Recompute {
            state.omega = DMatrix::zeros(0, 0);
        }
        state
    }

    /// Initialize from an externally supplied state (e.g. a forward draw).
    pub fn seeded_state(&self, state: ModelState<T>) -> Result<ModelState<T>> {
        check_consistent(&state.params, self.designs, self.counts)?;
        Ok(state)
    }

    /// One full sweep at the given (1-based) iteration number. Returns the
    /// post-sweep likelihood report.
    pub fn sweep(&self, state: &mut ModelState<T>, iter: usize) -> Result<SweepReport<T>> {
        let t0 = Instant::now();
        let clamps = AtomicU64::new(0);
        let seed = self.hyper.seed;
        let mask = self.cfg.updates;
        let mut run = || -> Result<()> {
            if mask.crt {
                update_crt_counts(state, self.counts, &phase_stream(seed, iter, Phase::Crt))?;
            }
            if mask.dispersions {
                update_dispersions(
                    state,
                    self.counts,
                    self.designs,
                    self.hyper,
                    &phase_stream(seed, iter, Phase::Dispersion),
                    &clamps,
                )?;
            }
            match self.cfg.omega {
                OmegaPolicy::Materialized => {
                    if mask.omega {
                        update_pg_auxiliaries(
                            state,
                            self.counts,
                            self.designs,
                            &self.pg,
                            &phase_stream(seed, iter, Phase::Omega),
                        )?;
                    }
                    if mask.cell_coeffs && self.designs.n_gene_covariates() > 0 {
                        update_cell_regression(
                            state,
                            self.counts,
                            self.designs,
                            &phase_stream(seed, iter, Phase::CellCoeff),
                        )?;
                    }
                    if mask.gene_coeffs && self.designs.n_cell_covariates() > 0 {
                        update_gene_regression(
                            state,
                            self.counts,
                            self.designs,
                            &phase_stream(seed, iter, Phase::GeneCoeff),
                        )?;
                    }
                    if mask.loadings {
                        update_factor_loadings(
                            state,
                            self.counts,
                            self.designs,
                            &phase_stream(seed, iter, Phase::Loading),
                        )?;
                    }
                    if mask.scores {
                        update_factor_scores(
                            state,
                            self.counts,
                            self.designs,
                            &phase_stream(seed, iter, Phase::Score),
                        )?;
                    }
                }
                OmegaPolicy::Recompute => self.recompute_sweep(state, iter)?,
            }
            if mask.precisions {
                update_precisions(state, self.hyper, &phase_stream(seed, iter, Phase::Precision))?;
            }
            if mask.rate_h {
                update_rate_h(state, self.hyper, &phase_stream(seed, iter, Phase::RateH))?;
            }
            Ok(())
        };
        run().map_err(|e| Error::Sweep {
            iteration: iter,
            source: Box::new(e),
        })?;

        let detail = log_likelihood_detail(self.counts, &state.params, self.designs)
            .map_err(|e| Error::Sweep {
                iteration: iter,
                source: Box::new(e),
            })?;
        Ok(SweepReport {
            iteration: iter,
            log_likelihood: detail.value,
            elapsed: t0.elapsed(),
            clamp_events: clamps.load(Ordering::Relaxed) + detail.clamp_events,
        })
    }

    /// The Recompute path: each MVN phase draws its own PG column/row
    /// (a valid extra conditional update) instead of reading stored omega.
    fn recompute_sweep(&self, state: &mut ModelState<T>, iter: usize) -> Result<()> {
        let seed = self.hyper.seed;
        let mask = self.cfg.updates;
        let v_genes = self.counts.n_genes();
        let j_cells = self.counts.n_cells();
        let pg = &self.pg;
        let psi_for = |params: &ParamState<T>| compute_psi(params, self.designs);

        if mask.cell_coeffs && self.designs.n_gene_covariates() > 0 {
            let psi = psi_for(&state.params);
            let params = &state.params;
            let parent_w = phase_stream(seed, iter, Phase::OmegaCell);
            let parent = phase_stream(seed, iter, Phase::CellCoeff);
            let new_cols = map_units(j_cells, |j| {
                let mut wrng = unit_stream(&parent_w, j);
                let mut rng = unit_stream(&parent, j);
                let ncol = dense_col(self.counts, j);
                let r_j = params.r[j];
                let col = psi.column(j);
                let mut om = Vec::with_capacity(v_genes);
                for v in 0..v_genes {
                    om.push(pg.draw(T::of(ncol[v] as f64) + r_j, col[v], &mut wrng)?);
                }
                cell_coeff_conditional(params, self.designs, j, |v| ncol[v], |v| om[v])
                    .sample(&mut rng)
                    .map_err(|e| with_unit(e, "cell", j))
            })?;
            write_columns(&mut state.params.delta, &new_cols);
        }
        if mask.gene_coeffs && self.designs.n_cell_covariates() > 0 {
            let psi = psi_for(&state.params);
            let params = &state.params;
            let parent_w = phase_stream(seed, iter, Phase::OmegaGene);
            let parent = phase_stream(seed, iter, Phase::GeneCoeff);
            let new_cols = map_units(v_genes, |v| {
                let mut wrng = unit_stream(&parent_w, v);
                let mut rng = unit_stream(&parent, v);
                let nrow = dense_row(self.counts, v);
                let mut om = Vec::with_capacity(j_cells);
                for j in 0..j_cells {
                    om.push(pg.draw(T::of(nrow[j] as f64) + params.r[j], psi[(v, j)], &mut wrng)?);
                }
                gene_coeff_conditional(params, self.designs, v, |j| nrow[j], |j| om[j])
                    .sample(&mut rng)
                    .map_err(|e| with_unit(e, "gene", v))
            })?;
            write_columns(&mut state.params.beta, &new_cols);
        }
        if mask.loadings {
            let psi = psi_for(&state.params);
            let params = &state.params;
            let parent_w = phase_stream(seed, iter, Phase::OmegaLoading);
            let parent = phase_stream(seed, iter, Phase::Loading);
            let new_cols = map_units(v_genes, |v| {
                let mut wrng = unit_stream(&parent_w, v);
                let mut rng = unit_stream(&parent, v);
                let nrow = dense_row(self.counts, v);
                let mut om = Vec::with_capacity(j_cells);
                for j in 0..j_cells {
                    om.push(pg.draw(T::of(nrow[j] as f64) + params.r[j], psi[(v, j)], &mut wrng)?);
                }
                loading_conditional(params, self.designs, v, |j| nrow[j], |j| om[j])
                    .sample(&mut rng)
                    .map_err(|e| with_unit(e, "gene", v))
            })?;
            write_columns(&mut state.params.phi, &new_cols);
        }
        if mask.scores {
            let psi = psi_for(&state.params);
            let params = &state.params;
            let parent_w = phase_stream(seed, iter, Phase::OmegaScore);
            let parent = phase_stream(seed, iter, Phase::Score);
            let new_cols = map_units(j_cells, |j| {
                let mut wrng = unit_stream(&parent_w, j);
                let mut rng = unit_stream(&parent, j);
                let ncol = dense_col(self.counts, j);
                let r_j = params.r[j];
                let col = psi.column(j);
                let mut om = Vec::with_capacity(v_genes);
                for v in 0..v_genes {
                    om.push(pg.draw(T::of(ncol[v] as f64) + r_j, col[v], &mut wrng)?);
                }
                score_conditional(params, self.designs, j, |v| ncol[v], |v| om[v])
                    .sample(&mut rng)
                    .map_err(|e| with_unit(e, "cell", j))
            })?;
            write_columns(&mut state.params.theta, &new_cols);
        }
        Ok(())
    }

    fn fresh_book(&self) -> ChainCheckpoint<T> {
        ChainCheckpoint {
            hyper: self.hyper.clone(),
            dims: self.dims(),
            thin: self.cfg.thin,
            pg_trunc: self.cfg.pg_trunc,
            next_iteration: 1,
            state: self.init_state(),
            log_likelihoods: Vec::with_capacity(self.hyper.n_iterations),
            samples: Vec::new(),
            sample_iterations: Vec::new(),
            best: None,
            clamp_total: 0,
        }
    }

    fn check_book(&self, book: &ChainCheckpoint<T>) -> Result<()> {
        if book.dims != self.dims() {
            return Err(Error::Checkpoint {
                context: "checkpoint dimensions do not match this run".to_string(),
            });
        }
        if book.hyper != *self.hyper
            || book.thin != self.cfg.thin
            || book.pg_trunc != self.cfg.pg_trunc
        {
            return Err(Error::Checkpoint {
                context: "checkpoint configuration does not match this run".to_string(),
            });
        }
        book.state.validate(self.counts)
    }

    fn advance(
        &self,
        book: &mut ChainCheckpoint<T>,
        stop_after: usize,
        mut progress: Option<&mut dyn FnMut(&SweepReport<T>)>,
    ) -> Result<()> {
        let burn = self.hyper.burn_in;
        while book.next_iteration <= stop_after {
            let iter = book.next_iteration;
            let backup = self
                .cfg
                .abort_checkpoint
                .is_some()
                .then(|| book.state.clone());
            let report = match self.sweep(&mut book.state, iter) {
                Ok(rep) => rep,
                Err(e) => {
                    if let (Some(path), Some(prev)) = (&self.cfg.abort_checkpoint, backup) {
                        let mut aborted = book.clone();
                        aborted.state = prev;
                        // Best effort: the abort error takes precedence.
                        let _ = crate::io::save_checkpoint(path, &aborted);
                    }
                    return Err(e);
                }
            };
            book.log_likelihoods.push(report.log_likelihood);
            book.clamp_total += report.clamp_events;
            if iter > burn {
                if self.cfg.store_samples && (iter - burn - 1) % self.cfg.thin == 0 {
                    book.samples.push(book.state.params.clone());
                    book.sample_iterations.push(iter);
                }
                let better = match &book.best {
                    Some(b) => report.log_likelihood > b.log_likelihood,
                    None => true,
                };
                if better {
                    book.best = Some(BestSample {
                        iteration: iter,
                        log_likelihood: report.log_likelihood,
                        state: book.state.clone(),
                    });
                }
            }
            if let Some(cb) = progress.as_deref_mut() {
                cb(&report);
            }
            book.next_iteration += 1;
        }
        Ok(())
    }

    fn finalize(&self, book: ChainCheckpoint<T>) -> Result<ChainOutput<T>> {
        let best = book.best.ok_or_else(|| {
            Error::invalid("chain finished without any post-burn-in iteration")
        })?;
        let out = ChainOutput {
            samples: book.samples,
            sample_iterations: book.sample_iterations,
            log_likelihoods: book.log_likelihoods,
            point_estimate: best.state,
            point_log_likelihood: best.log_likelihood,
            point_iteration: best.iteration,
            meta: RunMeta {
                hyper: book.hyper,
                dims: book.dims,
                thin: book.thin,
                pg_trunc: book.pg_trunc,
                clamp_events_total: book.clamp_total,
            },
        };
        out.validate()?;
        Ok(out)
    }

    fn install<F, Out>(&self, f: F) -> Result<Out>
    where
        F: FnOnce() -> Result<Out> + Send,
        Out: Send,
    {
        match self.cfg.workers {
            None => f(),
            Some(w) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(w.max(1))
                    .build()
                    .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
                pool.install(f)
            }
        }
    }

    /// Run the full chain from a fresh initialization.
    pub fn run(&self) -> Result<ChainOutput<T>> {
        self.run_with_progress(|_| {})
    }

    /// Run the full chain, invoking `progress` after every sweep.
    pub fn run_with_progress(
        &self,
        mut progress: impl FnMut(&SweepReport<T>) + Send,
    ) -> Result<ChainOutput<T>> {
        self.install(move || {
            let mut book = self.fresh_book();
            self.advance(&mut book, self.hyper.n_iterations, Some(&mut progress))?;
            self.finalize(book)
        })
    }

    /// Run from a fresh initialization up to and including `stop_after`
    /// sweeps, returning the live bookkeeping as a checkpoint.
    pub fn run_until(&self, stop_after: usize) -> Result<ChainCheckpoint<T>> {
        self.install(|| {
            let mut book = self.fresh_book();
            self.advance(&mut book, stop_after.min(self.hyper.n_iterations), None)?;
            Ok(book)
        })
    }

    /// Resume a checkpoint and run to completion. Produces bit-identical
    /// output to an uninterrupted run with the same configuration.
    pub fn resume(&self, book: ChainCheckpoint<T>) -> Result<ChainOutput<T>> {
        self.check_book(&book)?;
        self.install(move || {
            let mut book = book;
            self.advance(&mut book, self.hyper.n_iterations, None)?;
            self.finalize(book)
        })
    }

    /// Resume a checkpoint up to and including `stop_after` sweeps.
    pub fn resume_until(
        &self,
        book: ChainCheckpoint<T>,
        stop_after: usize,
    ) -> Result<ChainCheckpoint<T>> {
        self.check_book(&book)?;
        self.install(move || {
            let mut book = book;
            self.advance(&mut book, stop_after.min(self.hyper.n_iterations), None)?;
            Ok(book)
        })
    }

    /// Turn finished bookkeeping into a chain output (the checkpoint must
    /// have run through every iteration).
    pub fn finish(&self, book: ChainCheckpoint<T>) -> Result<ChainOutput<T>> {
        self.check_book(&book)?;
        if book.next_iteration <= self.hyper.n_iterations {
            return Err(Error::Checkpoint {
                context: format!(
                    "chain stopped after {} of {} iterations",
                    book.next_iteration - 1,
                    self.hyper.n_iterations
                ),
            });
        }
        self.finalize(book)
    }

    /// Run the full chain from a caller-supplied initial state (used to
    /// continue from a point estimate with frozen blocks, or to start a
    /// stationarity check from a forward draw).
    pub fn run_from(
        &self,
        state: ModelState<T>,
        mut progress: impl FnMut(&SweepReport<T>) + Send,
    ) -> Result<ChainOutput<T>> {
        let state = self.seeded_state(state)?;
        self.install(move || {
            let mut book = self.fresh_book();
            book.state = state;
            self.advance(&mut book, self.hyper.n_iterations, Some(&mut progress))?;
            self.finalize(book)
        })
    }
}

/// Convenience wrapper: run one chain with the given engine config.
pub fn run_chain<T: Real>(
    counts: &CountMatrix,
    designs: &DesignMatrices<T>,
    hyper: &Hyperparams<T>,
    cfg: GibbsConfig,
) -> Result<ChainOutput<T>> {
    GibbsRunner::new(counts, designs, hyper, cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::crt_mean;
    use crate::model::{data_log_likelihood, ModelState};

    fn small_setup(
        v: usize,
        j: usize,
        triplets: Vec<(usize, usize, u32)>,
    ) -> (CountMatrix, DesignMatrices<f64>, Hyperparams<f64>) {
        let counts = CountMatrix::from_triplets(v, j, triplets).unwrap();
        let designs = DesignMatrices::intercept_only(v, j);
        let mut hyper = Hyperparams::new(2);
        hyper.n_iterations = 20;
        hyper.burn_in = 5;
        hyper.seed = 42;
        (counts, designs, hyper)
    }

    fn runner_cfg() -> GibbsConfig {
        GibbsConfig {
            pg_trunc: 40,
            ..GibbsConfig::default()
        }
    }

    #[test]
    fn crt_zero_counts_stay_zero_and_ones_stay_one() {
        let (counts, designs, hyper) = small_setup(3, 2, vec![]);
        let runner = GibbsRunner::new(&counts, &designs, &hyper, runner_cfg()).unwrap();
        let mut state = runner.init_state();
        update_crt_counts(&mut state, &counts, &phase_stream(1, 1, Phase::Crt)).unwrap();
        assert!(state.crt.cols.iter().all(|c| c.is_empty()));

        // n = 1 everywhere: CRT(1, r) = 1 always.
        let ones: Vec<_> = (0..3)
            .flat_map(|v| (0..2).map(move |j| (v, j, 1u32)))
            .collect();
        let (counts, designs, hyper) = small_setup(3, 2, ones);
        let runner = GibbsRunner::new(&counts, &designs, &hyper, runner_cfg()).unwrap();
        let mut state = runner.init_state();
        update_crt_counts(&mut state, &counts, &phase_stream(1, 1, Phase::Crt)).unwrap();
        for j in 0..2 {
            assert!(state.crt.cols[j].iter().all(|&l| l == 1));
        }
    }

    #[test]
    fn crt_column_sums_match_analytic_mean() {
        let triplets = vec![(0, 0, 3), (1, 0, 7), (2, 0, 1), (0, 1, 10), (2, 1, 2)];
        let (counts, designs, hyper) = small_setup(3, 2, triplets.clone());
        let runner = GibbsRunner::new(&counts, &designs, &hyper, runner_cfg()).unwrap();
        let mut state = runner.init_state();
        state.params.r[0] = 0.8;
        state.params.r[1] = 2.5;
        let reps = 40_000;
        let mut sums = [0.0f64; 2];
        for it in 0..reps {
            update_crt_counts(&mut state, &counts, &phase_stream(9, it as usize, Phase::Crt))
                .unwrap();
            for j in 0..2 {
                sums[j] += state.crt.col_sum(j) as f64;
            }
        }
        for j in 0..2 {
            let expect: f64 = triplets
                .iter()
                .filter(|t| t.1 == j)
                .map(|t| crt_mean(t.2, state.params.r[j]))
                .sum();
            let got = sums[j] / reps as f64;
            assert!(
                (got - expect).abs() / expect < 0.01,
                "cell {j}: got {got}, expect {expect}"
            );
        }
    }

    #[test]
    fn dispersion_update_matches_gamma_moments() {
        // ell frozen at 0 (all-zero counts), psi = 0: the conditional is
        // Gamma(e0, 1/(h + V ln 2)).
        let (counts, designs, mut hyper) = small_setup(4, 2, vec![]);
        hyper.e0 = 1.5;
        let runner = GibbsRunner::new(&counts, &designs, &hyper, runner_cfg()).unwrap();
        let mut state = runner.init_state();
        state.params.beta.fill(0.0);
        state.params.delta.fill(0.0);
        state.params.phi.fill(0.0);
        state.params.theta.fill(0.0);
        state.params.h = 0.7;
        let clamps = AtomicU64::new(0);
        let reps = 60_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for it in 0..reps {
            update_dispersions(
                &mut state,
                &counts,
                &designs,
                &hyper,
                &phase_stream(11, it as usize, Phase::Dispersion),
                &clamps,
            )
            .unwrap();
            sum += state.params.r[0];
            sumsq += state.params.r[0] * state.params.r[0];
        }
        let scale = 1.0 / (0.7 + 4.0 * std::f64::consts::LN_2);
        let expect_mean = 1.5 * scale;
        let expect_var = 1.5 * scale * scale;
        let mean = sum / reps as f64;
        let var = sumsq / reps as f64 - mean * mean;
        assert!((mean - expect_mean).abs() / expect_mean < 0.01, "mean {mean}");
        assert!((var - expect_var).abs() / expect_var < 0.05, "var {var}");
        assert_eq!(clamps.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn pg_auxiliary_means() {
        // psi = 0, n = 0, r = 1: omega ~ PG(1, 0) with mean 1/4.
        // One gene with n = 3 and r = 2: PG(5, 0) with mean 5/4.
        let (counts, designs, hyper) = small_setup(2, 2, vec![(0, 0, 3)]);
        let runner = GibbsRunner::new(&counts, &designs, &hyper, runner_cfg()).unwrap();
        let mut state = runner.init_state();
        state.params.beta.fill(0.0);
        state.params.delta.fill(0.0);
        state.params.phi.fill(0.0);
        state.params.theta.fill(0.0);
        state.params.r[0] = 2.0;
        state.params.r[1] = 1.0;
        let pg = PgSampler::new(40);
        let reps = 30_000;
        let mut sum_50 = 0.0; // entry (0,0): b = 3 + 2 = 5
        let mut sum_10 = 0.0; // entry (1,1): b = 0 + 1 = 1
        for it in 0..reps {
            update_pg_auxiliaries(
                &mut state,
                &counts,
                &designs,
                &pg,
                &phase_stream(13, it as usize, Phase::Omega),
            )
            .unwrap();
            sum_50 += state.omega[(0, 0)];
            sum_10 += state.omega[(1, 1)];
        }
        let m50 = sum_50 / reps as f64;
        let m10 = sum_10 / reps as f64;
        assert!((m50 - 1.25).abs() / 1.25 < 0.02, "PG(5,0) mean {m50}");
        assert!((m10 - 0.25).abs() / 0.25 < 0.02, "PG(1,0) mean {m10}");

        // Determinism under a fixed stream.
        let mut s1 = state.clone();
        let mut s2 = state.clone();
        update_pg_auxiliaries(&mut s1, &counts, &designs, &pg, &phase_stream(7, 3, Phase::Omega))
            .unwrap();
        update_pg_auxiliaries(&mut s2, &counts, &designs, &pg, &phase_stream(7, 3, Phase::Omega))
            .unwrap();
        assert_eq!(s1.omega, s2.omega);
    }

    #[test]
    fn conditional_builders_reduce_to_prior_with_no_data() {
        // J = 0 cells: the beta/phi conditionals are exactly the priors.
        let dims = Dims {
            n_genes: 2,
            n_cells: 0,
            n_factors: 2,
            n_cell_covariates: 2,
            n_gene_covariates: 1,
        };
        let mut params = ParamState::<f64>::zeros(dims);
        params.alpha[0] = 2.0;
        params.alpha[1] = 5.0;
        let designs = DesignMatrices::new(
            DMatrix::zeros(2, 0),
            DMatrix::from_element(1, 2, 1.0),
            false,
            true,
        )
        .unwrap();
        let gc = gene_coeff_conditional(&params, &designs, 0, |_| 0, |_| 0.0);
        let (mean, cov) = gc.mean_cov().unwrap();
        assert_eq!(mean, DVector::zeros(2));
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((cov[(1, 1)] - 0.2).abs() < 1e-14);
        assert_eq!(cov[(0, 1)], 0.0);

        let lc = loading_conditional(&params, &designs, 1, |_| 0, |_| 0.0);
        let (mean, cov) = lc.mean_cov().unwrap();
        assert_eq!(mean, DVector::zeros(2));
        assert!((cov[(0, 0)] - 1.0).abs() < 1e-14);

        // V = 0 genes: the delta/theta conditionals are the priors.
        let dims = Dims {
            n_genes: 0,
            n_cells: 2,
            n_factors: 1,
            n_cell_covariates: 1,
            n_gene_covariates: 2,
        };
        let mut params = ParamState::<f64>::zeros(dims);
        params.eta[1] = 4.0;
        params.gamma[0] = 8.0;
        let designs = DesignMatrices::new(
            DMatrix::from_element(1, 2, 1.0),
            DMatrix::zeros(2, 0),
            true,
            false,
        )
        .unwrap();
        let cc = cell_coeff_conditional(&params, &designs, 0, |_| 0, |_| 0.0);
        let (_, cov) = cc.mean_cov().unwrap();
        assert!((cov[(1, 1)] - 0.25).abs() < 1e-14);
        let sc = score_conditional(&params, &designs, 1, |_| 0, |_| 0.0);
        let (_, cov) = sc.mean_cov().unwrap();
        assert!((cov[(0, 0)] - 0.125).abs() < 1e-14);
    }

    #[test]
    fn gene_coeff_scalar_case_matches_hand_formula() {
        // P = 1, single cell: precision = alpha + w x^2,
        // mean = ((n - r)/2 - w * off) x / precision.
        let _counts = CountMatrix::from_triplets(1, 1, vec![(0, 0, 4)]).unwrap();
        let mut designs = DesignMatrices::intercept_only(1, 1);
        designs.cell[(0, 0)] = 1.7;
        designs.cell_intercept = false;
        designs.gene[(0, 0)] = 0.6;
        designs.gene_intercept = false;
        let dims = Dims {
            n_genes: 1,
            n_cells: 1,
            n_factors: 1,
            n_cell_covariates: 1,
            n_gene_covariates: 1,
        };
        let mut params = ParamState::<f64>::zeros(dims);
        params.alpha[0] = 2.0;
        params.r[0] = 1.3;
        params.delta[(0, 0)] = 0.9;
        params.phi[(0, 0)] = -0.5;
        params.theta[(0, 0)] = 1.1;
        let w = 0.85;
        let gc = gene_coeff_conditional(&params, &designs, 0, |_| 4, |_| w);
        let (mean, cov) = gc.mean_cov().unwrap();
        let off = 0.9 * 0.6 + (-0.5) * 1.1;
        let prec = 2.0 + w * 1.7 * 1.7;
        let m = ((4.0 - 1.3) / 2.0 - w * off) * 1.7 / prec;
        assert!((mean[0] - m).abs() < 1e-14);
        assert!((cov[(0, 0)] - 1.0 / prec).abs() < 1e-14);
    }

    #[test]
    fn precision_updates_match_conjugate_moments() {
        let dims = Dims {
            n_genes: 6,
            n_cells: 4,
            n_factors: 2,
            n_cell_covariates: 1,
            n_gene_covariates: 1,
        };
        let mut hyper = Hyperparams::<f64>::new(2);
        hyper.e0 = 1.0;
        hyper.f0 = 2.0;
        // beta = 0: alpha ~ Gamma(e0 + V/2, 1/f0).
        let mut state = ModelState {
            params: ParamState::zeros(dims),
            omega: DMatrix::zeros(0, 0),
            crt: CrtCounts { cols: vec![] },
        };
        state.params.beta.fill(0.0);
        for (k, x) in state.params.theta.iter_mut().enumerate() {
            *x = 0.25 * (k as f64 + 1.0);
        }
        let reps = 60_000;
        let mut alpha_sum = 0.0;
        let mut gamma_sum = 0.0;
        for it in 0..reps {
            update_precisions(&mut state, &hyper, &phase_stream(17, it, Phase::Precision))
                .unwrap();
            alpha_sum += state.params.alpha[0];
            gamma_sum += state.params.gamma[0];
        }
        let alpha_mean = alpha_sum / reps as f64;
        let expect_alpha = (1.0 + 3.0) / 2.0; // shape (e0 + V/2) * scale (1/f0)
        assert!(
            (alpha_mean - expect_alpha).abs() / expect_alpha < 0.01,
            "alpha mean {alpha_mean}"
        );
        let ssq: f64 = state
            .params
            .theta
            .row(0)
            .iter()
            .map(|t| t * t)
            .sum();
        let expect_gamma = (1.0 + 2.0) / (2.0 + ssq / 2.0);
        let gamma_mean = gamma_sum / reps as f64;
        assert!(
            (gamma_mean - expect_gamma).abs() / expect_gamma < 0.015,
            "gamma mean {gamma_mean}, expect {expect_gamma}"
        );
    }

    #[test]
    fn rate_h_update_moments_and_monotonicity() {
        let dims = Dims {
            n_genes: 1,
            n_cells: 1,
            n_factors: 1,
            n_cell_covariates: 1,
            n_gene_covariates: 1,
        };
        let mut hyper = Hyperparams::<f64>::new(1);
        hyper.e0 = 0.7;
        hyper.f0 = 0.4;
        let mut state = ModelState {
            params: ParamState::zeros(dims),
            omega: DMatrix::zeros(0, 0),
            crt: CrtCounts { cols: vec![] },
        };
        // J = 1, r = 1: h ~ Gamma(2 e0, 1/(f0 + 1)).
        state.params.r[0] = 1.0;
        let reps = 60_000;
        let mut sum = 0.0;
        for it in 0..reps {
            update_rate_h(&mut state, &hyper, &phase_stream(19, it, Phase::RateH)).unwrap();
            sum += state.params.h;
        }
        let mean = sum / reps as f64;
        let expect = 2.0 * 0.7 / (0.4 + 1.0);
        assert!((mean - expect).abs() / expect < 0.01, "h mean {mean}");

        // Tiny r approaches the prior Gamma(e0 (1 + J), 1/f0).
        state.params.r[0] = 1e-12;
        let mut sum_tiny = 0.0;
        for it in 0..reps {
            update_rate_h(&mut state, &hyper, &phase_stream(23, it, Phase::RateH)).unwrap();
            sum_tiny += state.params.h;
        }
        let mean_tiny = sum_tiny / reps as f64;
        let expect_tiny = 1.4 / 0.4;
        assert!(
            (mean_tiny - expect_tiny).abs() / expect_tiny < 0.01,
            "tiny-r h mean {mean_tiny}"
        );
        // Larger sum of r stochastically shrinks h.
        assert!(mean < mean_tiny);
    }

    #[test]
    fn single_iteration_chain_produces_one_sample() {
        let (counts, designs, mut hyper) = small_setup(2, 2, vec![(0, 0, 1), (1, 1, 2)]);
        hyper.n_iterations = 1;
        hyper.burn_in = 0;
        let out = run_chain(&counts, &designs, &hyper, runner_cfg()).unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.log_likelihoods.len(), 1);
        assert_eq!(out.point_iteration, 1);
        assert!(out.log_likelihoods[0].is_finite());
        out.validate().unwrap();
    }

    #[test]
    fn fixed_seed_chains_are_bit_identical_across_worker_counts() {
        let (counts, designs, hyper) = small_setup(
            3,
            4,
            vec![(0, 0, 2), (1, 1, 5), (2, 2, 1), (0, 3, 3), (2, 0, 1)],
        );
        let mut cfg1 = runner_cfg();
        cfg1.workers = Some(1);
        let mut cfg2 = runner_cfg();
        cfg2.workers = Some(2);
        let a = run_chain(&counts, &designs, &hyper, cfg1).unwrap();
        let b = run_chain(&counts, &designs, &hyper, cfg2).unwrap();
        assert_eq!(a.log_likelihoods, b.log_likelihoods);
        assert_eq!(a.point_estimate.params, b.point_estimate.params);
        assert_eq!(a.point_iteration, b.point_iteration);
        assert_eq!(a.samples.len(), b.samples.len());
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn recompute_policy_runs_and_stays_finite() {
        let (counts, designs, hyper) = small_setup(3, 3, vec![(0, 0, 2), (1, 1, 5), (2, 2, 1)]);
        let mut cfg = runner_cfg();
        cfg.omega = OmegaPolicy::Recompute;
        let out = run_chain(&counts, &designs, &hyper, cfg).unwrap();
        assert!(out.log_likelihoods.iter().all(|l| l.is_finite()));
        assert!(out.point_estimate.omega.is_empty());
        // Likelihood of the point estimate is reproducible.
        let ll = data_log_likelihood(&counts, &out.point_estimate, &designs).unwrap();
        assert_eq!(ll, out.point_log_likelihood);
    }

    #[test]
    fn split_run_equals_straight_run() {
        let (counts, designs, hyper) = small_setup(
            4,
            3,
            vec![(0, 0, 4), (1, 1, 2), (3, 2, 7), (2, 1, 1)],
        );
        let runner = GibbsRunner::new(&counts, &designs, &hyper, runner_cfg()).unwrap();
        let straight = runner.run().unwrap();
        let ckpt = runner.run_until(9).unwrap();
        let resumed = runner.resume(ckpt).unwrap();
        assert_eq!(straight.log_likelihoods, resumed.log_likelihoods);
        assert_eq!(straight.point_estimate, resumed.point_estimate);
        assert_eq!(straight.samples, resumed.samples);
        assert_eq!(
            straight.point_log_likelihood,
            resumed.point_log_likelihood
        );
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let (counts, designs, hyper) = small_setup(2, 2, vec![(0, 0, 1)]);
        let runner = GibbsRunner::new(&counts, &designs, &hyper, runner_cfg()).unwrap();
        let ckpt = runner.run_until(3).unwrap();
        let mut other = hyper.clone();
        other.seed = 99;
        let runner2 = GibbsRunner::new(&counts, &designs, &other, runner_cfg()).unwrap();
        assert!(matches!(
            runner2.resume(ckpt),
            Err(Error::Checkpoint { .. })
        ));
    }
}
