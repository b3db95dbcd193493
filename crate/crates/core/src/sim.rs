//! Synthetic data generation: exact forward sampling from the hGNB
//! generative model, and the ZINB benchmark protocol (Gaussian-mixture
//! factor scores, gene-level NB baselines, logit-linear dropout with a
//! calibrated intercept).

use crate::data::{CountMatrix, DesignMatrices, Hyperparams};
use crate::dist::{
    sample_categorical, sample_crt, sample_gamma, sample_negative_binomial, PgSampler,
};
use crate::error::{Error, Result};
use crate::model::{compute_psi, CrtCounts, Dims, ModelState, ParamState};
use crate::rng::RngStream;
use crate::scalar::{sigmoid, Real};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Forward hGNB simulation
// ---------------------------------------------------------------------------

/// Optional overrides for [`simulate_hgnb`]; any block left `None` is drawn
/// from its prior.
#[derive(Debug, Clone, Default)]
pub struct FixedBlocks<T: Real> {
    pub r: Option<DVector<T>>,
    pub h: Option<T>,
    pub beta: Option<DMatrix<T>>,
    pub delta: Option<DMatrix<T>>,
    pub phi: Option<DMatrix<T>>,
    pub theta: Option<DMatrix<T>>,
    pub alpha: Option<DVector<T>>,
    pub eta: Option<DVector<T>>,
    pub gamma: Option<DVector<T>>,
}

/// Forward-sample counts and a complete augmented state from the hGNB
/// model: hyper h / precisions, then parameter blocks, then
/// n_vj ~ NB(r_j, sigmoid(psi_vj)), then the CRT and PG auxiliaries from
/// their exact conditionals (so the returned state is one coherent draw of
/// the augmented joint).
///
/// The draw order is fixed, so a given `(designs, hyper, fixed, rng)`
/// reproduces the same data set exactly.
pub fn simulate_hgnb<T: Real>(
    designs: &DesignMatrices<T>,
    hyper: &Hyperparams<T>,
    fixed: &FixedBlocks<T>,
    pg_trunc: usize,
    rng: &mut RngStream,
) -> Result<(CountMatrix, ModelState<T>)> {
    hyper.validate()?;
    let v_genes = designs.gene.ncols();
    let j_cells = designs.cell.ncols();
    let dims = Dims {
        n_genes: v_genes,
        n_cells: j_cells,
        n_factors: hyper.k,
        n_cell_covariates: designs.n_cell_covariates(),
        n_gene_covariates: designs.n_gene_covariates(),
    };
    let e0 = hyper.e0;
    let f0 = hyper.f0;
    let mut p = ParamState::zeros(dims);

    p.h = match &fixed.h {
        Some(h) => *h,
        None => sample_gamma(e0, T::one() / f0, rng)?,
    };
    p.r = match &fixed.r {
        Some(r) => r.clone(),
        None => {
            let mut r = DVector::zeros(j_cells);
            for j in 0..j_cells {
                r[j] = sample_gamma(e0, T::one() / p.h, rng)?;
            }
            r
        }
    };
    for (fixed_v, target, len) in [
        (&fixed.alpha, &mut p.alpha, dims.n_cell_covariates),
        (&fixed.eta, &mut p.eta, dims.n_gene_covariates),
        (&fixed.gamma, &mut p.gamma, dims.n_factors),
    ] {
        match fixed_v {
            Some(v) => *target = v.clone(),
            None => {
                for i in 0..len {
                    target[i] = sample_gamma(e0, T::one() / f0, rng)?;
                }
            }
        }
    }
    match &fixed.beta {
        Some(b) => p.beta = b.clone(),
        None => {
            for v in 0..v_genes {
                for row in 0..dims.n_cell_covariates {
                    p.beta[(row, v)] = T::std_normal(rng) / p.alpha[row].sqrt();
                }
            }
        }
    }
    match &fixed.delta {
        Some(d) => p.delta = d.clone(),
        None => {
            for j in 0..j_cells {
                for row in 0..dims.n_gene_covariates {
                    p.delta[(row, j)] = T::std_normal(rng) / p.eta[row].sqrt();
                }
            }
        }
    }
    match &fixed.phi {
        Some(m) => p.phi = m.clone(),
        None => {
            for x in p.phi.iter_mut() {
                *x = T::std_normal(rng);
            }
        }
    }
    match &fixed.theta {
        Some(m) => p.theta = m.clone(),
        None => {
            for j in 0..j_cells {
                for k in 0..dims.n_factors {
                    p.theta[(k, j)] = T::std_normal(rng) / p.gamma[k].sqrt();
                }
            }
        }
    }
    p.validate()?;

    let psi = compute_psi(&p, designs);
    let mut triplets = Vec::new();
    for j in 0..j_cells {
        for v in 0..v_genes {
            let prob = sigmoid(psi[(v, j)]);
            let n = if prob > T::zero() {
                sample_negative_binomial(p.r[j], prob, rng).map_err(|e| {
                    Error::domain(format!("count draw at ({v}, {j}): {e}"))
                })?
            } else {
                0
            };
            if n > 0 {
                let n32 = u32::try_from(n).map_err(|_| {
                    Error::domain(format!("simulated count {n} at ({v}, {j}) overflows u32"))
                })?;
                triplets.push((v, j, n32));
            }
        }
    }
    let counts = CountMatrix::from_triplets(v_genes, j_cells, triplets)?;

    // Auxiliaries from their exact conditionals.
    let pg = PgSampler::new(pg_trunc);
    let mut crt = CrtCounts::zeros_like(&counts);
    for j in 0..j_cells {
        for (i, &(_, n)) in counts.col(j).iter().enumerate() {
            crt.cols[j][i] = sample_crt(n, p.r[j], rng)?;
        }
    }
    let mut omega = DMatrix::zeros(v_genes, j_cells);
    for j in 0..j_cells {
        for v in 0..v_genes {
            let n = counts.get(v, j);
            omega[(v, j)] = pg.draw(T::of(n as f64) + p.r[j], psi[(v, j)], rng)?;
        }
    }

    Ok((
        counts,
        ModelState {
            params: p,
            omega,
            crt,
        },
    ))
}

/// Redraw the count matrix from the NB likelihood at the current
/// parameters (the data step of a successive-conditional simulator).
pub fn redraw_counts<T: Real>(
    params: &ParamState<T>,
    designs: &DesignMatrices<T>,
    rng: &mut RngStream,
) -> Result<CountMatrix> {
    let psi = compute_psi(params, designs);
    let v_genes = psi.nrows();
    let j_cells = psi.ncols();
    let mut triplets = Vec::new();
    for j in 0..j_cells {
        for v in 0..v_genes {
            let prob = sigmoid(psi[(v, j)]);
            let n = if prob > T::zero() {
                sample_negative_binomial(params.r[j], prob, rng).map_err(|e| {
                    Error::domain(format!("count draw at ({v}, {j}): {e}"))
                })?
            } else {
                0
            };
            if n > 0 {
                triplets.push((v, j, u32::try_from(n).map_err(|_| {
                    Error::domain(format!("count {n} at ({v}, {j}) overflows u32"))
                })?));
            }
        }
    }
    CountMatrix::from_triplets(v_genes, j_cells, triplets)
}

// ---------------------------------------------------------------------------
// ZINB benchmark simulation
// ---------------------------------------------------------------------------

/// One Gaussian mixture component over factor scores (diagonal
/// covariance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MixtureComponent<T: Real> {
    pub weight: T,
    pub mean: Vec<T>,
    pub sd: Vec<T>,
}

/// Logit-linear dropout: P(drop) = sigmoid(intercept + slope ln(1 + mu)),
/// with mu the NB mean of the entry. The intercept is the calibration
/// knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DropoutModel<T: Real> {
    pub intercept: T,
    pub log_mean_slope: T,
}

/// Gene-level NB baselines: log-odds intercepts are normal (log-normal
/// odds), dispersions are log-normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct GeneBaseline<T: Real> {
    pub log_odds_mean: T,
    pub log_odds_sd: T,
    pub dispersion_log_mean: T,
    pub dispersion_log_sd: T,
}

/// Full recipe for one synthetic ZINB data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SimSpec<T: Real> {
    pub n_genes: usize,
    pub n_cells: usize,
    pub n_factors: usize,
    pub mixture: Vec<MixtureComponent<T>>,
    /// When set, the dropout intercept is calibrated so the empirical zero
    /// fraction lands within one percentage point of this target.
    pub target_zero_fraction: Option<T>,
    pub dropout: DropoutModel<T>,
    pub gene_baseline: GeneBaseline<T>,
    /// Factor loadings are N(0, loading_sd^2).
    pub loading_sd: T,
    /// Cell size factors on the logit scale are N(0, cell_size_sd^2).
    pub cell_size_sd: T,
    pub seed: u64,
}

impl<T: Real> SimSpec<T> {
    pub fn n_clusters(&self) -> usize {
        self.mixture.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_genes == 0 || self.n_cells == 0 || self.n_factors == 0 {
            return Err(Error::domain("simulation dimensions must be >= 1"));
        }
        if self.mixture.is_empty() {
            return Err(Error::domain("mixture needs at least one component"));
        }
        let wsum: T = self.mixture.iter().map(|c| c.weight).sum();
        if (wsum - T::one()).abs() > T::of(1e-6) {
            return Err(Error::domain(format!("mixture weights sum to {wsum}, expected 1")));
        }
        for c in &self.mixture {
            if !(c.weight > T::zero()) {
                return Err(Error::domain("mixture weights must be positive"));
            }
            if c.mean.len() != self.n_factors || c.sd.len() != self.n_factors {
                return Err(Error::dim(
                    "mixture component dimension",
                    self.n_factors,
                    c.mean.len(),
                ));
            }
            if c.sd.iter().any(|s| !(*s > T::zero())) {
                return Err(Error::domain("mixture sds must be positive"));
            }
        }
        if let Some(t) = self.target_zero_fraction {
            if !(t > T::zero() && t < T::one()) {
                return Err(Error::domain("target zero fraction must lie in (0,1)"));
            }
        }
        Ok(())
    }
}

/// Ground truth of one ZINB simulation.
#[derive(Debug, Clone)]
pub struct ZinbTruth<T: Real> {
    /// True factor scores (K x J).
    pub theta: DMatrix<T>,
    /// True loadings (K x V).
    pub phi: DMatrix<T>,
    pub gene_log_odds: DVector<T>,
    pub gene_dispersion: DVector<T>,
    pub cell_size: DVector<T>,
    /// NB logits (V x J).
    pub psi: DMatrix<T>,
    /// Dropout probabilities (V x J).
    pub dropout_prob: DMatrix<T>,
}

/// Counts, true cluster labels, and the full ground truth.
#[derive(Debug, Clone)]
pub struct ZinbSim<T: Real> {
    pub counts: CountMatrix,
    pub labels: Vec<usize>,
    pub truth: ZinbTruth<T>,
}

/// Simulate one ZINB data set: per cell draw a cluster and a factor score
/// from that component, build NB counts from gene baselines plus the
/// factor term, then zero entries independently with the dropout
/// probability.
///
/// The NB and dropout draws use separate substreams of `rng`, so the zero
/// fraction is exactly monotone in the dropout intercept under a fixed
/// stream (common random numbers), which the calibration relies on.
pub fn simulate_zinb<T: Real>(spec: &SimSpec<T>, rng: &RngStream) -> Result<ZinbSim<T>> {
    spec.validate()?;
    let v_genes = spec.n_genes;
    let j_cells = spec.n_cells;
    let k = spec.n_factors;
    let mut rng_struct = rng.substream(0);
    let mut rng_nb = rng.substream(1);
    let mut rng_drop = rng.substream(2);

    let weights: Vec<T> = spec.mixture.iter().map(|c| c.weight).collect();
    let mut labels = Vec::with_capacity(j_cells);
    let mut theta = DMatrix::zeros(k, j_cells);
    for j in 0..j_cells {
        let c = sample_categorical(&weights, &mut rng_struct)?;
        labels.push(c);
        let comp = &spec.mixture[c];
        for d in 0..k {
            theta[(d, j)] = comp.mean[d] + comp.sd[d] * T::std_normal(&mut rng_struct);
        }
    }
    let mut phi = DMatrix::zeros(k, v_genes);
    for x in phi.iter_mut() {
        *x = spec.loading_sd * T::std_normal(&mut rng_struct);
    }
    let gb = &spec.gene_baseline;
    let mut gene_log_odds = DVector::zeros(v_genes);
    let mut gene_dispersion = DVector::zeros(v_genes);
    for v in 0..v_genes {
        gene_log_odds[v] = gb.log_odds_mean + gb.log_odds_sd * T::std_normal(&mut rng_struct);
        gene_dispersion[v] =
            (gb.dispersion_log_mean + gb.dispersion_log_sd * T::std_normal(&mut rng_struct)).exp();
    }
    let mut cell_size = DVector::zeros(j_cells);
    for j in 0..j_cells {
        cell_size[j] = spec.cell_size_sd * T::std_normal(&mut rng_struct);
    }

    let mut psi = phi.tr_mul(&theta);
    for j in 0..j_cells {
        for v in 0..v_genes {
            psi[(v, j)] += gene_log_odds[v] + cell_size[j];
        }
    }

    let mut dropout_prob = DMatrix::zeros(v_genes, j_cells);
    let mut triplets = Vec::new();
    for j in 0..j_cells {
        for v in 0..v_genes {
            let ps = psi[(v, j)];
            let prob = sigmoid(ps);
            let r_v = gene_dispersion[v];
            // NB draw always consumed, even when dropped (common random
            // numbers across intercept values).
            let n = if prob > T::zero() {
                sample_negative_binomial(r_v, prob, &mut rng_nb).map_err(|e| {
                    Error::domain(format!("count draw at ({v}, {j}): {e}"))
                })?
            } else {
                0
            };
            let mu = r_v * ps.exp();
            let pi = sigmoid(spec.dropout.intercept + spec.dropout.log_mean_slope * mu.ln_1p());
            dropout_prob[(v, j)] = pi;
            let dropped = T::open01(&mut rng_drop) < pi;
            if !dropped && n > 0 {
                triplets.push((v, j, u32::try_from(n).map_err(|_| {
                    Error::domain(format!("count {n} at ({v}, {j}) overflows u32"))
                })?));
            }
        }
    }
    let counts = CountMatrix::from_triplets(v_genes, j_cells, triplets)?;
    Ok(ZinbSim {
        counts,
        labels,
        truth: ZinbTruth {
            theta,
            phi,
            gene_log_odds,
            gene_dispersion,
            cell_size,
            psi,
            dropout_prob,
        },
    })
}

/// Average structural zero probability E[(1-p)^r] of a simulated truth
/// (the zero fraction with dropout off).
pub fn structural_zero_fraction<T: Real>(truth: &ZinbTruth<T>) -> f64 {
    let v_genes = truth.psi.nrows();
    let j_cells = truth.psi.ncols();
    let mut acc = 0.0f64;
    for j in 0..j_cells {
        for v in 0..v_genes {
            let p = sigmoid(truth.psi[(v, j)]).to_f64().unwrap_or(0.0);
            let r = truth.gene_dispersion[v].to_f64().unwrap_or(1.0);
            acc += (r * (1.0 - p).ln()).exp();
        }
    }
    acc / (v_genes as f64 * j_cells as f64)
}

const INTERCEPT_LO: f64 = -60.0;
const INTERCEPT_HI: f64 = 60.0;

/// Calibrate the dropout intercept by bisection until a pilot simulation's
/// empirical zero fraction lands within half a percentage point of
/// `target`. Pilots run on exactly the stream passed in, so feeding the
/// same stream to [`simulate_zinb`] afterwards reproduces the calibrated
/// zero fraction identically. Errors when the target sits at or below the
/// structural-zero floor.
pub fn calibrate_zero_fraction<T: Real>(
    spec: &SimSpec<T>,
    target: T,
    rng: &RngStream,
) -> Result<T> {
    spec.validate()?;
    let tf = target.to_f64().unwrap_or(f64::NAN);
    if !(tf > 0.0 && tf < 1.0) {
        return Err(Error::domain(format!("target zero fraction {target} outside (0,1)")));
    }
    let pilot = rng.clone();
    let zf_at = |d0: f64| -> Result<f64> {
        let mut s = spec.clone();
        s.dropout.intercept = T::of(d0);
        s.target_zero_fraction = None;
        Ok(simulate_zinb(&s, &pilot)?.counts.zero_fraction())
    };
    let floor = zf_at(INTERCEPT_LO)?;
    if tf <= floor + 0.002 {
        return Err(Error::Infeasible {
            context: format!(
                "target zero fraction {tf:.3} at or below the structural floor {floor:.3}"
            ),
        });
    }
    let mut lo = INTERCEPT_LO;
    let mut hi = INTERCEPT_HI;
    let mut mid = 0.0;
    for _ in 0..60 {
        mid = 0.5 * (lo + hi);
        let zf = zf_at(mid)?;
        if (zf - tf).abs() <= 0.005 {
            return Ok(T::of(mid));
        }
        if zf < tf {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Monotone in the intercept, so the bracket has collapsed onto the
    // target; return the midpoint.
    let zf = zf_at(mid)?;
    if (zf - tf).abs() <= 0.01 {
        Ok(T::of(mid))
    } else {
        Err(Error::Infeasible {
            context: format!("calibration stalled at zero fraction {zf:.3} for target {tf:.3}"),
        })
    }
}

/// Run a simulation, calibrating the dropout intercept first when the spec
/// carries a target zero fraction.
pub fn simulate_zinb_calibrated<T: Real>(
    spec: &SimSpec<T>,
    rng: &RngStream,
) -> Result<(ZinbSim<T>, T)> {
    let mut s = spec.clone();
    let stream = rng.substream(0xf17);
    if let Some(target) = spec.target_zero_fraction {
        s.dropout.intercept = calibrate_zero_fraction(spec, target, &stream)?;
        s.target_zero_fraction = None;
    }
    let sim = simulate_zinb(&s, &stream)?;
    Ok((sim, s.dropout.intercept))
}

/// Drop genes with fewer than `min_cells` cells reaching `min_reads`
/// reads. Returns the filtered matrix and the kept gene indices.
pub fn filter_genes(
    counts: &CountMatrix,
    min_reads: u32,
    min_cells: usize,
) -> Result<(CountMatrix, Vec<usize>)> {
    let keep: Vec<usize> = (0..counts.n_genes())
        .filter(|&v| {
            counts
                .row(v)
                .iter()
                .filter(|&&(_, n)| n >= min_reads)
                .count()
                >= min_cells
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid("gene filter removed every gene"));
    }
    let filtered = counts.select_genes(&keep)?;
    Ok((filtered, keep))
}

/// Built-in simulation presets. `zinb-40`, `zinb-60`, `zinb-80` follow the
/// benchmark protocol at J = 100 cells; the `-j1000` variants use 1000
/// cells.
pub fn preset(name: &str) -> Option<SimSpec<f64>> {
    let (target, n_cells) = match name {
        "zinb-40" => (0.40, 100),
        "zinb-60" => (0.60, 100),
        "zinb-80" => (0.80, 100),
        "zinb-40-j1000" => (0.40, 1000),
        "zinb-60-j1000" => (0.60, 1000),
        "zinb-80-j1000" => (0.80, 1000),
        _ => return None,
    };
    Some(zinb_spec(1000, n_cells, target, 0))
}

/// Names of the built-in presets.
pub fn preset_names() -> &'static [&'static str] {
    &[
        "zinb-40",
        "zinb-60",
        "zinb-80",
        "zinb-40-j1000",
        "zinb-60-j1000",
        "zinb-80-j1000",
    ]
}

/// The shared shape of the benchmark presets: three well-separated
/// clusters on a circle in K = 2 factor space, log-normal gene baselines,
/// and moderate cell size effects.
pub fn zinb_spec(n_genes: usize, n_cells: usize, target: f64, seed: u64) -> SimSpec<f64> {
    let radius = 1.1;
    let third = 1.0 / 3.0;
    let comp = |angle_deg: f64| MixtureComponent {
        weight: third,
        mean: vec![
            radius * angle_deg.to_radians().cos(),
            radius * angle_deg.to_radians().sin(),
        ],
        sd: vec![0.4, 0.4],
    };
    SimSpec {
        n_genes,
        n_cells,
        n_factors: 2,
        mixture: vec![comp(90.0), comp(210.0), comp(330.0)],
        target_zero_fraction: Some(target),
        dropout: DropoutModel {
            intercept: 0.0,
            log_mean_slope: -0.7,
        },
        gene_baseline: GeneBaseline {
            log_odds_mean: 0.8,
            log_odds_sd: 1.0,
            dispersion_log_mean: 0.0,
            dispersion_log_sd: 0.4,
        },
        loading_sd: 0.6,
        cell_size_sd: 0.8,
        seed,
    }
}
