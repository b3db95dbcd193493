//! Acceptance suite: one test per release criterion, each printing a
//! single pass/fail line. Tolerances are fixed here, not configurable.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use hgnb_core::data::{CountMatrix, DesignMatrices, Hyperparams};
use hgnb_core::dist::{crt_mean, pg_laplace, pg_mean, sample_crt, sample_gamma, PgSampler};
use hgnb_core::eval::{
    adjusted_rand_index, kmeans, md_plot_data, pca_baseline, silhouette_width,
};
use hgnb_core::gibbs::{
    cell_coeff_conditional, gene_coeff_conditional, loading_conditional, score_conditional,
    GibbsConfig, GibbsRunner,
};
use hgnb_core::model::{Dims, ParamState};
use hgnb_core::sim::{
    redraw_counts, simulate_hgnb, simulate_zinb_calibrated, zinb_spec, FixedBlocks,
};
use hgnb_core::{io, Real, RngStream};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Effective sample size via Geyer's initial positive sequence.
fn ess(xs: &[f64]) -> f64 {
    let n = xs.len();
    let (mean, var) = mean_var(xs);
    if var <= 0.0 {
        return n as f64;
    }
    let c0 = var * (n as f64 - 1.0) / n as f64;
    let acf = |t: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..n - t {
            acc += (xs[i] - mean) * (xs[i + t] - mean);
        }
        acc / n as f64 / c0
    };
    let mut tau = 1.0;
    let mut t = 1;
    while t + 1 < n {
        let pair = acf(t) + acf(t + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        t += 2;
    }
    (n as f64 / tau).clamp(1.0, n as f64)
}

fn geweke_z(forward: &[f64], chain: &[f64]) -> f64 {
    let (mf, vf) = mean_var(forward);
    let (mc, vc) = mean_var(chain);
    let se2 = vf / ess(forward) + vc / ess(chain);
    (mf - mc) / se2.sqrt()
}

// ---------------------------------------------------------------------------
// Criterion 1: Polya-Gamma sampler moments and Laplace transform
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_polya_gamma_moments_and_laplace() {
    const DRAWS: usize = 1_000_000;
    let shapes = [0.5f64, 1.0, 2.0, 10.0];
    let tilts = [0.0f64, 0.5, 2.0, 5.0];
    let mut combos = Vec::new();
    for &b in &shapes {
        for &c in &tilts {
            combos.push((b, c));
        }
    }
    let results: Vec<(f64, f64, f64, f64, f64)> = combos
        .par_iter()
        .map(|&(b, c)| {
            let pg = PgSampler::new(200);
            let mut rng = RngStream::new(0xacce_0001, (b * 10.0) as u64 * 100 + (c * 10.0) as u64);
            let mut sum = 0.0;
            let mut lap01 = 0.0;
            let mut lap1 = 0.0;
            for _ in 0..DRAWS {
                let w: f64 = pg.draw(b, c, &mut rng).unwrap();
                sum += w;
                lap01 += (-0.1 * w).exp();
                lap1 += (-w).exp();
            }
            let nf = DRAWS as f64;
            (b, c, sum / nf, lap01 / nf, lap1 / nf)
        })
        .collect();
    for (b, c, mean, lap01, lap1) in results {
        let mean_true = pg_mean(b, c);
        let rel = (mean / mean_true - 1.0).abs();
        assert!(
            rel < 0.01,
            "PG({b},{c}) mean {mean} vs {mean_true} (rel {rel:.4})"
        );
        for (t, got) in [(0.1, lap01), (1.0, lap1)] {
            let lt = pg_laplace(b, c, t);
            let rel = (got / lt - 1.0).abs();
            assert!(
                rel < 0.01,
                "PG({b},{c}) Laplace at t={t}: {got} vs {lt} (rel {rel:.4})"
            );
        }
    }
    println!(
        "[PASS] criterion 1: PG(b,c) empirical means within 1% of (b/2c)tanh(c/2) and Laplace \
         transforms within 1% of cosh^b(c/2)/cosh^b(sqrt((c^2/2+t)/2)) on a 4x4 grid, 1e6 draws each"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: CRT sampler mean
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_crt_mean() {
    const DRAWS: usize = 1_000_000;
    for &n in &[1u32, 3, 10, 100] {
        for &r in &[0.1f64, 1.0, 5.0] {
            let mut rng = RngStream::new(0xacce_0002, u64::from(n) * 100 + (r * 10.0) as u64);
            let mut sum = 0u64;
            for _ in 0..DRAWS {
                sum += u64::from(sample_crt(n, r, &mut rng).unwrap());
            }
            let got = sum as f64 / DRAWS as f64;
            let expect = crt_mean(n, r);
            let rel = (got / expect - 1.0).abs();
            assert!(
                rel < 0.005,
                "CRT({n},{r}) mean {got} vs {expect} (rel {rel:.5})"
            );
        }
    }
    println!(
        "[PASS] criterion 2: CRT empirical means within 0.5% of sum_t r/(r+t-1) for \
         (n,r) in {{1,3,10,100}}x{{0.1,1,5}}, 1e6 draws each"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: MVN full conditionals vs dense-inverse reference
// ---------------------------------------------------------------------------

/// Hand-rolled Gauss-Jordan inverse, independent of the Cholesky path the
/// implementation uses.
fn gauss_jordan_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = DMatrix::<f64>::identity(n, n);
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if m[(row, col)].abs() > m[(pivot, col)].abs() {
                pivot = row;
            }
        }
        assert!(m[(pivot, col)].abs() > 0.0, "singular reference matrix");
        if pivot != col {
            m.swap_rows(pivot, col);
            inv.swap_rows(pivot, col);
        }
        let d = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = m[(row, col)];
            if f != 0.0 {
                for j in 0..n {
                    m[(row, j)] -= f * m[(col, j)];
                    inv[(row, j)] -= f * inv[(col, j)];
                }
            }
        }
    }
    inv
}

#[test]
fn criterion_3_mvn_conditionals_match_dense_reference() {
    let (v_genes, j_cells, k, p, q) = (4usize, 5usize, 2usize, 2usize, 2usize);
    let mut rng = RngStream::new(0xacce_0003, 0);
    let counts = CountMatrix::from_triplets(
        v_genes,
        j_cells,
        vec![
            (0, 0, 3),
            (0, 2, 1),
            (1, 1, 7),
            (2, 3, 2),
            (3, 4, 11),
            (1, 4, 1),
            (2, 0, 5),
        ],
    )
    .unwrap();
    let mut cell = DMatrix::from_element(p, j_cells, 1.0);
    let mut gene = DMatrix::from_element(q, v_genes, 1.0);
    for j in 0..j_cells {
        cell[(1, j)] = f64::std_normal(&mut rng);
    }
    for v in 0..v_genes {
        gene[(1, v)] = f64::std_normal(&mut rng);
    }
    let designs = DesignMatrices::new(cell, gene, true, true).unwrap();
    let dims = Dims {
        n_genes: v_genes,
        n_cells: j_cells,
        n_factors: k,
        n_cell_covariates: p,
        n_gene_covariates: q,
    };
    let mut params = ParamState::<f64>::zeros(dims);
    for m in [
        &mut params.beta,
        &mut params.delta,
        &mut params.phi,
        &mut params.theta,
    ] {
        for x in m.iter_mut() {
            *x = f64::std_normal(&mut rng);
        }
    }
    for i in 0..j_cells {
        params.r[i] = sample_gamma(2.0, 1.0, &mut rng).unwrap();
    }
    for v in [&mut params.alpha, &mut params.eta, &mut params.gamma] {
        for x in v.iter_mut() {
            *x = sample_gamma(2.0, 1.0, &mut rng).unwrap();
        }
    }
    let mut omega = DMatrix::zeros(v_genes, j_cells);
    for x in omega.iter_mut() {
        *x = 0.05 + 1.95 * f64::open01(&mut rng);
    }

    let tol = 1e-10;
    let mut max_err = 0.0f64;
    let mut check = |gc: hgnb_core::dist::GaussianConditional<f64>,
                     prior: &DVector<f64>,
                     data_prec: &DMatrix<f64>,
                     linear: &DVector<f64>,
                     what: &str| {
        let d = prior.len();
        let mut a_ref = data_prec.clone();
        for i in 0..d {
            a_ref[(i, i)] += prior[i];
        }
        let cov_ref = gauss_jordan_inverse(&a_ref);
        let mean_ref = &cov_ref * linear;
        let (mean, cov) = gc.mean_cov().unwrap();
        for i in 0..d {
            let e = (mean[i] - mean_ref[i]).abs();
            assert!(e < tol, "{what}: mean[{i}] off by {e}");
            max_err = max_err.max(e);
            for jj in 0..d {
                let e = (cov[(i, jj)] - cov_ref[(i, jj)]).abs();
                assert!(e < tol, "{what}: cov[{i}][{jj}] off by {e}");
                max_err = max_err.max(e);
            }
        }
    };

    // beta_v for every gene: reference terms assembled by explicit loops.
    for v in 0..v_genes {
        let mut data_prec = DMatrix::<f64>::zeros(p, p);
        let mut linear = DVector::<f64>::zeros(p);
        for j in 0..j_cells {
            let w = omega[(v, j)];
            let mut off = 0.0;
            for qq in 0..q {
                off += params.delta[(qq, j)] * designs.gene[(qq, v)];
            }
            for kk in 0..k {
                off += params.phi[(kk, v)] * params.theta[(kk, j)];
            }
            let kappa = (counts.get(v, j) as f64 - params.r[j]) / 2.0 - w * off;
            for a in 0..p {
                linear[a] += kappa * designs.cell[(a, j)];
                for b in 0..p {
                    data_prec[(a, b)] += w * designs.cell[(a, j)] * designs.cell[(b, j)];
                }
            }
        }
        let gc = gene_coeff_conditional(&params, &designs, v, |j| counts.get(v, j), |j| {
            omega[(v, j)]
        });
        check(gc, &params.alpha, &data_prec, &linear, &format!("beta_{v}"));
    }

    // delta_j for every cell.
    for j in 0..j_cells {
        let mut data_prec = DMatrix::<f64>::zeros(q, q);
        let mut linear = DVector::<f64>::zeros(q);
        for v in 0..v_genes {
            let w = omega[(v, j)];
            let mut off = 0.0;
            for a in 0..p {
                off += params.beta[(a, v)] * designs.cell[(a, j)];
            }
            for kk in 0..k {
                off += params.phi[(kk, v)] * params.theta[(kk, j)];
            }
            let kappa = (counts.get(v, j) as f64 - params.r[j]) / 2.0 - w * off;
            for a in 0..q {
                linear[a] += kappa * designs.gene[(a, v)];
                for b in 0..q {
                    data_prec[(a, b)] += w * designs.gene[(a, v)] * designs.gene[(b, v)];
                }
            }
        }
        let gc = cell_coeff_conditional(&params, &designs, j, |v| counts.get(v, j), |v| {
            omega[(v, j)]
        });
        check(gc, &params.eta, &data_prec, &linear, &format!("delta_{j}"));
    }

    // phi_v: identity prior.
    let ones = DVector::from_element(k, 1.0);
    for v in 0..v_genes {
        let mut data_prec = DMatrix::<f64>::zeros(k, k);
        let mut linear = DVector::<f64>::zeros(k);
        for j in 0..j_cells {
            let w = omega[(v, j)];
            let mut off = 0.0;
            for a in 0..p {
                off += params.beta[(a, v)] * designs.cell[(a, j)];
            }
            for qq in 0..q {
                off += params.delta[(qq, j)] * designs.gene[(qq, v)];
            }
            let kappa = (counts.get(v, j) as f64 - params.r[j]) / 2.0 - w * off;
            for a in 0..k {
                linear[a] += kappa * params.theta[(a, j)];
                for b in 0..k {
                    data_prec[(a, b)] += w * params.theta[(a, j)] * params.theta[(b, j)];
                }
            }
        }
        let gc = loading_conditional(&params, &designs, v, |j| counts.get(v, j), |j| {
            omega[(v, j)]
        });
        check(gc, &ones, &data_prec, &linear, &format!("phi_{v}"));
    }

    // theta_j: diag(gamma) prior.
    for j in 0..j_cells {
        let mut data_prec = DMatrix::<f64>::zeros(k, k);
        let mut linear = DVector::<f64>::zeros(k);
        for v in 0..v_genes {
            let w = omega[(v, j)];
            let mut off = 0.0;
            for a in 0..p {
                off += params.beta[(a, v)] * designs.cell[(a, j)];
            }
            for qq in 0..q {
                off += params.delta[(qq, j)] * designs.gene[(qq, v)];
            }
            let kappa = (counts.get(v, j) as f64 - params.r[j]) / 2.0 - w * off;
            for a in 0..k {
                linear[a] += kappa * params.phi[(a, v)];
                for b in 0..k {
                    data_prec[(a, b)] += w * params.phi[(a, v)] * params.phi[(b, v)];
                }
            }
        }
        let gc = score_conditional(&params, &designs, j, |v| counts.get(v, j), |v| omega[(v, j)]);
        check(gc, &params.gamma, &data_prec, &linear, &format!("theta_{j}"));
    }

    println!(
        "[PASS] criterion 3: all MVN full-conditional means and covariances on the \
         V=4,J=5,K=2,P=2,Q=2 instance match the dense-inverse reference to 1e-10 \
         (max abs error {max_err:.2e})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: Geweke joint-distribution test
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_geweke_joint_distribution() {
    const SAMPLES: usize = 10_000;
    // Successive-conditional steps per replicate. Each replicate starts at
    // a fresh forward draw (already stationary) and applies the full
    // sweep + data-redraw kernel STEPS times; a kernel that fails to
    // preserve the joint drifts away within a step or two. Replicates are
    // independent, so both samples cover the heavy (tiny h, huge r) corner
    // that e0 = 1 allows identically; one long chain cannot, because r's
    // marginal mean is infinite there and excursions into that corner mix
    // multiplicatively slowly.
    const STEPS: usize = 5;
    const SEED: u64 = 0xacce_0004;
    let (v_genes, j_cells) = (5usize, 8usize);
    let designs = DesignMatrices::<f64>::intercept_only(v_genes, j_cells);
    let mut hyper = Hyperparams::<f64>::new(2);
    hyper.e0 = 1.0;
    hyper.f0 = 1.0;
    hyper.n_iterations = SAMPLES * STEPS + 1;
    hyper.burn_in = 1;
    hyper.seed = SEED;
    // The ARD precisions are pinned at 1 on both sides. At e0 = 1 their
    // priors have Exp tails at zero, so a full-hierarchy forward draw
    // produces unrepresentable counts (p -> 1) at a rate of ~1% per draw;
    // conditioning both samplers on fixed precisions keeps the comparison
    // exact while still exercising the CRT, dispersion, PG, all four MVN
    // blocks, and the h update. The precision update itself is covered by
    // its conjugate-moment tests.
    let fixed = FixedBlocks {
        alpha: Some(DVector::from_element(1, 1.0)),
        eta: Some(DVector::from_element(1, 1.0)),
        gamma: Some(DVector::from_element(2, 1.0)),
        ..FixedBlocks::default()
    };
    let mut mask = hgnb_core::gibbs::UpdateMask::all();
    mask.precisions = false;

    // Forward: independent draws from the prior + likelihood.
    let mut fwd = vec![Vec::with_capacity(SAMPLES); 4];
    for i in 0..SAMPLES {
        let mut rng = RngStream::new(SEED, 1_000_000 + i as u64);
        let (_, state) = simulate_hgnb(&designs, &hyper, &fixed, 200, &mut rng).unwrap();
        fwd[0].push(state.params.r.mean());
        fwd[1].push(state.params.h);
        fwd[2].push(state.params.beta[(0, 0)]);
        fwd[3].push(state.params.theta[(0, 0)]);
    }

    // Successive-conditional side: independent replicates, each a forward
    // draw advanced by STEPS applications of (parameter sweep, data
    // redraw).
    let cfg = GibbsConfig {
        updates: mask,
        ..GibbsConfig::default()
    };
    let chain_parts: Vec<[f64; 4]> = (0..SAMPLES)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(SEED, 3_000_000 + i as u64);
            let (mut counts, mut state) =
                simulate_hgnb(&designs, &hyper, &fixed, 200, &mut rng).unwrap();
            for m in 0..STEPS {
                {
                    let runner =
                        GibbsRunner::new(&counts, &designs, &hyper, cfg.clone()).unwrap();
                    runner.sweep(&mut state, i * STEPS + m + 1).unwrap();
                }
                if m + 1 < STEPS {
                    counts = redraw_counts(&state.params, &designs, &mut rng).unwrap();
                    state.reset_crt(&counts);
                }
            }
            [
                state.params.r.mean(),
                state.params.h,
                state.params.beta[(0, 0)],
                state.params.theta[(0, 0)],
            ]
        })
        .collect();
    let mut chain = vec![Vec::with_capacity(SAMPLES); 4];
    for part in chain_parts {
        for (i, x) in part.into_iter().enumerate() {
            chain[i].push(x);
        }
    }

    let names = ["mean(r)", "h", "beta[0,0]", "theta[0,0]"];
    let mut detail = String::new();
    for (i, name) in names.iter().enumerate() {
        let z = geweke_z(&fwd[i], &chain[i]);
        detail.push_str(&format!("{name}: z={z:+.2}  "));
        assert!(
            z.abs() < 4.0,
            "Geweke statistic {name} out of range: z = {z:.3} \
             (forward mean {:.4}, chain mean {:.4})",
            mean_var(&fwd[i]).0,
            mean_var(&chain[i]).0
        );
    }
    println!(
        "[PASS] criterion 4: Geweke forward vs successive-conditional |z| < 4 on \
         V=5,J=8,K=2,P=1,Q=1 with e0=1 over 1e4 samples ({detail})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: scaled simulation study
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_simulation_study() {
    const REPS: usize = 10;
    let levels = [0.4f64, 0.6, 0.8];
    let jobs: Vec<(usize, usize)> = (0..levels.len())
        .flat_map(|li| (0..REPS).map(move |rep| (li, rep)))
        .collect();

    struct RepResult {
        level_idx: usize,
        sil_hgnb: f64,
        sil_pca: f64,
        ari: f64,
    }

    let results: Vec<RepResult> = jobs
        .par_iter()
        .map(|&(li, rep)| {
            let level = levels[li];
            let spec = zinb_spec(1000, 100, level, 31_000 + 1000 * li as u64 + rep as u64);
            let (sim, _) =
                simulate_zinb_calibrated(&spec, &RngStream::new(spec.seed, 0x51b)).unwrap();
            let designs = DesignMatrices::<f64>::intercept_only(1000, 100);
            let mut hyper = Hyperparams::<f64>::new(2);
            hyper.n_iterations = 2000;
            hyper.burn_in = 1000;
            hyper.seed = 77_000 + 100 * li as u64 + rep as u64;
            let cfg = GibbsConfig {
                pg_trunc: 20,
                store_samples: false,
                ..GibbsConfig::default()
            };
            let out = hgnb_core::gibbs::run_chain(&sim.counts, &designs, &hyper, cfg).unwrap();
            let theta = &out.point_estimate.params.theta;
            let (_, sil_hgnb) = silhouette_width(theta, &sim.labels).unwrap();
            let pca = pca_baseline::<f64>(&sim.counts, 2, true).unwrap();
            let (_, sil_pca) = silhouette_width(&pca.points, &sim.labels).unwrap();
            let km = kmeans(theta, 3, &RngStream::new(hyper.seed, 0x6b)).unwrap();
            let ari = adjusted_rand_index(&km, &sim.labels).unwrap();
            RepResult {
                level_idx: li,
                sil_hgnb,
                sil_pca,
                ari,
            }
        })
        .collect();

    let mut mean_sil = [0.0f64; 3];
    for r in &results {
        mean_sil[r.level_idx] += r.sil_hgnb / REPS as f64;
    }
    let wins_at_40 = results
        .iter()
        .filter(|r| r.level_idx == 0 && r.sil_hgnb >= r.sil_pca)
        .count();
    let aris_at_40: Vec<f64> = results
        .iter()
        .filter(|r| r.level_idx == 0)
        .map(|r| r.ari)
        .collect();
    let mean_ari_40 = aris_at_40.iter().sum::<f64>() / aris_at_40.len() as f64;
    let min_ari_40 = aris_at_40.iter().copied().fold(f64::INFINITY, f64::min);

    // (a) silhouette decreases monotonically in the zero fraction.
    assert!(
        mean_sil[0] > mean_sil[1] && mean_sil[1] > mean_sil[2],
        "mean silhouettes not monotone: {mean_sil:?}"
    );
    // (b) hGNB >= log-count PCA at 40% zeros in at least 8 of 10 replicates.
    assert!(
        wins_at_40 >= 8,
        "hGNB beat the PCA baseline in only {wins_at_40}/10 replicates at 40% zeros"
    );
    // (c) cluster recovery: mean k-means ARI >= 0.7 at 40% zeros.
    assert!(
        mean_ari_40 >= 0.7,
        "mean ARI at 40% zeros = {mean_ari_40:.3} (min {min_ari_40:.3})"
    );
    println!(
        "[PASS] criterion 5: simulation study (10 replicates/level): mean silhouettes \
         {:.3}/{:.3}/{:.3} at 40/60/80% zeros (monotone), hGNB >= PCA in {wins_at_40}/10 \
         at 40%, mean ARI {mean_ari_40:.3} (min {min_ari_40:.3}) >= 0.7",
        mean_sil[0], mean_sil[1], mean_sil[2]
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: goodness-of-fit mean-difference bins
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_goodness_of_fit_md_bins() {
    // Well-specified data: moderate dispersion, every gene decently
    // expressed so the MD running mean is a clean residual check.
    let (v_genes, j_cells) = (90usize, 40usize);
    let mut srng = RngStream::new(0xacce_0006, 0);
    let mut beta = DMatrix::zeros(1, v_genes);
    for x in beta.iter_mut() {
        let z = loop {
            let z = f64::std_normal(&mut srng);
            if z.abs() <= 1.5 {
                break z;
            }
        };
        *x = -0.87 + 1.3 * z;
    }
    let mut delta = DMatrix::zeros(1, j_cells);
    for x in delta.iter_mut() {
        *x = 0.15 * f64::std_normal(&mut srng);
    }
    let mut phi = DMatrix::zeros(2, v_genes);
    for x in phi.iter_mut() {
        *x = 0.22 * f64::std_normal(&mut srng);
    }
    let mut theta = DMatrix::zeros(2, j_cells);
    for x in theta.iter_mut() {
        *x = 0.22 * f64::std_normal(&mut srng);
    }
    let mut r = DVector::zeros(j_cells);
    for x in r.iter_mut() {
        *x = 600.0 + 800.0 * f64::open01(&mut srng);
    }
    let fixed = FixedBlocks {
        r: Some(r),
        h: Some(1.0),
        beta: Some(beta),
        delta: Some(delta),
        phi: Some(phi),
        theta: Some(theta),
        alpha: Some(DVector::from_element(1, 1.0)),
        eta: Some(DVector::from_element(1, 1.0)),
        gamma: Some(DVector::from_element(2, 1.0)),
    };
    let designs = DesignMatrices::<f64>::intercept_only(v_genes, j_cells);
    let mut sim_hyper = Hyperparams::<f64>::new(2);
    sim_hyper.seed = 5;
    let (counts, _) = simulate_hgnb(&designs, &sim_hyper, &fixed, 10, &mut srng).unwrap();

    let mut hyper = Hyperparams::<f64>::new(2);
    hyper.n_iterations = 1500;
    hyper.burn_in = 750;
    hyper.seed = 11;
    let cfg = GibbsConfig {
        pg_trunc: 20,
        store_samples: false,
        ..GibbsConfig::default()
    };
    let out = hgnb_core::gibbs::run_chain(&counts, &designs, &hyper, cfg).unwrap();
    let table = md_plot_data(&counts, &out.point_estimate, &designs, 20).unwrap();
    assert_eq!(table.bins.len(), 20);
    let mut worst = 0.0f64;
    for (b, bin) in table.bins.iter().enumerate() {
        let se = bin.y_sd / (bin.count as f64).sqrt();
        assert!(se > 0.0, "bin {b} has zero spread");
        let z = bin.y_mean / se;
        worst = worst.max(z.abs());
        assert!(
            z.abs() <= 3.0,
            "MD bin {b} (x ~ {:.1}) mean {:.3} is {:.2} standard errors from 0",
            bin.x_mean,
            bin.y_mean,
            z
        );
    }
    println!(
        "[PASS] criterion 6: every MD bin mean of the well-specified fit lies within \
         3 standard errors of 0 (worst |z| = {worst:.2})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: determinism, including across worker counts
// ---------------------------------------------------------------------------

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn criterion_7_determinism_across_worker_counts() {
    let counts = CountMatrix::from_triplets(
        6,
        5,
        vec![(0, 0, 3), (1, 1, 1), (2, 2, 8), (3, 3, 2), (4, 4, 1), (5, 0, 2), (2, 4, 4)],
    )
    .unwrap();
    let designs = DesignMatrices::<f64>::intercept_only(6, 5);
    let mut hyper = Hyperparams::<f64>::new(2);
    hyper.n_iterations = 50;
    hyper.burn_in = 20;
    hyper.seed = 99;

    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for (name, workers) in [("a_w1", 1usize), ("b_w1", 1), ("c_w2", 2)] {
        let cfg = GibbsConfig {
            pg_trunc: 30,
            workers: Some(workers),
            ..GibbsConfig::default()
        };
        let out = hgnb_core::gibbs::run_chain(&counts, &designs, &hyper, cfg).unwrap();
        let dir = tmp.path().join(name);
        io::write_fit_outputs(&dir, &out, None, None).unwrap();
        dirs.push(dir);
    }
    let a = dir_bytes(&dirs[0]);
    let b = dir_bytes(&dirs[1]);
    let c = dir_bytes(&dirs[2]);
    assert_eq!(a.len(), b.len());
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(ba, bb, "repeat run differs in {na}");
    }
    for ((na, ba), (nc, bc)) in a.iter().zip(&c) {
        assert_eq!(na, nc);
        assert_eq!(ba, bc, "worker-count run differs in {na}");
    }
    println!(
        "[PASS] criterion 7: identical config + seed gives byte-identical outputs across \
         repeat runs and across worker counts 1 vs 2 ({} files compared)",
        a.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: checkpoint equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_checkpoint_split_equals_straight() {
    let counts = CountMatrix::from_triplets(
        5,
        4,
        vec![(0, 0, 2), (1, 1, 6), (2, 2, 1), (3, 3, 3), (4, 1, 2)],
    )
    .unwrap();
    let designs = DesignMatrices::<f64>::intercept_only(5, 4);
    let mut hyper = Hyperparams::<f64>::new(2);
    hyper.n_iterations = 60;
    hyper.burn_in = 25;
    hyper.seed = 1234;
    let cfg = GibbsConfig {
        pg_trunc: 30,
        ..GibbsConfig::default()
    };
    let runner = GibbsRunner::new(&counts, &designs, &hyper, cfg).unwrap();

    let straight = runner.run().unwrap();

    // Split at iteration 30, through an actual file.
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("ckpt.bin");
    let book = runner.run_until(30).unwrap();
    io::save_checkpoint(&path, &book).unwrap();
    let loaded = io::load_checkpoint::<f64>(&path).unwrap();
    let resumed = runner.resume(loaded).unwrap();

    assert_eq!(straight.log_likelihoods, resumed.log_likelihoods);
    assert_eq!(straight.samples, resumed.samples);
    assert_eq!(straight.point_estimate, resumed.point_estimate);
    assert_eq!(straight.point_iteration, resumed.point_iteration);
    assert_eq!(
        straight.point_log_likelihood.to_bits(),
        resumed.point_log_likelihood.to_bits()
    );

    // The written outputs are byte-identical too.
    let d1 = tmp.path().join("straight");
    let d2 = tmp.path().join("resumed");
    io::write_fit_outputs(&d1, &straight, None, None).unwrap();
    io::write_fit_outputs(&d2, &resumed, None, None).unwrap();
    for ((na, ba), (nb, bb)) in dir_bytes(&d1).iter().zip(&dir_bytes(&d2)) {
        assert_eq!(na, nb);
        assert_eq!(ba, bb, "split run differs in {na}");
    }

    // A truncated checkpoint is an explicit error.
    let bytes = std::fs::read(&path).unwrap();
    let cut = tmp.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(io::load_checkpoint::<f64>(&cut).is_err());

    println!(
        "[PASS] criterion 8: a run split by a checkpoint file reproduces the straight \
         run bit-exactly (likelihood trace, samples, point estimate, and output files)"
    );
}
