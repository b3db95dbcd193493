//! `hgnb` command line: fit the hGNB factor model, simulate benchmark
//! data, evaluate embeddings/clusterings/goodness-of-fit, and score new
//! cells against a fitted gene side.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use hgnb_core::data::{DesignMatrices, Hyperparams};
use hgnb_core::eval::{
    adjusted_rand_index, kmeans_detail, md_plot_data, mst_lineage, silhouette_width,
};
use hgnb_core::gibbs::{GibbsConfig, GibbsRunner, OmegaPolicy, UpdateMask};
use hgnb_core::model::ModelState;
use hgnb_core::sim::{filter_genes, preset, preset_names, simulate_zinb_calibrated, SimSpec};
use hgnb_core::{io, ErrorClass, RngStream};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hgnb",
    about = "Hierarchical gamma-negative binomial factor model for count matrices",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a count matrix with Gibbs sampling.
    Fit(FitArgs),
    /// Generate synthetic count data from a preset or a spec file.
    Simulate(SimulateArgs),
    /// Compute silhouette/ARI/k-means/MST/MD tables from saved outputs.
    Evaluate(EvaluateArgs),
    /// Score new cells against a saved fit (gene-side blocks frozen).
    Transform(TransformArgs),
}

#[derive(Args, Clone, Default)]
struct FitArgs {
    /// Counts file (.mtx MatrixMarket or .csv dense).
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Force the counts format instead of inferring from the extension.
    #[arg(long, value_parser = ["mtx", "csv"])]
    counts_format: Option<String>,
    /// Cell-level covariates CSV (rows = covariates, columns = cells).
    #[arg(long)]
    cell_covariates: Option<PathBuf>,
    /// Gene-level covariates CSV (rows = covariates, columns = genes).
    #[arg(long)]
    gene_covariates: Option<PathBuf>,
    /// Leave the all-ones intercept row off the cell covariates.
    #[arg(long)]
    no_cell_intercept: bool,
    /// Leave the all-ones intercept row off the gene covariates.
    #[arg(long)]
    no_gene_intercept: bool,
    /// Number of latent factors K.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    e0: Option<f64>,
    #[arg(long)]
    f0: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Store every thin-th post-burn-in sample.
    #[arg(long)]
    thin: Option<usize>,
    /// Polya-Gamma series truncation level.
    #[arg(long)]
    pg_trunc: Option<usize>,
    /// Worker threads (default: HGNB_WORKERS env var, then all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// PG auxiliary storage: materialized (default) or recompute.
    #[arg(long, value_parser = ["materialized", "recompute"])]
    omega_policy: Option<String>,
    /// Write the full post-burn-in sample archive (samples.bin).
    #[arg(long)]
    save_samples: bool,
    /// Write a resumable checkpoint every N iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Resume from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// JSON config file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything needed to reproduce a fit; written to the output directory
/// as config.json.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
struct FitConfig {
    counts: Option<PathBuf>,
    counts_format: Option<String>,
    cell_covariates: Option<PathBuf>,
    gene_covariates: Option<PathBuf>,
    cell_intercept: Option<bool>,
    gene_intercept: Option<bool>,
    k: Option<usize>,
    iterations: Option<usize>,
    burn_in: Option<usize>,
    e0: Option<f64>,
    f0: Option<f64>,
    seed: Option<u64>,
    thin: Option<usize>,
    pg_trunc: Option<usize>,
    workers: Option<usize>,
    omega_policy: Option<String>,
    save_samples: Option<bool>,
    checkpoint_every: Option<usize>,
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SimulateArgs {
    /// Built-in preset name (zinb-40, zinb-60, zinb-80, *-j1000).
    #[arg(long)]
    preset: Option<String>,
    /// SimSpec JSON file (overrides --preset).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Drop genes without at least 5 reads in at least 5 cells.
    #[arg(long)]
    filter_genes: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct EvaluateArgs {
    /// Embedding CSV (rows = cells) as written by `fit`.
    #[arg(long)]
    embedding: Option<PathBuf>,
    /// Reference labels CSV (cell,label).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Cluster the embedding with k-means at this k.
    #[arg(long)]
    kmeans: Option<usize>,
    /// Seed for k-means restarts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Counts file for the mean-difference table.
    #[arg(long)]
    counts: Option<PathBuf>,
    #[arg(long, value_parser = ["mtx", "csv"])]
    counts_format: Option<String>,
    /// Point-estimate container (point_estimate.bin) for the MD table.
    #[arg(long)]
    point_estimate: Option<PathBuf>,
    #[arg(long)]
    cell_covariates: Option<PathBuf>,
    #[arg(long)]
    gene_covariates: Option<PathBuf>,
    #[arg(long)]
    no_cell_intercept: bool,
    #[arg(long)]
    no_gene_intercept: bool,
    /// Equal-count bins of the MD running mean.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Emit SVG scatter plots.
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TransformArgs {
    /// Point-estimate container from a previous fit.
    #[arg(long)]
    point_estimate: PathBuf,
    /// Counts for the new cells (same gene set as the fit).
    #[arg(long)]
    counts: PathBuf,
    #[arg(long, value_parser = ["mtx", "csv"])]
    counts_format: Option<String>,
    /// Cell covariates for the new cells.
    #[arg(long)]
    cell_covariates: Option<PathBuf>,
    /// Gene covariates (must match the fitted gene side).
    #[arg(long)]
    gene_covariates: Option<PathBuf>,
    #[arg(long)]
    no_cell_intercept: bool,
    #[arg(long)]
    no_gene_intercept: bool,
    #[arg(long, default_value_t = 600)]
    iterations: usize,
    #[arg(long, default_value_t = 300)]
    burn_in: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    pg_trunc: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Core(hgnb_core::Error),
}

impl From<hgnb_core::Error> for Failure {
    fn from(e: hgnb_core::Error) -> Self {
        Failure::Core(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error: usage: {}", first_line(&e.to_string()));
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Fit(args) => run_fit(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Transform(args) => run_transform(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: usage: {}", first_line(&msg));
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            let (label, code) = match e.class() {
                ErrorClass::Data => ("data", 2),
                ErrorClass::Numerical => ("numerical", 3),
            };
            eprintln!("error: {label}: {}", first_line(&e.to_string()));
            ExitCode::from(code)
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("unknown error").to_string()
}

fn default_workers() -> Option<usize> {
    std::env::var("HGNB_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
}

fn counts_format(path: &Path, flag: Option<&str>) -> io::CountsFormat {
    match flag {
        Some("mtx") => io::CountsFormat::Mtx,
        Some("csv") => io::CountsFormat::Csv,
        _ => io::CountsFormat::from_path(path),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path).map_err(hgnb_core::Error::Io)?);
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| hgnb_core::Error::invalid(format!("config serialization: {e}")))?;
    w.write_all(body.as_bytes()).map_err(hgnb_core::Error::Io)?;
    w.write_all(b"\n").map_err(hgnb_core::Error::Io)?;
    Ok(())
}

fn load_designs(
    counts: &hgnb_core::data::CountMatrix,
    cell_path: Option<&Path>,
    gene_path: Option<&Path>,
    cell_intercept: bool,
    gene_intercept: bool,
) -> Result<DesignMatrices<f64>, Failure> {
    let cell = io::read_design::<f64>(cell_path, counts.n_cells(), cell_intercept)?;
    let gene = io::read_design::<f64>(gene_path, counts.n_genes(), gene_intercept)?;
    let designs = DesignMatrices::new(cell, gene, cell_intercept, gene_intercept)?;
    designs.check_dims(counts)?;
    Ok(designs)
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn resolve_fit_config(args: &FitArgs) -> Result<FitConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let body = std::fs::read_to_string(path).map_err(hgnb_core::Error::Io)?;
            serde_json::from_str::<FitConfig>(&body)
                .map_err(|e| hgnb_core::Error::invalid(format!("config file: {e}")))?
        }
        None => FitConfig::default(),
    };
    // Flags override file values.
    let a = args.clone();
    cfg.counts = a.counts.or(cfg.counts);
    cfg.counts_format = a.counts_format.or(cfg.counts_format);
    cfg.cell_covariates = a.cell_covariates.or(cfg.cell_covariates);
    cfg.gene_covariates = a.gene_covariates.or(cfg.gene_covariates);
    if a.no_cell_intercept {
        cfg.cell_intercept = Some(false);
    }
    if a.no_gene_intercept {
        cfg.gene_intercept = Some(false);
    }
    cfg.k = a.k.or(cfg.k);
    cfg.iterations = a.iterations.or(cfg.iterations);
    cfg.burn_in = a.burn_in.or(cfg.burn_in);
    cfg.e0 = a.e0.or(cfg.e0);
    cfg.f0 = a.f0.or(cfg.f0);
    cfg.seed = a.seed.or(cfg.seed);
    cfg.thin = a.thin.or(cfg.thin);
    cfg.pg_trunc = a.pg_trunc.or(cfg.pg_trunc);
    cfg.workers = a.workers.or(cfg.workers).or_else(default_workers);
    cfg.omega_policy = a.omega_policy.or(cfg.omega_policy);
    if a.save_samples {
        cfg.save_samples = Some(true);
    }
    cfg.checkpoint_every = a.checkpoint_every.or(cfg.checkpoint_every);
    cfg.out = a.out.or(cfg.out);
    // Fill remaining defaults so the echo is complete.
    cfg.cell_intercept.get_or_insert(true);
    cfg.gene_intercept.get_or_insert(true);
    cfg.iterations.get_or_insert(2000);
    cfg.burn_in.get_or_insert(1000);
    cfg.e0.get_or_insert(0.01);
    cfg.f0.get_or_insert(0.01);
    cfg.seed.get_or_insert(0);
    cfg.thin.get_or_insert(1);
    cfg.pg_trunc.get_or_insert(200);
    cfg.omega_policy
        .get_or_insert_with(|| "materialized".to_string());
    cfg.save_samples.get_or_insert(false);
    Ok(cfg)
}

fn run_fit(args: FitArgs) -> Result<(), Failure> {
    let cfg = resolve_fit_config(&args)?;
    let counts_path = cfg
        .counts
        .clone()
        .ok_or_else(|| usage("--counts (or a config file providing it) is required"))?;
    let out_dir = cfg
        .out
        .clone()
        .ok_or_else(|| usage("--out (or a config file providing it) is required"))?;
    let k = cfg.k.ok_or_else(|| usage("--k is required"))?;
    std::fs::create_dir_all(&out_dir).map_err(hgnb_core::Error::Io)?;

    let format = counts_format(&counts_path, cfg.counts_format.as_deref());
    let (counts, gene_ids, cell_ids) = match format {
        io::CountsFormat::Csv => {
            let (c, g, ids) = io::read_counts_csv(&counts_path)?;
            (c, Some(g), Some(ids))
        }
        io::CountsFormat::Mtx => (io::read_counts_mtx(&counts_path)?, None, None),
    };
    let designs = load_designs(
        &counts,
        cfg.cell_covariates.as_deref(),
        cfg.gene_covariates.as_deref(),
        cfg.cell_intercept.unwrap(),
        cfg.gene_intercept.unwrap(),
    )?;

    let mut hyper = Hyperparams::<f64>::new(k);
    hyper.e0 = cfg.e0.unwrap();
    hyper.f0 = cfg.f0.unwrap();
    hyper.n_iterations = cfg.iterations.unwrap();
    hyper.burn_in = cfg.burn_in.unwrap();
    hyper.seed = cfg.seed.unwrap();

    let engine = GibbsConfig {
        pg_trunc: cfg.pg_trunc.unwrap(),
        thin: cfg.thin.unwrap(),
        store_samples: true,
        omega: match cfg.omega_policy.as_deref() {
            Some("recompute") => OmegaPolicy::Recompute,
            _ => OmegaPolicy::Materialized,
        },
        updates: UpdateMask::all(),
        workers: cfg.workers,
        abort_checkpoint: Some(out_dir.join("checkpoint_abort.bin")),
    };
    let runner = GibbsRunner::new(&counts, &designs, &hyper, engine)?;

    let every = hyper.n_iterations.div_ceil(20).max(1);
    let progress = |rep: &hgnb_core::gibbs::SweepReport<f64>| {
        if rep.iteration % every == 0 || rep.iteration == hyper.n_iterations {
            eprintln!(
                "iter {:>6}  log-likelihood {:.4}  clamps {}",
                rep.iteration, rep.log_likelihood, rep.clamp_events
            );
        }
    };

    let out = match (&args.resume, cfg.checkpoint_every) {
        (Some(path), _) => {
            let book = io::load_checkpoint::<f64>(path)?;
            eprintln!(
                "resuming from {} at iteration {}",
                path.display(),
                book.next_iteration
            );
            runner.resume(book)?
        }
        (None, Some(every)) if every > 0 => {
            let ckpt_path = out_dir.join("checkpoint.bin");
            let mut book = runner.run_until(every.min(hyper.n_iterations))?;
            io::save_checkpoint(&ckpt_path, &book)?;
            while book.next_iteration <= hyper.n_iterations {
                let stop = (book.next_iteration + every - 1).min(hyper.n_iterations);
                book = runner.resume_until(book, stop)?;
                io::save_checkpoint(&ckpt_path, &book)?;
            }
            runner.finish(book)?
        }
        _ => runner.run_with_progress(progress)?,
    };

    io::write_fit_outputs(&out_dir, &out, cell_ids.as_deref(), gene_ids.as_deref())?;
    if cfg.save_samples.unwrap() {
        io::save_samples_archive(out_dir.join("samples.bin"), &out)?;
    }
    if k >= 2 {
        io::write_svg_scatter(
            out_dir.join("embedding.svg"),
            &out.point_estimate.params.theta,
            None,
            "hGNB factor scores",
        )?;
    }
    write_json(&out_dir.join("config.json"), &cfg)?;
    eprintln!(
        "point estimate from iteration {} (log-likelihood {:.4}), clamp events {}",
        out.point_iteration, out.point_log_likelihood, out.meta.clamp_events_total
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SimulateEcho {
    spec: SimSpec<f64>,
    calibrated_dropout_intercept: f64,
    achieved_zero_fraction: f64,
    filtered_genes: Option<usize>,
    seed: u64,
}

fn run_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut spec: SimSpec<f64> = match (&args.spec, &args.preset) {
        (Some(path), _) => {
            let body = std::fs::read_to_string(path).map_err(hgnb_core::Error::Io)?;
            serde_json::from_str(&body)
                .map_err(|e| hgnb_core::Error::invalid(format!("spec file: {e}")))?
        }
        (None, Some(name)) => preset(name).ok_or_else(|| {
            usage(format!(
                "unknown preset `{name}`; available: {}",
                preset_names().join(", ")
            ))
        })?,
        (None, None) => return Err(usage("one of --preset or --spec is required")),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    std::fs::create_dir_all(&args.out).map_err(hgnb_core::Error::Io)?;

    let rng = RngStream::new(spec.seed, 0x51b);
    let (sim, intercept) = simulate_zinb_calibrated(&spec, &rng)?;
    let (counts, kept) = if args.filter_genes {
        let (c, kept) = filter_genes(&sim.counts, 5, 5)?;
        (c, Some(kept))
    } else {
        (sim.counts.clone(), None)
    };

    io::write_counts_mtx(args.out.join("counts.mtx"), &counts)?;
    io::write_labels(args.out.join("labels.csv"), &sim.labels, None)?;
    let factors: Vec<String> = (0..spec.n_factors).map(|k| format!("factor{k}")).collect();
    let cells: Vec<String> = (0..spec.n_cells).map(|j| format!("c{j}")).collect();
    io::write_labeled_matrix(
        args.out.join("theta_true.csv"),
        &sim.truth.theta,
        &factors,
        &cells,
    )?;
    if let Some(kept) = &kept {
        let mut w = BufWriter::new(
            File::create(args.out.join("kept_genes.csv")).map_err(hgnb_core::Error::Io)?,
        );
        writeln!(w, "gene").map_err(hgnb_core::Error::Io)?;
        for v in kept {
            writeln!(w, "g{v}").map_err(hgnb_core::Error::Io)?;
        }
    }
    if spec.n_factors >= 2 {
        io::write_svg_scatter(
            args.out.join("theta_true.svg"),
            &sim.truth.theta,
            Some(&sim.labels),
            "true factor scores",
        )?;
    }
    let echo = SimulateEcho {
        calibrated_dropout_intercept: intercept,
        achieved_zero_fraction: sim.counts.zero_fraction(),
        filtered_genes: kept.as_ref().map(|k| spec.n_genes - k.len()),
        seed: spec.seed,
        spec,
    };
    write_json(&args.out.join("config.json"), &echo)?;
    eprintln!(
        "zero fraction {:.4} (dropout intercept {:.4})",
        echo.achieved_zero_fraction, echo.calibrated_dropout_intercept
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Serialize, Default)]
struct Metrics {
    average_silhouette: Option<f64>,
    ari_kmeans_vs_labels: Option<f64>,
    kmeans_sse: Option<f64>,
    md_bins: Option<usize>,
    md_max_abs_bin_mean: Option<f64>,
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    std::fs::create_dir_all(&args.out).map_err(hgnb_core::Error::Io)?;
    let mut metrics = Metrics::default();
    let mut did_anything = false;

    let embedding = match &args.embedding {
        Some(path) => Some(io::read_embedding::<f64>(path)?),
        None => None,
    };
    let labels = match &args.labels {
        Some(path) => Some(io::read_labels(path)?),
        None => None,
    };

    if let (Some((points, _)), Some(ls)) = (&embedding, &labels) {
        let (widths, avg) = silhouette_width(points, ls)?;
        let mut w = BufWriter::new(
            File::create(args.out.join("silhouette.csv")).map_err(hgnb_core::Error::Io)?,
        );
        writeln!(w, "cell,label,silhouette").map_err(hgnb_core::Error::Io)?;
        for (j, s) in widths.iter().enumerate() {
            writeln!(w, "c{j},{},{}", ls[j], s).map_err(hgnb_core::Error::Io)?;
        }
        writeln!(w, "average,,{avg}").map_err(hgnb_core::Error::Io)?;
        metrics.average_silhouette = Some(avg);
        did_anything = true;
        if args.svg && points.nrows() >= 2 {
            io::write_svg_scatter(
                args.out.join("embedding.svg"),
                points,
                Some(ls),
                "embedding by reference label",
            )?;
        }
    }

    if let (Some((points, _)), Some(k)) = (&embedding, args.kmeans) {
        let fit = kmeans_detail(points, k, 8, &RngStream::new(args.seed, 0x3e7))?;
        io::write_labels(args.out.join("kmeans_labels.csv"), &fit.labels, None)?;
        metrics.kmeans_sse = Some(fit.sse);
        if let Some(ls) = &labels {
            metrics.ari_kmeans_vs_labels = Some(adjusted_rand_index(&fit.labels, ls)?);
        }
        let mut w = BufWriter::new(
            File::create(args.out.join("mst_edges.csv")).map_err(hgnb_core::Error::Io)?,
        );
        writeln!(w, "from,to").map_err(hgnb_core::Error::Io)?;
        if k >= 2 {
            for (a, b) in mst_lineage(&fit.centroids)? {
                writeln!(w, "{a},{b}").map_err(hgnb_core::Error::Io)?;
            }
        }
        if args.svg && points.nrows() >= 2 {
            io::write_svg_scatter(
                args.out.join("kmeans.svg"),
                points,
                Some(&fit.labels),
                "embedding by k-means label",
            )?;
        }
        did_anything = true;
    }

    if let (Some(counts_path), Some(pe_path)) = (&args.counts, &args.point_estimate) {
        let format = counts_format(counts_path, args.counts_format.as_deref());
        let counts = io::read_counts(counts_path, format)?;
        let (_, _, params, _, _) = io::load_point_estimate::<f64>(pe_path)?;
        let designs = load_designs(
            &counts,
            args.cell_covariates.as_deref(),
            args.gene_covariates.as_deref(),
            !args.no_cell_intercept,
            !args.no_gene_intercept,
        )?;
        let state = ModelState {
            params,
            omega: nalgebra::DMatrix::zeros(0, 0),
            crt: hgnb_core::model::CrtCounts { cols: vec![] },
        };
        let table = md_plot_data(&counts, &state, &designs, args.bins)?;
        let mut w = BufWriter::new(
            File::create(args.out.join("md.csv")).map_err(hgnb_core::Error::Io)?,
        );
        writeln!(w, "bin,x_mean,y_mean,y_sd,count").map_err(hgnb_core::Error::Io)?;
        let mut max_abs: f64 = 0.0;
        for (b, bin) in table.bins.iter().enumerate() {
            writeln!(
                w,
                "{b},{},{},{},{}",
                bin.x_mean, bin.y_mean, bin.y_sd, bin.count
            )
            .map_err(hgnb_core::Error::Io)?;
            max_abs = max_abs.max(bin.y_mean.abs());
        }
        metrics.md_bins = Some(table.bins.len());
        metrics.md_max_abs_bin_mean = Some(max_abs);
        if args.svg {
            let mut pts = nalgebra::DMatrix::zeros(2, table.pairs.len());
            for (i, &(x, y)) in table.pairs.iter().enumerate() {
                pts[(0, i)] = x;
                pts[(1, i)] = y;
            }
            io::write_svg_scatter(args.out.join("md.svg"), &pts, None, "mean-difference")?;
        }
        did_anything = true;
    }

    if !did_anything {
        return Err(usage(
            "nothing to evaluate: pass --embedding with --labels and/or --kmeans, or --counts with --point-estimate",
        ));
    }
    write_json(&args.out.join("metrics.json"), &metrics)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// transform
// ---------------------------------------------------------------------------

fn run_transform(args: TransformArgs) -> Result<(), Failure> {
    std::fs::create_dir_all(&args.out).map_err(hgnb_core::Error::Io)?;
    let (fit_hyper, fit_dims, fit_params, _, _) =
        io::load_point_estimate::<f64>(&args.point_estimate)?;
    let format = counts_format(&args.counts, args.counts_format.as_deref());
    let counts = io::read_counts(&args.counts, format)?;
    if counts.n_genes() != fit_dims.n_genes {
        return Err(hgnb_core::Error::dim(
            "new counts vs fitted gene side",
            fit_dims.n_genes,
            counts.n_genes(),
        )
        .into());
    }
    let designs = load_designs(
        &counts,
        args.cell_covariates.as_deref(),
        args.gene_covariates.as_deref(),
        !args.no_cell_intercept,
        !args.no_gene_intercept,
    )?;
    if designs.n_cell_covariates() != fit_dims.n_cell_covariates
        || designs.n_gene_covariates() != fit_dims.n_gene_covariates
    {
        return Err(hgnb_core::Error::dim(
            "covariate blocks vs fitted model",
            format!(
                "P={}, Q={}",
                fit_dims.n_cell_covariates, fit_dims.n_gene_covariates
            ),
            format!(
                "P={}, Q={}",
                designs.n_cell_covariates(),
                designs.n_gene_covariates()
            ),
        )
        .into());
    }

    let mut hyper = Hyperparams::<f64>::new(fit_hyper.k);
    hyper.e0 = fit_hyper.e0;
    hyper.f0 = fit_hyper.f0;
    hyper.n_iterations = args.iterations;
    hyper.burn_in = args.burn_in;
    hyper.seed = args.seed;

    let engine = GibbsConfig {
        pg_trunc: args.pg_trunc.unwrap_or(200),
        thin: 1,
        store_samples: false,
        omega: OmegaPolicy::Materialized,
        updates: UpdateMask::cell_side_only(),
        workers: args.workers.or_else(default_workers),
        abort_checkpoint: None,
    };
    let runner = GibbsRunner::new(&counts, &designs, &hyper, engine)?;

    // Start from the engine's fresh cell-side state, then pin every
    // gene-side block to the fitted point estimate.
    let mut state = runner.init_state();
    state.params.beta = fit_params.beta.clone();
    state.params.phi = fit_params.phi.clone();
    state.params.alpha = fit_params.alpha.clone();
    state.params.eta = fit_params.eta.clone();
    state.params.gamma = fit_params.gamma.clone();
    state.params.h = fit_params.h;
    let out = runner.run_from(state, |_| {})?;

    let dims = out.meta.dims;
    let cells: Vec<String> = (0..dims.n_cells).map(|j| format!("c{j}")).collect();
    let factors: Vec<String> = (0..dims.n_factors).map(|k| format!("factor{k}")).collect();
    let gene_covs: Vec<String> = (0..dims.n_gene_covariates)
        .map(|i| format!("z{i}"))
        .collect();
    let p = &out.point_estimate.params;
    io::write_labeled_matrix(args.out.join("theta.csv"), &p.theta, &factors, &cells)?;
    io::write_labeled_matrix(args.out.join("delta.csv"), &p.delta, &gene_covs, &cells)?;
    io::write_labeled_matrix(
        args.out.join("r.csv"),
        &nalgebra::DMatrix::from_row_iterator(1, dims.n_cells, p.r.iter().copied()),
        &["r".to_string()],
        &cells,
    )?;
    io::write_labeled_matrix(
        args.out.join("embedding.csv"),
        &p.theta.transpose(),
        &cells,
        &factors,
    )?;
    Ok(())
}
