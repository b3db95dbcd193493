//! File formats: MatrixMarket and CSV count matrices, numeric design CSVs,
//! parameter/label/likelihood tables, the binary checkpoint container, and
//! a small SVG scatter emitter.
//!
//! Counts are genes-by-cells everywhere: rows are genes, columns are cells.

use crate::data::{CountMatrix, Hyperparams};
use crate::error::{Error, Result};
use crate::gibbs::{BestSample, ChainCheckpoint};
use crate::model::{ChainOutput, CrtCounts, Dims, ModelState, ParamState};
use crate::scalar::Real;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Count-matrix file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountsFormat {
    Mtx,
    Csv,
}

impl CountsFormat {
    /// Infer from the file extension; `.mtx` is MatrixMarket, everything
    /// else is treated as CSV.
    pub fn from_path(path: &Path) -> CountsFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("mtx") => CountsFormat::Mtx,
            _ => CountsFormat::Csv,
        }
    }
}

/// Read a count matrix in the given format.
pub fn read_counts(path: impl AsRef<Path>, format: CountsFormat) -> Result<CountMatrix> {
    match format {
        CountsFormat::Mtx => read_counts_mtx(path),
        CountsFormat::Csv => Ok(read_counts_csv(path)?.0),
    }
}

/// Write a count matrix in the given format (generated gene/cell ids for
/// CSV).
pub fn write_counts(path: impl AsRef<Path>, counts: &CountMatrix, format: CountsFormat) -> Result<()> {
    match format {
        CountsFormat::Mtx => write_counts_mtx(path, counts),
        CountsFormat::Csv => write_counts_csv(path, counts, None, None),
    }
}

// ---------------------------------------------------------------------------
// MatrixMarket coordinate integer
// ---------------------------------------------------------------------------

/// Read a sparse MatrixMarket coordinate file of integer counts.
pub fn read_counts_mtx(path: impl AsRef<Path>) -> Result<CountMatrix> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, banner) = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            context: "empty MatrixMarket file".to_string(),
        })
        .and_then(|(i, l)| l.map(|l| (i, l)).map_err(Error::Io))?;
    if !banner.starts_with("%%MatrixMarket") {
        return Err(Error::Parse {
            line: 1,
            context: "missing %%MatrixMarket banner".to_string(),
        });
    }
    let lower = banner.to_ascii_lowercase();
    if !lower.contains("matrix") || !lower.contains("coordinate") || !lower.contains("general") {
        return Err(Error::Parse {
            line: 1,
            context: format!("unsupported MatrixMarket type: {}", banner.trim()),
        });
    }
    if !(lower.contains("integer") || lower.contains("real")) {
        return Err(Error::Parse {
            line: 1,
            context: format!("unsupported MatrixMarket field: {}", banner.trim()),
        });
    }

    let mut dims: Option<(usize, usize, usize)> = None;
    let mut triplets = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(Error::Io)?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if dims.is_none() {
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    context: "expected `rows cols nnz` size line".to_string(),
                });
            }
            let parse = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    context: format!("invalid size field `{s}`"),
                })
            };
            dims = Some((parse(fields[0])?, parse(fields[1])?, parse(fields[2])?));
            triplets.reserve(dims.unwrap().2);
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                context: "expected `row col value` entry".to_string(),
            });
        }
        let row: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            context: format!("invalid row index `{}`", fields[0]),
        })?;
        let col: usize = fields[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            context: format!("invalid column index `{}`", fields[1]),
        })?;
        if row == 0 || col == 0 {
            return Err(Error::Parse {
                line: line_no,
                context: "MatrixMarket indices are 1-based".to_string(),
            });
        }
        let value = parse_count(fields[2], line_no)?;
        triplets.push((row - 1, col - 1, value));
    }
    let (v, j, nnz) = dims.ok_or_else(|| Error::Parse {
        line: 2,
        context: "missing size line".to_string(),
    })?;
    if triplets.len() != nnz {
        return Err(Error::Parse {
            line: 0,
            context: format!("size line promises {nnz} entries, found {}", triplets.len()),
        });
    }
    CountMatrix::from_triplets(v, j, triplets)
}

/// Write a sparse MatrixMarket coordinate integer file.
pub fn write_counts_mtx(path: impl AsRef<Path>, counts: &CountMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "%%MatrixMarket matrix coordinate integer general")?;
    writeln!(w, "{} {} {}", counts.n_genes(), counts.n_cells(), counts.nnz())?;
    for (v, j, n) in counts.iter_nonzero() {
        writeln!(w, "{} {} {}", v + 1, j + 1, n)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_count(s: &str, line_no: usize) -> Result<u32> {
    if let Ok(n) = s.parse::<i64>() {
        if n < 0 {
            return Err(Error::Parse {
                line: line_no,
                context: format!("negative count `{s}` rejected"),
            });
        }
        return u32::try_from(n).map_err(|_| Error::Parse {
            line: line_no,
            context: format!("count `{s}` exceeds the supported range"),
        });
    }
    // Permit real-typed files only when the values are integral.
    if let Ok(x) = s.parse::<f64>() {
        if x < 0.0 {
            return Err(Error::Parse {
                line: line_no,
                context: format!("negative count `{s}` rejected"),
            });
        }
        if x.fract() != 0.0 {
            return Err(Error::Parse {
                line: line_no,
                context: format!("fractional count `{s}` rejected"),
            });
        }
        if x > u32::MAX as f64 {
            return Err(Error::Parse {
                line: line_no,
                context: format!("count `{s}` exceeds the supported range"),
            });
        }
        return Ok(x as u32);
    }
    Err(Error::Parse {
        line: line_no,
        context: format!("invalid count `{s}`"),
    })
}

// ---------------------------------------------------------------------------
// Dense CSV counts (header row = cell ids, first column = gene ids)
// ---------------------------------------------------------------------------

/// Read a dense CSV count matrix. Returns the matrix plus gene and cell
/// ids.
pub fn read_counts_csv(
    path: impl AsRef<Path>,
) -> Result<(CountMatrix, Vec<String>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path.as_ref())
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            context: "count CSV needs a gene-id column plus at least one cell".to_string(),
        });
    }
    let cell_ids: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let n_cells = cell_ids.len();
    let mut gene_ids = Vec::new();
    let mut triplets = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line_no = idx + 2;
        let record = record.map_err(csv_err)?;
        if record.len() != n_cells + 1 {
            return Err(Error::Parse {
                line: line_no,
                context: format!(
                    "row has {} fields, header promises {}",
                    record.len(),
                    n_cells + 1
                ),
            });
        }
        let v = gene_ids.len();
        gene_ids.push(record[0].to_string());
        for j in 0..n_cells {
            let n = parse_count(record[j + 1].trim(), line_no)?;
            if n > 0 {
                triplets.push((v, j, n));
            }
        }
    }
    let counts = CountMatrix::from_triplets(gene_ids.len(), n_cells, triplets)?;
    Ok((counts, gene_ids, cell_ids))
}

/// Write a dense CSV count matrix with header row = cell ids and first
/// column = gene ids. Missing ids are generated as g0.. / c0..
pub fn write_counts_csv(
    path: impl AsRef<Path>,
    counts: &CountMatrix,
    gene_ids: Option<&[String]>,
    cell_ids: Option<&[String]>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write!(w, "gene")?;
    for j in 0..counts.n_cells() {
        match cell_ids {
            Some(ids) => write!(w, ",{}", ids[j])?,
            None => write!(w, ",c{j}")?,
        }
    }
    writeln!(w)?;
    for v in 0..counts.n_genes() {
        match gene_ids {
            Some(ids) => write!(w, "{}", ids[v])?,
            None => write!(w, "g{v}")?,
        }
        let mut nz = counts.row(v).iter().peekable();
        for j in 0..counts.n_cells() {
            let n = match nz.peek() {
                Some(&&(jj, n)) if jj as usize == j => {
                    nz.next();
                    n
                }
                _ => 0,
            };
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = match e.position() {
        Some(pos) => pos.line() as usize,
        None => 0,
    };
    Error::Parse {
        line,
        context: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Design matrices and generic numeric tables
// ---------------------------------------------------------------------------

/// Read one covariate block: a headerless numeric CSV whose rows are
/// covariates and columns are units (cells or genes). `path = None` yields
/// an empty 0 x n block. With `intercept`, an all-ones row is prepended.
pub fn read_design<T: Real>(
    path: Option<&Path>,
    n_units: usize,
    intercept: bool,
) -> Result<DMatrix<T>> {
    let mut rows: Vec<Vec<T>> = Vec::new();
    if let Some(path) = path {
        let file = File::open(path)?;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(Error::Io)?;
            if line.trim().is_empty() {
                continue;
            }
            let mut row = Vec::with_capacity(n_units);
            for field in line.split(',') {
                let x: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    context: format!("invalid numeric field `{}`", field.trim()),
                })?;
                if !x.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        context: format!("non-finite covariate `{}` rejected", field.trim()),
                    });
                }
                row.push(T::of(x));
            }
            if row.len() != n_units {
                return Err(Error::Parse {
                    line: line_no,
                    context: format!("row has {} fields, expected {n_units}", row.len()),
                });
            }
            rows.push(row);
        }
    }
    let offset = usize::from(intercept);
    let mut m = DMatrix::zeros(rows.len() + offset, n_units);
    if intercept {
        m.row_mut(0).fill(T::one());
    }
    for (i, row) in rows.into_iter().enumerate() {
        for (j, x) in row.into_iter().enumerate() {
            m[(i + offset, j)] = x;
        }
    }
    Ok(m)
}

/// Write a labeled numeric matrix: header `,col0,col1,...`, then one row
/// per matrix row with its label first.
pub fn write_labeled_matrix<T: Real>(
    path: impl AsRef<Path>,
    m: &DMatrix<T>,
    row_labels: &[String],
    col_labels: &[String],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write!(w, "id")?;
    for c in col_labels {
        write!(w, ",{c}")?;
    }
    writeln!(w)?;
    for i in 0..m.nrows() {
        write!(w, "{}", row_labels[i])?;
        for j in 0..m.ncols() {
            write!(w, ",{}", m[(i, j)])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a labeled numeric matrix written by [`write_labeled_matrix`].
pub fn read_labeled_matrix<T: Real>(
    path: impl AsRef<Path>,
) -> Result<(DMatrix<T>, Vec<String>, Vec<String>)> {
    let file = File::open(path.as_ref())?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l.map_err(Error::Io)?,
        None => {
            return Err(Error::Parse {
                line: 1,
                context: "empty table".to_string(),
            })
        }
    };
    let col_labels: Vec<String> = header.split(',').skip(1).map(|s| s.to_string()).collect();
    let mut row_labels = Vec::new();
    let mut values: Vec<T> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        row_labels.push(fields.next().unwrap_or_default().to_string());
        let mut n = 0;
        for f in fields {
            let x: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                context: format!("invalid numeric field `{f}`"),
            })?;
            values.push(T::of(x));
            n += 1;
        }
        if n != col_labels.len() {
            return Err(Error::Parse {
                line: line_no,
                context: format!("row has {n} fields, header promises {}", col_labels.len()),
            });
        }
    }
    let nrows = row_labels.len();
    let ncols = col_labels.len();
    let m = DMatrix::from_row_iterator(nrows, ncols, values.into_iter());
    Ok((m, row_labels, col_labels))
}

/// Write integer labels as `id,label` rows.
pub fn write_labels(path: impl AsRef<Path>, labels: &[usize], ids: Option<&[String]>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "cell,label")?;
    for (j, l) in labels.iter().enumerate() {
        match ids {
            Some(ids) => writeln!(w, "{},{l}", ids[j])?,
            None => writeln!(w, "c{j},{l}")?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Read labels written by [`write_labels`].
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let file = File::open(path.as_ref())?;
    let mut labels = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::Io)?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let field = line.split(',').nth(1).ok_or_else(|| Error::Parse {
            line: idx + 1,
            context: "expected `id,label`".to_string(),
        })?;
        labels.push(field.trim().parse().map_err(|_| Error::Parse {
            line: idx + 1,
            context: format!("invalid label `{field}`"),
        })?);
    }
    Ok(labels)
}

// ---------------------------------------------------------------------------
// Binary containers (checkpoint, point estimate, samples)
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"HGNBCKPT";
const POINT_MAGIC: &[u8; 8] = b"HGNBPEST";
const SAMPLES_MAGIC: &[u8; 8] = b"HGNBSAMP";
const FORMAT_VERSION: u32 = 1;

fn ck_err(context: impl Into<String>) -> Error {
    Error::Checkpoint {
        context: context.into(),
    }
}

fn write_header(w: &mut impl Write, magic: &[u8; 8]) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 8], what: &str) -> Result<()> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got)
        .map_err(|_| ck_err(format!("truncated {what} file")))?;
    if &got != magic {
        return Err(ck_err(format!("not a {what} file (bad magic)")));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| ck_err(format!("truncated {what} file")))?;
    if version != FORMAT_VERSION {
        return Err(ck_err(format!(
            "{what} format version {version} not supported (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

fn write_f64s<T: Real>(w: &mut impl Write, xs: impl Iterator<Item = T>) -> Result<()> {
    for x in xs {
        w.write_f64::<LittleEndian>(x.to_f64().unwrap_or(f64::NAN))?;
    }
    Ok(())
}

fn read_scalar<T: Real>(r: &mut impl Read) -> Result<T> {
    let x = r
        .read_f64::<LittleEndian>()
        .map_err(|_| ck_err("truncated container"))?;
    Ok(T::of(x))
}

fn read_vec<T: Real>(r: &mut impl Read, len: usize) -> Result<DVector<T>> {
    let mut v = DVector::zeros(len);
    for i in 0..len {
        v[i] = read_scalar(r)?;
    }
    Ok(v)
}

fn read_mat<T: Real>(r: &mut impl Read, nrows: usize, ncols: usize) -> Result<DMatrix<T>> {
    let mut m = DMatrix::zeros(nrows, ncols);
    for x in m.iter_mut() {
        *x = read_scalar(r)?;
    }
    Ok(m)
}

fn write_len(w: &mut impl Write, n: usize) -> Result<()> {
    w.write_u64::<LittleEndian>(n as u64)?;
    Ok(())
}

fn read_len(r: &mut impl Read) -> Result<usize> {
    Ok(r.read_u64::<LittleEndian>()
        .map_err(|_| ck_err("truncated container"))? as usize)
}

fn write_dims(w: &mut impl Write, dims: Dims) -> Result<()> {
    for d in [
        dims.n_genes,
        dims.n_cells,
        dims.n_factors,
        dims.n_cell_covariates,
        dims.n_gene_covariates,
    ] {
        write_len(w, d)?;
    }
    Ok(())
}

fn read_dims(r: &mut impl Read) -> Result<Dims> {
    Ok(Dims {
        n_genes: read_len(r)?,
        n_cells: read_len(r)?,
        n_factors: read_len(r)?,
        n_cell_covariates: read_len(r)?,
        n_gene_covariates: read_len(r)?,
    })
}

fn write_hyper<T: Real>(w: &mut impl Write, h: &Hyperparams<T>) -> Result<()> {
    write_f64s(w, [h.e0, h.f0].into_iter())?;
    write_len(w, h.k)?;
    write_len(w, h.n_iterations)?;
    write_len(w, h.burn_in)?;
    w.write_u64::<LittleEndian>(h.seed)?;
    Ok(())
}

fn read_hyper<T: Real>(r: &mut impl Read) -> Result<Hyperparams<T>> {
    Ok(Hyperparams {
        e0: read_scalar(r)?,
        f0: read_scalar(r)?,
        k: read_len(r)?,
        n_iterations: read_len(r)?,
        burn_in: read_len(r)?,
        seed: r
            .read_u64::<LittleEndian>()
            .map_err(|_| ck_err("truncated container"))?,
    })
}

fn write_params<T: Real>(w: &mut impl Write, p: &ParamState<T>) -> Result<()> {
    write_f64s(w, p.r.iter().copied())?;
    write_f64s(w, [p.h].into_iter())?;
    for m in [&p.beta, &p.delta, &p.phi, &p.theta] {
        write_f64s(w, m.iter().copied())?;
    }
    for v in [&p.alpha, &p.eta, &p.gamma] {
        write_f64s(w, v.iter().copied())?;
    }
    Ok(())
}

fn read_params<T: Real>(r: &mut impl Read, dims: Dims) -> Result<ParamState<T>> {
    Ok(ParamState {
        r: read_vec(r, dims.n_cells)?,
        h: read_scalar(r)?,
        beta: read_mat(r, dims.n_cell_covariates, dims.n_genes)?,
        delta: read_mat(r, dims.n_gene_covariates, dims.n_cells)?,
        phi: read_mat(r, dims.n_factors, dims.n_genes)?,
        theta: read_mat(r, dims.n_factors, dims.n_cells)?,
        alpha: read_vec(r, dims.n_cell_covariates)?,
        eta: read_vec(r, dims.n_gene_covariates)?,
        gamma: read_vec(r, dims.n_factors)?,
    })
}

fn write_state<T: Real>(w: &mut impl Write, s: &ModelState<T>) -> Result<()> {
    write_params(w, &s.params)?;
    if s.omega.is_empty() {
        w.write_u8(0)?;
    } else {
        w.write_u8(1)?;
        write_f64s(w, s.omega.iter().copied())?;
    }
    write_len(w, s.crt.cols.len())?;
    for col in &s.crt.cols {
        write_len(w, col.len())?;
        for &l in col {
            w.write_u32::<LittleEndian>(l)?;
        }
    }
    Ok(())
}

fn read_state<T: Real>(r: &mut impl Read, dims: Dims) -> Result<ModelState<T>> {
    let params = read_params(r, dims)?;
    let has_omega = r.read_u8().map_err(|_| ck_err("truncated container"))?;
    let omega = match has_omega {
        0 => DMatrix::zeros(0, 0),
        1 => read_mat(r, dims.n_genes, dims.n_cells)?,
        other => return Err(ck_err(format!("invalid omega flag {other}"))),
    };
    let n_cols = read_len(r)?;
    let mut cols = Vec::with_capacity(n_cols);
    for _ in 0..n_cols {
        let len = read_len(r)?;
        let mut col = Vec::with_capacity(len);
        for _ in 0..len {
            col.push(
                r.read_u32::<LittleEndian>()
                    .map_err(|_| ck_err("truncated container"))?,
            );
        }
        cols.push(col);
    }
    Ok(ModelState {
        params,
        omega,
        crt: CrtCounts { cols },
    })
}

/// Write a chain checkpoint (full bookkeeping; resuming reproduces the
/// uninterrupted run bit-exactly).
pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, ck: &ChainCheckpoint<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_header(&mut w, CKPT_MAGIC)?;
    write_dims(&mut w, ck.dims)?;
    write_hyper(&mut w, &ck.hyper)?;
    write_len(&mut w, ck.thin)?;
    write_len(&mut w, ck.pg_trunc)?;
    write_len(&mut w, ck.next_iteration)?;
    write_state(&mut w, &ck.state)?;
    write_len(&mut w, ck.log_likelihoods.len())?;
    write_f64s(&mut w, ck.log_likelihoods.iter().copied())?;
    write_len(&mut w, ck.samples.len())?;
    for s in &ck.samples {
        write_params(&mut w, s)?;
    }
    for &it in &ck.sample_iterations {
        write_len(&mut w, it)?;
    }
    match &ck.best {
        None => w.write_u8(0)?,
        Some(b) => {
            w.write_u8(1)?;
            write_len(&mut w, b.iteration)?;
            write_f64s(&mut w, [b.log_likelihood].into_iter())?;
            write_state(&mut w, &b.state)?;
        }
    }
    w.write_u64::<LittleEndian>(ck.clamp_total)?;
    w.flush()?;
    Ok(())
}

/// Load a chain checkpoint. Truncated or mismatched files produce an
/// explicit error and no partial state.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<ChainCheckpoint<T>> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    read_header(&mut r, CKPT_MAGIC, "checkpoint")?;
    let dims = read_dims(&mut r)?;
    let hyper = read_hyper(&mut r)?;
    let thin = read_len(&mut r)?;
    let pg_trunc = read_len(&mut r)?;
    let next_iteration = read_len(&mut r)?;
    let state = read_state(&mut r, dims)?;
    let n_ll = read_len(&mut r)?;
    let mut log_likelihoods = Vec::with_capacity(n_ll);
    for _ in 0..n_ll {
        log_likelihoods.push(read_scalar(&mut r)?);
    }
    let n_samples = read_len(&mut r)?;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        samples.push(read_params(&mut r, dims)?);
    }
    let mut sample_iterations = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        sample_iterations.push(read_len(&mut r)?);
    }
    let best = match r.read_u8().map_err(|_| ck_err("truncated checkpoint"))? {
        0 => None,
        1 => Some(BestSample {
            iteration: read_len(&mut r)?,
            log_likelihood: read_scalar(&mut r)?,
            state: read_state(&mut r, dims)?,
        }),
        other => return Err(ck_err(format!("invalid best-sample flag {other}"))),
    };
    let clamp_total = r
        .read_u64::<LittleEndian>()
        .map_err(|_| ck_err("truncated checkpoint"))?;
    Ok(ChainCheckpoint {
        hyper,
        dims,
        thin,
        pg_trunc,
        next_iteration,
        state,
        log_likelihoods,
        samples,
        sample_iterations,
        best,
        clamp_total,
    })
}

/// Point-estimate container: hyperparameters, dimensions, the winning
/// parameter state, and its likelihood.
pub fn save_point_estimate<T: Real>(path: impl AsRef<Path>, out: &ChainOutput<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_header(&mut w, POINT_MAGIC)?;
    write_dims(&mut w, out.meta.dims)?;
    write_hyper(&mut w, &out.meta.hyper)?;
    write_len(&mut w, out.point_iteration)?;
    write_f64s(&mut w, [out.point_log_likelihood].into_iter())?;
    write_params(&mut w, &out.point_estimate.params)?;
    w.flush()?;
    Ok(())
}

/// Load a point-estimate container.
pub fn load_point_estimate<T: Real>(
    path: impl AsRef<Path>,
) -> Result<(Hyperparams<T>, Dims, ParamState<T>, usize, T)> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    read_header(&mut r, POINT_MAGIC, "point estimate")?;
    let dims = read_dims(&mut r)?;
    let hyper = read_hyper(&mut r)?;
    let iteration = read_len(&mut r)?;
    let ll = read_scalar(&mut r)?;
    let params = read_params(&mut r, dims)?;
    Ok((hyper, dims, params, iteration, ll))
}

/// Optional archive of all stored posterior parameter snapshots.
pub fn save_samples_archive<T: Real>(path: impl AsRef<Path>, out: &ChainOutput<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_header(&mut w, SAMPLES_MAGIC)?;
    write_dims(&mut w, out.meta.dims)?;
    write_len(&mut w, out.samples.len())?;
    for (s, &it) in out.samples.iter().zip(&out.sample_iterations) {
        write_len(&mut w, it)?;
        write_params(&mut w, s)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a samples archive as (iteration, parameters) pairs.
pub fn load_samples_archive<T: Real>(
    path: impl AsRef<Path>,
) -> Result<Vec<(usize, ParamState<T>)>> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    read_header(&mut r, SAMPLES_MAGIC, "samples archive")?;
    let dims = read_dims(&mut r)?;
    let n = read_len(&mut r)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let it = read_len(&mut r)?;
        out.push((it, read_params(&mut r, dims)?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fit output directory
// ---------------------------------------------------------------------------

/// Write the standard fit outputs into `dir`: point-estimate parameter
/// tables (theta/phi/beta/delta/r), the likelihood trace, the cell
/// embedding, and the reusable point-estimate container.
pub fn write_fit_outputs<T: Real>(
    dir: impl AsRef<Path>,
    out: &ChainOutput<T>,
    cell_ids: Option<&[String]>,
    gene_ids: Option<&[String]>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let p = &out.point_estimate.params;
    let dims = out.meta.dims;
    let cells: Vec<String> = match cell_ids {
        Some(ids) => ids.to_vec(),
        None => (0..dims.n_cells).map(|j| format!("c{j}")).collect(),
    };
    let genes: Vec<String> = match gene_ids {
        Some(ids) => ids.to_vec(),
        None => (0..dims.n_genes).map(|v| format!("g{v}")).collect(),
    };
    let factors: Vec<String> = (0..dims.n_factors).map(|k| format!("factor{k}")).collect();
    let cell_covs: Vec<String> = (0..dims.n_cell_covariates).map(|i| format!("x{i}")).collect();
    let gene_covs: Vec<String> = (0..dims.n_gene_covariates).map(|i| format!("z{i}")).collect();

    write_labeled_matrix(dir.join("theta.csv"), &p.theta, &factors, &cells)?;
    write_labeled_matrix(dir.join("phi.csv"), &p.phi, &factors, &genes)?;
    write_labeled_matrix(dir.join("beta.csv"), &p.beta, &cell_covs, &genes)?;
    write_labeled_matrix(dir.join("delta.csv"), &p.delta, &gene_covs, &cells)?;
    write_labeled_matrix(
        dir.join("r.csv"),
        &DMatrix::from_row_iterator(1, dims.n_cells, p.r.iter().copied()),
        &["r".to_string()],
        &cells,
    )?;

    // Cell embedding: one row per cell for downstream tools.
    write_labeled_matrix(dir.join("embedding.csv"), &p.theta.transpose(), &cells, &factors)?;

    let mut w = BufWriter::new(File::create(dir.join("likelihood.csv"))?);
    writeln!(w, "iteration,log_likelihood")?;
    for (i, ll) in out.log_likelihoods.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, ll)?;
    }
    w.flush()?;

    save_point_estimate(dir.join("point_estimate.bin"), out)?;
    Ok(())
}

/// Read an embedding written as `embedding.csv` (rows = cells) back into a
/// factors x cells matrix.
pub fn read_embedding<T: Real>(path: impl AsRef<Path>) -> Result<(DMatrix<T>, Vec<String>)> {
    let (m, row_labels, _) = read_labeled_matrix::<T>(path)?;
    Ok((m.transpose(), row_labels))
}

// ---------------------------------------------------------------------------
// SVG scatter
// ---------------------------------------------------------------------------

const SVG_PALETTE: [&str; 8] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
];

/// Minimal SVG scatter of the first two rows of `points` (one column per
/// sample), colored by label when given.
pub fn write_svg_scatter<T: Real>(
    path: impl AsRef<Path>,
    points: &DMatrix<T>,
    labels: Option<&[usize]>,
    title: &str,
) -> Result<()> {
    if points.nrows() < 2 {
        return Err(Error::dim("svg scatter needs >= 2 dimensions", 2, points.nrows()));
    }
    let n = points.ncols();
    let xs: Vec<f64> = (0..n).map(|j| points[(0, j)].to_f64().unwrap_or(0.0)).collect();
    let ys: Vec<f64> = (0..n).map(|j| points[(1, j)].to_f64().unwrap_or(0.0)).collect();
    let (w, h, pad) = (640.0, 480.0, 40.0);
    let min_max = |v: &[f64]| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &x in v {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if lo == hi {
            (lo - 1.0, hi + 1.0)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = min_max(&xs);
    let (y0, y1) = min_max(&ys);
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut out = BufWriter::new(File::create(path.as_ref())?);
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    )?;
    writeln!(out, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>")?;
    writeln!(
        out,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>",
        w / 2.0
    )?;
    writeln!(
        out,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#aaa\"/>",
        h - pad,
        w - pad,
        h - pad
    )?;
    writeln!(
        out,
        "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"#aaa\"/>",
        h - pad
    )?;
    for j in 0..n {
        let color = match labels {
            Some(ls) => SVG_PALETTE[ls[j] % SVG_PALETTE.len()],
            None => SVG_PALETTE[0],
        };
        writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.7\"/>",
            sx(xs[j]),
            sy(ys[j])
        )?;
    }
    writeln!(out, "</svg>")?;
    out.flush()?;
    Ok(())
}
