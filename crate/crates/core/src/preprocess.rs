//! Count-matrix input, quality filtering, normalization, gene selection and
//! the train/test split.
//!
//! Statistics that feed the model (size-factor median, excluded genes,
//! gene dispersions, library-size moments) are fitted on training cells
//! only and then applied to test cells.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ndgrad::Matrix;
use crate::seeding::{stream_rng, Stream};

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("invalid count matrix: {0}")]
    Invalid(String),
    #[error("nothing left after filtering: {0}")]
    Empty(String),
    #[error("split fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
    #[error("cell {0} has no counts outside the excluded genes")]
    ZeroRetained(String),
    #[error("library-size statistics undefined: {0}")]
    Library(String),
    #[error("number of selected genes must be at least 1")]
    BadK,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Sparse `cells × genes` matrix of non-negative integer counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    cell_ids: Vec<String>,
    gene_ids: Vec<String>,
    /// `(cell, gene, count)`, sorted, unique, counts > 0.
    entries: Vec<(usize, usize, u64)>,
}

impl CountMatrix {
    /// Validates and sorts `entries`. Zero counts are dropped.
    pub fn new(
        cell_ids: Vec<String>,
        gene_ids: Vec<String>,
        mut entries: Vec<(usize, usize, u64)>,
    ) -> Result<Self, PreprocessError> {
        let (nc, ng) = (cell_ids.len(), gene_ids.len());
        if let Some(e) = entries.iter().find(|e| e.0 >= nc || e.1 >= ng) {
            return Err(PreprocessError::Invalid(format!(
                "entry ({}, {}) outside {nc} × {ng}",
                e.0, e.1
            )));
        }
        entries.retain(|e| e.2 > 0);
        entries.sort_unstable();
        if let Some(w) = entries.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(PreprocessError::Invalid(format!(
                "duplicate entry for cell {} gene {}",
                cell_ids[w[0].0], gene_ids[w[0].1]
            )));
        }
        for (kind, ids) in [("cell", &cell_ids), ("gene", &gene_ids)] {
            let unique: BTreeSet<&String> = ids.iter().collect();
            if unique.len() != ids.len() {
                return Err(PreprocessError::Invalid(format!("duplicate {kind} id")));
            }
        }
        Ok(Self {
            cell_ids,
            gene_ids,
            entries,
        })
    }

    /// From dense rows of counts.
    pub fn from_dense(cell_ids: Vec<String>, gene_ids: Vec<String>, rows: &[Vec<u64>]) -> Result<Self, PreprocessError> {
        if rows.len() != cell_ids.len() || rows.iter().any(|r| r.len() != gene_ids.len()) {
            return Err(PreprocessError::Invalid("dense rows do not match the ids".into()));
        }
        let entries = rows
            .iter()
            .enumerate()
            .flat_map(|(c, row)| row.iter().enumerate().map(move |(g, &v)| (c, g, v)))
            .collect();
        Self::new(cell_ids, gene_ids, entries)
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn entries(&self) -> &[(usize, usize, u64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Matrix {
        let mut data = vec![0.0; self.n_cells() * self.n_genes()];
        for &(c, g, v) in &self.entries {
            data[c * self.n_genes() + g] = v as f64;
        }
        Matrix::new([self.n_cells(), self.n_genes()], data).expect("consistent dims")
    }

    pub fn cell_totals(&self) -> Vec<u64> {
        let mut out = vec![0; self.n_cells()];
        for &(c, _, v) in &self.entries {
            out[c] += v;
        }
        out
    }

    /// Number of cells in which each gene is nonzero.
    pub fn gene_cell_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_genes()];
        for &(_, g, _) in &self.entries {
            out[g] += 1;
        }
        out
    }

    /// Keeps the listed cells (in the given order) and genes (in the given
    /// order).
    pub fn subset(&self, cells: &[usize], genes: &[usize]) -> CountMatrix {
        let mut cell_pos = vec![usize::MAX; self.n_cells()];
        for (i, &c) in cells.iter().enumerate() {
            cell_pos[c] = i;
        }
        let mut gene_pos = vec![usize::MAX; self.n_genes()];
        for (j, &g) in genes.iter().enumerate() {
            gene_pos[g] = j;
        }
        let mut entries: Vec<_> = self
            .entries
            .iter()
            .filter(|e| cell_pos[e.0] != usize::MAX && gene_pos[e.1] != usize::MAX)
            .map(|&(c, g, v)| (cell_pos[c], gene_pos[g], v))
            .collect();
        entries.sort_unstable();
        CountMatrix {
            cell_ids: cells.iter().map(|&c| self.cell_ids[c].clone()).collect(),
            gene_ids: genes.iter().map(|&g| self.gene_ids[g].clone()).collect(),
            entries,
        }
    }

    pub fn select_cells(&self, cells: &[usize]) -> CountMatrix {
        self.subset(cells, &(0..self.n_genes()).collect::<Vec<_>>())
    }

    pub fn select_genes(&self, genes: &[usize]) -> CountMatrix {
        self.subset(&(0..self.n_cells()).collect::<Vec<_>>(), genes)
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> PreprocessError {
    PreprocessError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_count(s: &str) -> Option<u64> {
    let t = s.trim();
    t.parse::<u64>().ok().or_else(|| {
        // Accept integral floats such as "3.0" written by other tools.
        let v: f64 = t.parse().ok()?;
        (v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64).then_some(v as u64)
    })
}

/// Reads a dense CSV: header row `<label>,gene1,gene2,...`, then one row per
/// cell with its id followed by integer counts.
pub fn read_dense_csv(path: &Path) -> Result<CountMatrix, PreprocessError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r?,
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let gene_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if gene_ids.is_empty() {
        return Err(parse_err(path, 1, "header lists no genes"));
    }
    let mut cell_ids = Vec::new();
    let mut entries = Vec::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != gene_ids.len() + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", gene_ids.len() + 1, rec.len()),
            ));
        }
        let c = cell_ids.len();
        cell_ids.push(rec[0].trim().to_string());
        for (g, field) in rec.iter().skip(1).enumerate() {
            let v = parse_count(field).ok_or_else(|| {
                parse_err(path, line, format!("'{field}' is not a non-negative integer count"))
            })?;
            entries.push((c, g, v));
        }
    }
    CountMatrix::new(cell_ids, gene_ids, entries)
}

fn read_ids(path: &Path) -> Result<Vec<String>, PreprocessError> {
    let text = std::fs::read_to_string(path)?;
    let ids: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    if ids.is_empty() {
        return Err(parse_err(path, 1, "no ids"));
    }
    Ok(ids)
}

/// Reads the sparse triplet format: optional `%` comment lines, a header
/// `rows cols nnz`, then 1-indexed `row col value` lines. Rows are cells and
/// columns are genes.
pub fn read_triplets(matrix: &Path, genes: &Path, cells: &Path) -> Result<CountMatrix, PreprocessError> {
    let gene_ids = read_ids(genes)?;
    let cell_ids = read_ids(cells)?;
    let text = std::fs::read_to_string(matrix)?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i as u64 + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('%'));
    let (hline, header) = lines.next().ok_or_else(|| parse_err(matrix, 1, "missing header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(matrix, hline, format!("bad header field '{t}'"))))
        .collect::<Result<_, _>>()?;
    let [rows, cols, nnz] = dims[..] else {
        return Err(parse_err(matrix, hline, "header must be 'rows cols nnz'"));
    };
    if rows != cell_ids.len() || cols != gene_ids.len() {
        return Err(parse_err(
            matrix,
            hline,
            format!(
                "header is {rows} × {cols} but there are {} cell ids and {} gene ids",
                cell_ids.len(),
                gene_ids.len()
            ),
        ));
    }
    let mut entries = Vec::with_capacity(nnz);
    for (line, l) in lines {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 3 {
            return Err(parse_err(matrix, line, "expected 'row col value'"));
        }
        let idx = |s: &str, max: usize, what: &str| -> Result<usize, PreprocessError> {
            match s.parse::<usize>() {
                Ok(v) if (1..=max).contains(&v) => Ok(v - 1),
                _ => Err(parse_err(matrix, line, format!("{what} index '{s}' outside 1..={max}"))),
            }
        };
        let r = idx(f[0], rows, "row")?;
        let c = idx(f[1], cols, "column")?;
        let v = parse_count(f[2])
            .ok_or_else(|| parse_err(matrix, line, format!("'{}' is not a non-negative integer count", f[2])))?;
        entries.push((r, c, v));
    }
    if entries.len() != nnz {
        return Err(parse_err(
            matrix,
            hline,
            format!("header declares {nnz} entries, found {}", entries.len()),
        ));
    }
    CountMatrix::new(cell_ids, gene_ids, entries)
}

/// Writes `cell,<gene ids>` then one row per cell. Numbers use the shortest
/// representation that round-trips.
pub fn write_dense_csv(path: &Path, cell_ids: &[String], gene_ids: &[String], m: &Matrix) -> Result<(), PreprocessError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut buf);
        let mut header = vec!["cell".to_string()];
        header.extend(gene_ids.iter().cloned());
        w.write_record(&header)?;
        for (r, id) in cell_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(m.row_slice(r).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    crate::io::write_atomic(path, &buf)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Genes must be nonzero in at least this many cells.
    #[serde(default = "d_min_cells")]
    pub min_cells: usize,
    /// A gene above this fraction of any training cell's total is left out
    /// of size-factor sums.
    #[serde(default = "d_high_fraction")]
    pub high_expr_fraction: f64,
    #[serde(default = "d_bins")]
    pub n_bins: usize,
    #[serde(default = "d_hvg")]
    pub n_hvg: usize,
    #[serde(default = "d_train")]
    pub train_fraction: f64,
    /// Score HVG dispersion on `log1p` values instead of normalized counts.
    #[serde(default)]
    pub hvg_on_log: bool,
}

fn d_min_cells() -> usize {
    10
}
fn d_high_fraction() -> f64 {
    0.05
}
fn d_bins() -> usize {
    20
}
fn d_hvg() -> usize {
    720
}
fn d_train() -> f64 {
    0.8
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_cells: d_min_cells(),
            high_expr_fraction: d_high_fraction(),
            n_bins: d_bins(),
            n_hvg: d_hvg(),
            train_fraction: d_train(),
            hvg_on_log: false,
        }
    }
}

/// Cells and genes dropped by [`quality_filter`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub cells_removed: Vec<String>,
    pub genes_removed: Vec<String>,
}

/// Alternately drops all-zero cells and genes seen in fewer than
/// `min_cells` cells until neither pass removes anything.
pub fn quality_filter(m: &CountMatrix, min_cells: usize) -> Result<(CountMatrix, FilterReport), PreprocessError> {
    let mut cur = m.clone();
    let mut report = FilterReport::default();
    loop {
        let gene_counts = cur.gene_cell_counts();
        let keep_genes: Vec<usize> = (0..cur.n_genes()).filter(|&g| gene_counts[g] >= min_cells).collect();
        let totals = cur.subset(&(0..cur.n_cells()).collect::<Vec<_>>(), &keep_genes).cell_totals();
        let keep_cells: Vec<usize> = (0..cur.n_cells()).filter(|&c| totals[c] > 0).collect();
        if keep_genes.len() == cur.n_genes() && keep_cells.len() == cur.n_cells() {
            break;
        }
        let kept_g: BTreeSet<usize> = keep_genes.iter().copied().collect();
        let kept_c: BTreeSet<usize> = keep_cells.iter().copied().collect();
        report.genes_removed.extend(
            (0..cur.n_genes()).filter(|g| !kept_g.contains(g)).map(|g| cur.gene_ids[g].clone()),
        );
        report.cells_removed.extend(
            (0..cur.n_cells()).filter(|c| !kept_c.contains(c)).map(|c| cur.cell_ids[c].clone()),
        );
        cur = cur.subset(&keep_cells, &keep_genes);
    }
    if cur.n_cells() == 0 || cur.n_genes() == 0 {
        return Err(PreprocessError::Empty(format!(
            "{} cells and {} genes survive quality filtering",
            cur.n_cells(),
            cur.n_genes()
        )));
    }
    Ok((cur, report))
}

/// Random partition of cell indices into `(train, test)`, each sorted.
pub fn split(n_cells: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), PreprocessError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PreprocessError::Fraction(fraction));
    }
    if n_cells < 2 {
        return Err(PreprocessError::Invalid(format!("cannot split {n_cells} cells")));
    }
    let mut order: Vec<usize> = (0..n_cells).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Preprocess));
    let n_train = ((fraction * n_cells as f64).round() as usize).clamp(1, n_cells - 1);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Size-factor model fitted on training cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeFactorModel {
    /// Genes left out of the factor sums.
    pub excluded: Vec<usize>,
    /// Median retained-gene total over training cells.
    pub median: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn retained_totals(m: &CountMatrix, excluded: &[usize]) -> Vec<f64> {
    let ex: BTreeSet<usize> = excluded.iter().copied().collect();
    let mut out = vec![0.0; m.n_cells()];
    for &(c, g, v) in m.entries() {
        if !ex.contains(&g) {
            out[c] += v as f64;
        }
    }
    out
}

impl SizeFactorModel {
    pub fn fit(train: &CountMatrix, high_fraction: f64) -> Result<Self, PreprocessError> {
        let totals = train.cell_totals();
        let mut excluded = BTreeSet::new();
        for &(c, g, v) in train.entries() {
            if v as f64 > high_fraction * totals[c] as f64 {
                excluded.insert(g);
            }
        }
        let excluded: Vec<usize> = excluded.into_iter().collect();
        let sums = retained_totals(train, &excluded);
        if let Some(c) = sums.iter().position(|&s| s == 0.0) {
            return Err(PreprocessError::ZeroRetained(train.cell_ids[c].clone()));
        }
        Ok(Self {
            median: median(&sums),
            excluded,
        })
    }

    pub fn factors(&self, m: &CountMatrix) -> Result<Vec<f64>, PreprocessError> {
        let sums = retained_totals(m, &self.excluded);
        match sums.iter().position(|&s| s == 0.0) {
            Some(c) => Err(PreprocessError::ZeroRetained(m.cell_ids[c].clone())),
            None => Ok(sums.iter().map(|s| s / self.median).collect()),
        }
    }

    /// Dense matrix with each cell's row divided by its factor.
    pub fn apply(&self, m: &CountMatrix) -> Result<(Matrix, Vec<f64>), PreprocessError> {
        let f = self.factors(m)?;
        let dense = m.to_dense();
        Ok((Matrix::from_fn(dense.shape(), |r, c| dense.get(r, c) / f[r]), f))
    }
}

/// Fits size factors on `m` itself and normalizes it.
pub fn size_normalize(m: &CountMatrix, high_fraction: f64) -> Result<(Matrix, Vec<f64>), PreprocessError> {
    SizeFactorModel::fit(m, high_fraction)?.apply(m)
}

/// Elementwise `ln(1 + x)`.
pub fn log_transform(m: &Matrix) -> Result<Matrix, PreprocessError> {
    if let Some(v) = m.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
        return Err(PreprocessError::Invalid(format!("log transform of {v}")));
    }
    Ok(m.map(f64::ln_1p))
}

/// Per-gene ranking statistics from highly-variable-gene selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneScore {
    pub gene: String,
    pub mean: f64,
    pub dispersion: f64,
    pub bin: usize,
    /// Dispersion z-scored within its bin; `None` for zero-dispersion genes.
    pub z: Option<f64>,
}

/// Scores every gene of the normalized (pre-log) matrix and returns the
/// indices of the top `k` in rank order, plus all scores.
///
/// Dispersion is `variance / mean`. Genes are binned into `n_bins`
/// equal-width bins of `ln(1 + mean)`, and dispersions are z-scored within
/// each bin (a bin whose dispersions do not vary scores 0). Genes with zero
/// dispersion rank after all others. Ties are broken by gene id.
pub fn select_hvg(
    normalized: &Matrix,
    gene_ids: &[String],
    k: usize,
    n_bins: usize,
) -> Result<(Vec<usize>, Vec<GeneScore>), PreprocessError> {
    if k == 0 || n_bins == 0 {
        return Err(PreprocessError::BadK);
    }
    let [n, g] = normalized.shape();
    if gene_ids.len() != g || n < 2 {
        return Err(PreprocessError::Invalid("gene selection needs ≥ 2 cells and one id per gene".into()));
    }
    let mut means = vec![0.0; g];
    for r in 0..n {
        for (m, v) in means.iter_mut().zip(normalized.row_slice(r)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut vars = vec![0.0; g];
    for r in 0..n {
        for ((s, v), m) in vars.iter_mut().zip(normalized.row_slice(r)).zip(&means) {
            *s += (v - m) * (v - m);
        }
    }
    vars.iter_mut().for_each(|s| *s /= (n - 1) as f64);
    let disp: Vec<f64> = (0..g).map(|j| if means[j] > 0.0 { vars[j] / means[j] } else { 0.0 }).collect();

    let loc: Vec<f64> = means.iter().map(|m| m.ln_1p()).collect();
    let lo = loc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = loc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let bin_of = |x: f64| {
        if width > 0.0 {
            (((x - lo) / width).floor() as usize).min(n_bins - 1)
        } else {
            0
        }
    };
    let bins: Vec<usize> = loc.iter().map(|&x| bin_of(x)).collect();
    let mut stats = vec![(0usize, 0.0f64, 0.0f64); n_bins];
    for j in (0..g).filter(|&j| disp[j] > 0.0) {
        let s = &mut stats[bins[j]];
        s.0 += 1;
        s.1 += disp[j];
    }
    for j in (0..g).filter(|&j| disp[j] > 0.0) {
        let s = &mut stats[bins[j]];
        let mean = s.1 / s.0 as f64;
        s.2 += (disp[j] - mean).powi(2);
    }
    let scores: Vec<GeneScore> = (0..g)
        .map(|j| {
            let (cnt, sum, ss) = stats[bins[j]];
            let z = (disp[j] > 0.0).then(|| {
                let mean = sum / cnt as f64;
                let sd = if cnt > 1 { (ss / (cnt - 1) as f64).sqrt() } else { 0.0 };
                if sd > 0.0 {
                    (disp[j] - mean) / sd
                } else {
                    0.0
                }
            });
            GeneScore {
                gene: gene_ids[j].clone(),
                mean: means[j],
                dispersion: disp[j],
                bin: bins[j],
                z,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        let key = |j: usize| scores[j].z.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| gene_ids[a].cmp(&gene_ids[b]))
    });
    if k > g {
        log::warn!("requested {k} genes but only {g} are available; keeping all");
    }
    order.truncate(k.min(g));
    Ok((order, scores))
}

/// Mean and standard deviation of `ln(total)` over cells.
pub fn library_stats(totals: &[u64]) -> Result<(f64, f64), PreprocessError> {
    if totals.len() < 2 {
        return Err(PreprocessError::Library(format!("{} cells", totals.len())));
    }
    if totals.contains(&0) {
        return Err(PreprocessError::Library("a cell has zero total counts".into()));
    }
    let logs: Vec<f64> = totals.iter().map(|&t| (t as f64).ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let sd = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(PreprocessError::Library("all cells have the same total".into()));
    }
    Ok((mean, sd))
}

/// One side of the split, restricted to the selected genes.
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub cell_ids: Vec<String>,
    /// `log1p` of size-normalized expression.
    pub input: Matrix,
    /// Raw counts.
    pub counts: Matrix,
    pub size_factors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub seed: u64,
    pub config: PreprocessConfig,
    pub input_cells: usize,
    pub input_genes: usize,
    pub filter: FilterReport,
    pub train_cells: Vec<String>,
    pub test_cells: Vec<String>,
    pub size_factor_median: f64,
    pub excluded_genes: Vec<String>,
    pub selected_genes: Vec<GeneScore>,
    /// Cells with no counts over the selected genes, dropped before modeling.
    pub cells_without_selected_counts: Vec<String>,
    pub mu_g: f64,
    pub sigma_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub genes: Vec<String>,
    pub train: Part,
    pub test: Part,
    pub report: PreprocessReport,
}

/// The full preprocessing chain.
pub fn preprocess(m: &CountMatrix, cfg: &PreprocessConfig, seed: u64) -> Result<Preprocessed, PreprocessError> {
    let (filtered, filter) = quality_filter(m, cfg.min_cells)?;
    let (train_idx, test_idx) = split(filtered.n_cells(), cfg.train_fraction, seed)?;
    let train = filtered.select_cells(&train_idx);
    let test = filtered.select_cells(&test_idx);

    let sf = SizeFactorModel::fit(&train, cfg.high_expr_fraction)?;
    let (train_norm, train_f) = sf.apply(&train)?;
    let (test_norm, test_f) = sf.apply(&test)?;
    let (selected, scores) = if cfg.hvg_on_log {
        select_hvg(&log_transform(&train_norm)?, train.gene_ids(), cfg.n_hvg, cfg.n_bins)?
    } else {
        select_hvg(&train_norm, train.gene_ids(), cfg.n_hvg, cfg.n_bins)?
    };

    let mut dropped = Vec::new();
    let mut make_part = |cm: &CountMatrix, norm: &Matrix, f: &[f64]| -> Result<Part, PreprocessError> {
        let sub = cm.select_genes(&selected);
        let totals = sub.cell_totals();
        let keep: Vec<usize> = (0..sub.n_cells()).filter(|&c| totals[c] > 0).collect();
        dropped.extend((0..sub.n_cells()).filter(|&c| totals[c] == 0).map(|c| sub.cell_ids[c].clone()));
        let counts = sub.to_dense().select_rows(&keep);
        let norm_sel = Matrix::from_fn([keep.len(), selected.len()], |r, c| norm.get(keep[r], selected[c]));
        Ok(Part {
            cell_ids: keep.iter().map(|&c| sub.cell_ids[c].clone()).collect(),
            input: log_transform(&norm_sel)?,
            counts,
            size_factors: keep.iter().map(|&c| f[c]).collect(),
        })
    };
    let train_part = make_part(&train, &train_norm, &train_f)?;
    let test_part = make_part(&test, &test_norm, &test_f)?;
    if !dropped.is_empty() {
        log::warn!("{} cells have no counts over the selected genes and were dropped", dropped.len());
    }
    let train_totals: Vec<u64> = (0..train_part.counts.rows())
        .map(|r| train_part.counts.row_slice(r).iter().sum::<f64>() as u64)
        .collect();
    let (mu_g, sigma_g) = library_stats(&train_totals)?;

    let genes: Vec<String> = selected.iter().map(|&j| train.gene_ids()[j].clone()).collect();
    let report = PreprocessReport {
        seed,
        config: cfg.clone(),
        input_cells: m.n_cells(),
        input_genes: m.n_genes(),
        filter,
        train_cells: train_part.cell_ids.clone(),
        test_cells: test_part.cell_ids.clone(),
        size_factor_median: sf.median,
        excluded_genes: sf.excluded.iter().map(|&g| train.gene_ids()[g].clone()).collect(),
        selected_genes: selected.iter().map(|&j| scores[j].clone()).collect(),
        cells_without_selected_counts: dropped,
        mu_g,
        sigma_g,
    };
    Ok(Preprocessed {
        genes,
        train: train_part,
        test: test_part,
        report,
    })
}
