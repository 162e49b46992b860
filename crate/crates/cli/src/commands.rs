//! Subcommand bodies. Each reads its inputs, writes into `out`, and finishes
//! with a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use sparseprior_core::evalcluster::{self, KmeansConfig};
use sparseprior_core::model::ScraeModel;
use sparseprior_core::ndgrad::Matrix;
use sparseprior_core::neuralnet::Checkpoint;
use sparseprior_core::preprocess::{self, PreprocessConfig};
use sparseprior_core::seeding::{stream_rng, Stream};
use sparseprior_core::trainer::{Batch, RunConfig, TrainError, Trainer};
use sparseprior_core::{io::write_atomic, model::LibraryPrior};

use crate::manifest::RunManifest;
use crate::synth::SynthSpec;
use crate::table::{align_labels, read_labels, read_table, write_labels, Table};
use crate::{CliError, Format};

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn to_value(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

pub fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut spec: SynthSpec = match config {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let inputs: Vec<&Path> = config.into_iter().collect();
    let manifest = RunManifest::begin("synth", spec.seed, to_value(&spec), &inputs)?;
    let data = spec.sample().map_err(invalid)?;
    fs::create_dir_all(out)?;
    let dense = Matrix::from_fn([data.counts.len(), spec.genes], |r, c| data.counts[r][c] as f64);
    preprocess::write_dense_csv(&out.join("counts.csv"), &data.cell_ids, &data.gene_ids, &dense).map_err(invalid)?;
    let rows: Vec<(String, String)> = data
        .cell_ids
        .iter()
        .zip(&data.labels)
        .map(|(c, l)| (c.clone(), format!("cluster{l}")))
        .collect();
    write_labels(&out.join("labels.csv"), &rows)?;
    manifest.finish(out, &["counts.csv", "labels.csv"])?;
    Ok(())
}

pub fn preprocess(
    input: &Path,
    format: Format,
    genes: Option<&Path>,
    cells: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let cfg: PreprocessConfig = match config {
        Some(p) => read_json(p)?,
        None => PreprocessConfig::default(),
    };
    let mut inputs = vec![input];
    let matrix = match format {
        Format::Csv => {
            inputs.extend(config);
            let manifest = RunManifest::begin("preprocess", seed, to_value(&cfg), &inputs)?;
            (preprocess::read_dense_csv(input), manifest)
        }
        Format::Triplet => {
            let (Some(g), Some(c)) = (genes, cells) else {
                return Err(CliError::Validation("--format triplet needs --genes and --cells".into()));
            };
            inputs.extend([g, c]);
            inputs.extend(config);
            let manifest = RunManifest::begin("preprocess", seed, to_value(&cfg), &inputs)?;
            (preprocess::read_triplets(input, g, c), manifest)
        }
    };
    let (m, manifest) = (matrix.0.map_err(invalid)?, matrix.1);
    let done = preprocess::preprocess(&m, &cfg, seed).map_err(invalid)?;
    fs::create_dir_all(out)?;
    for (name, part) in [("train", &done.train), ("test", &done.test)] {
        preprocess::write_dense_csv(&out.join(format!("{name}_input.csv")), &part.cell_ids, &done.genes, &part.input)
            .map_err(invalid)?;
        preprocess::write_dense_csv(&out.join(format!("{name}_counts.csv")), &part.cell_ids, &done.genes, &part.counts)
            .map_err(invalid)?;
    }
    write_json(&out.join("report.json"), &done.report)?;
    manifest.finish(
        out,
        &["train_input.csv", "train_counts.csv", "test_input.csv", "test_counts.csv", "report.json"],
    )?;
    Ok(())
}

#[derive(Deserialize)]
struct LibraryFields {
    mu_g: f64,
    sigma_g: f64,
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { step, report } => CliError::Diverged(format!("step {step}: {report}")),
        other => invalid(other),
    }
}

pub fn train(config: Option<&Path>, data: &Path, seed: Option<u64>, resume: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let input_path = data.join("train_input.csv");
    let counts_path = data.join("train_counts.csv");
    let report_path = data.join("report.json");
    let mut inputs = vec![input_path.as_path(), counts_path.as_path(), report_path.as_path()];
    inputs.extend(config);
    inputs.extend(resume);

    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(invalid)?;
            let t = Trainer::resume(&ck).map_err(train_error)?;
            if config.is_some() || seed.is_some() {
                log::warn!("resuming: --config and --seed are ignored in favour of the checkpoint");
            }
            t
        }
        None => {
            let mut cfg: RunConfig = match config {
                Some(p) => read_json(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(train_error)?;
            let lib: LibraryFields = read_json(&report_path)?;
            let library = LibraryPrior {
                mu_g: lib.mu_g,
                sigma_g: lib.sigma_g,
            };
            let genes = read_header(&input_path)?.len();
            let mut rng = stream_rng(cfg.seed, Stream::Init);
            let model = ScraeModel::init(genes, &cfg.model, library, &mut rng).map_err(invalid)?;
            Trainer::new(model, cfg).map_err(train_error)?
        }
    };
    let manifest = RunManifest::begin("train", trainer.config.seed, to_value(&trainer.config), &inputs)?;

    let input = read_table(&input_path)?;
    let counts = read_table(&counts_path)?;
    if input.row_ids != counts.row_ids || input.columns != counts.columns {
        return Err(CliError::Validation("train input and counts disagree on cells or genes".into()));
    }
    let genes = input.columns.clone();
    let batch = Batch::new(input.values, counts.values).map_err(train_error)?;

    fs::create_dir_all(out)?;
    let log_path = out.join("losses.jsonl");
    let mut log = fs::File::create(&log_path)?;
    let every = trainer.config.checkpoint_every;
    let mut checkpoints = Vec::new();
    let mut sink_error: Option<CliError> = None;
    let result = loop {
        if trainer.steps_done() >= trainer.config.steps {
            break Ok(());
        }
        match trainer.step(&batch) {
            Ok(report) => {
                let step = report.step;
                if step % trainer.config.report_every == 0 || step == trainer.config.steps {
                    writeln!(log, "{}", report.to_json_line())?;
                }
                if every > 0 && step % every == 0 && step < trainer.config.steps {
                    let name = format!("state-{step:08}.ckpt");
                    if let Err(e) = trainer.checkpoint().map_err(train_error).and_then(|ck| ck.save(&out.join(&name)).map_err(invalid)) {
                        sink_error = Some(e);
                        break Ok(());
                    }
                    checkpoints.push(name);
                }
            }
            Err(e) => break Err(e),
        }
    };
    if let Some(e) = sink_error {
        return Err(e);
    }
    if let Err(e) = result {
        if let TrainError::Diverged { report, .. } = &e {
            writeln!(log, "{report}")?;
        }
        log.sync_all()?;
        return Err(train_error(e));
    }
    log.sync_all()?;
    drop(log);
    trainer.model.save(&out.join("model.ckpt"), &genes).map_err(invalid)?;
    trainer.checkpoint().map_err(train_error)?.save(&out.join("state.ckpt")).map_err(invalid)?;
    let mut manifest = manifest;
    manifest.checkpoints = checkpoints.clone();
    manifest.checkpoints.push("state.ckpt".into());
    let mut outputs = vec!["losses.jsonl", "model.ckpt", "model.ckpt.json", "state.ckpt"];
    outputs.extend(checkpoints.iter().map(String::as_str));
    manifest.finish(out, &outputs)?;
    Ok(())
}

fn read_header(path: &Path) -> Result<Vec<String>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let h = rdr.headers().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(h.iter().skip(1).map(str::to_owned).collect())
}

fn write_embeddings(path: &Path, cells: &[String], z: &Matrix) -> Result<(), CliError> {
    let mut s = String::from("cell_id");
    for k in 1..=z.cols() {
        s.push_str(&format!(",z{k}"));
    }
    s.push('\n');
    for (r, c) in cells.iter().enumerate() {
        s.push_str(c);
        for v in z.row_slice(r) {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

/// Reorders the matrix columns to `genes`, or names what does not match.
fn align_genes(t: &Table, genes: &[String]) -> Result<Matrix, CliError> {
    let pos: BTreeMap<&str, usize> = t.columns.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let missing: Vec<&str> = genes.iter().filter(|g| !pos.contains_key(g.as_str())).map(String::as_str).collect();
    let expected: std::collections::BTreeSet<&str> = genes.iter().map(String::as_str).collect();
    let extra: Vec<&str> = t.columns.iter().filter(|g| !expected.contains(g.as_str())).map(String::as_str).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(CliError::Validation(format!(
            "gene list does not match the checkpoint; missing: [{}]; unexpected: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    Ok(Matrix::from_fn([t.values.rows(), genes.len()], |r, c| t.values.get(r, pos[genes[c].as_str()])))
}

pub fn embed(checkpoint: &Path, matrix: &Path, out: &Path) -> Result<(), CliError> {
    let sidecar = sparseprior_core::model::sidecar_path(checkpoint);
    let manifest = RunManifest::begin("embed", 0, serde_json::json!({}), &[checkpoint, sidecar.as_path(), matrix])?;
    let (model, side) = ScraeModel::load(checkpoint).map_err(invalid)?;
    let t = read_table(matrix)?;
    let x = align_genes(&t, &side.genes)?;
    let z = model.embed(&x).map_err(invalid)?;
    fs::create_dir_all(out)?;
    write_embeddings(&out.join("embeddings.csv"), &t.row_ids, &z)?;
    manifest.finish(out, &["embeddings.csv"])?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub nmi: f64,
    pub ami: f64,
    pub homogeneity: f64,
    pub completeness: f64,
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub cells: usize,
    pub fit_on: String,
}

fn nearest_centroid(z: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..z.rows())
        .map(|r| {
            let p = z.row_slice(r);
            (0..centroids.rows())
                .map(|k| {
                    let d: f64 = p.iter().zip(centroids.row_slice(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (k, d)
                })
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0
        })
        .collect()
}

pub fn evaluate(
    embeddings: &Path,
    labels: &Path,
    k: Option<usize>,
    seed: u64,
    fit_embeddings: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let mut inputs = vec![embeddings, labels];
    inputs.extend(fit_embeddings);
    let cfg = KmeansConfig::default();
    let manifest = RunManifest::begin(
        "evaluate",
        seed,
        serde_json::json!({ "k": k, "kmeans": cfg, "fit_embeddings": fit_embeddings.map(|p| p.display().to_string()) }),
        &inputs,
    )?;
    let emb = read_table(embeddings)?;
    let lab = read_labels(labels)?;
    let (truth, names) = align_labels(&emb.row_ids, &lab)?;
    let k = k.unwrap_or(names.len());
    let (pred, fit_on) = match fit_embeddings {
        None => (evalcluster::kmeans(&emb.values, k, seed, &cfg).map_err(invalid)?.labels, "evaluated".to_string()),
        Some(p) => {
            let fit = read_table(p)?;
            if fit.columns.len() != emb.columns.len() {
                return Err(CliError::Validation("fit embeddings have a different width".into()));
            }
            let km = evalcluster::kmeans(&fit.values, k, seed, &cfg).map_err(invalid)?;
            (nearest_centroid(&emb.values, &km.centroids), p.display().to_string())
        }
    };
    let s = evalcluster::score_all(&truth, &pred).map_err(invalid)?;
    let metrics = Metrics {
        nmi: s.nmi,
        ami: s.ami,
        homogeneity: s.homogeneity,
        completeness: s.completeness,
        k,
        seed,
        restarts: cfg.restarts,
        cells: truth.len(),
        fit_on,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    manifest.finish(out, &["metrics.json"])?;
    Ok(())
}

pub fn plot(embeddings: &Path, labels: &Path, pca: bool, out: &Path) -> Result<(), CliError> {
    let manifest = RunManifest::begin("plot", 0, serde_json::json!({ "pca": pca }), &[embeddings, labels])?;
    let emb = read_table(embeddings)?;
    let lab = read_labels(labels)?;
    let (idx, names) = align_labels(&emb.row_ids, &lab)?;
    let (xy, axes) = if pca {
        let p = evalcluster::pca_project(&emb.values, 2).map_err(invalid)?;
        (p.projected, ["PC1", "PC2"])
    } else if emb.columns.len() == 2 {
        (emb.values, ["z1", "z2"])
    } else {
        return Err(CliError::Validation(format!(
            "embeddings have {} dimensions; pass --pca to plot the first two principal components",
            emb.columns.len()
        )));
    };
    let points: Vec<[f64; 2]> = (0..xy.rows()).map(|r| [xy.get(r, 0), xy.get(r, 1)]).collect();
    let svg = crate::plot::scatter_svg(&points, &idx, &names, axes);
    fs::create_dir_all(out)?;
    write_atomic(&out.join("plot.svg"), svg.as_bytes())?;
    manifest.finish(out, &["plot.svg"])?;
    Ok(())
}
