//! Episode execution, aggregation and on-disk artifacts.
//!
//! Layout of one run directory (`<out>/run-NNNN`, never reused):
//!
//! ```text
//! config.txt           resolved configuration
//! backbone.ckpt        extractor used by every row
//! backbone.json        pretraining summary
//! <row>/episodes.jsonl one record per episode, in episode order
//! <row>/summary.json   aggregates, curves and the embedded config
//! <row>/curves_<row>.csv
//! <row>/logits.csv     final query logits of every episode
//! <row>/dcm_state.csv  per-epoch calibration state of episode 0
//! <row>/augmentation.csv per-epoch chain log of episode 0
//! ablation.json | shots.json  paired comparisons between rows
//! ```
//!
//! Nothing written depends on wall-clock time, the output path or the
//! number of workers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, RunConfig};
use super::stats::{self, Aggregate};
use crate::backbone::{self, MlpParams, PretrainConfig};
use crate::dcm;
use crate::episodes::{self, Dataset, Episode, Shots};
use crate::error::{Error, Result};
use crate::finetune::{self, Ablation, ClassReference, EpochTrace, FinetuneConfig, FinetuneOutcome};
use crate::linalg::Matrix;
use crate::seed::{self, tag};

pub const ARTIFACT_VERSION: &str = concat!("fewshot-run/", env!("CARGO_PKG_VERSION"));

/// Data and backbone shared by every row of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub base: Dataset,
    pub novel: Dataset,
    pub backbone: MlpParams,
    pub pretrain: Option<PretrainSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &config.data {
        DataSource::Synthetic(s) => {
            let spec = config.synthetic_spec(s);
            let data_seed = seed::derive(config.seed, tag::NOVEL_DATA);
            let base = episodes::generate_base_dataset(&spec, s.base_samples, data_seed)?;
            let novel = episodes::generate_novel_dataset(&spec, s.novel_samples, data_seed)?;
            Ok((base.dataset, novel.dataset))
        }
        DataSource::Idx(s) => {
            for p in [&s.images, &s.labels] {
                if !p.is_file() {
                    return Err(Error::Config(format!("IDX file {} does not exist", p.display())));
                }
            }
            let all = episodes::load_idx_dataset(&s.images, &s.labels)?;
            if let Some(&l) = s.base_labels.iter().chain(&s.novel_labels).find(|&&l| l >= all.num_classes) {
                return Err(Error::Config(format!(
                    "label {l} not present in a {}-class IDX file",
                    all.num_classes
                )));
            }
            Ok((all.select_classes(&s.base_labels)?, all.select_classes(&s.novel_labels)?))
        }
    }
}

fn backbone_dims(config: &RunConfig, input_dim: usize) -> Vec<usize> {
    let mut dims = vec![input_dim];
    dims.extend(&config.backbone.hidden);
    dims.push(config.backbone.feature_dim);
    dims
}

/// Loads or generates the data and loads or pretrains the backbone.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    if let Some(p) = &config.backbone.checkpoint {
        if !p.is_file() {
            return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
        }
    }
    let (base, novel) = load_data(config)?;
    let (backbone, pretrain) = match &config.backbone.checkpoint {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let net = MlpParams::from_checkpoint(&text)?;
            if net.input_dim() != novel.dim {
                return Err(Error::Config(format!(
                    "checkpoint expects {}-dimensional inputs, data has {}",
                    net.input_dim(),
                    novel.dim
                )));
            }
            (net, None)
        }
        None => {
            let init = MlpParams::new(&backbone_dims(config, base.dim), config.seed)?;
            let cfg = PretrainConfig {
                seed: config.seed,
                ..config.backbone.pretrain.clone()
            };
            let out = backbone::pretrain(&init, &base, &cfg)?;
            let summary = PretrainSummary {
                train_accuracy: out.train_accuracy,
                epoch_losses: out.epoch_losses,
            };
            (out.params, Some(summary))
        }
    };
    Ok(Prepared {
        config: config.clone(),
        base,
        novel,
        backbone,
        pretrain,
    })
}

pub fn episode_seed(run_seed: u64, episode: usize) -> u64 {
    seed::derive(seed::derive(run_seed, tag::EPISODE), episode as u64)
}

pub fn finetune_seed(run_seed: u64, episode: usize) -> u64 {
    seed::derive(seed::derive(run_seed, tag::FINETUNE), episode as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub episode_seed: u64,
    pub finetune_seed: u64,
    pub fingerprint: String,
    pub classes: Vec<usize>,
    pub shots_per_class: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub query_accuracy: Option<f64>,
    #[serde(default)]
    pub query_loss: Option<f64>,
    #[serde(default)]
    pub temperature: Option<f64>,
    /// Within-class variance of the final query features the classifier
    /// scores (sum over classes of the covariance trace).
    #[serde(default)]
    pub within_class_variance: Option<f64>,
    #[serde(default)]
    pub traces: Vec<EpochTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub episode: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub support_loss: f64,
    pub support_acc: f64,
    pub query_loss: Option<f64>,
    pub query_acc: Option<f64>,
    pub mean_chain_length: f64,
    pub bias_norm: Option<f64>,
}

/// Summary of one row (one flag combination) of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub row: String,
    pub shots: Shots,
    pub config: RunConfig,
    pub episodes_requested: usize,
    pub episodes_completed: usize,
    pub excluded: Vec<Excluded>,
    pub mean_accuracy: f64,
    /// `None` when fewer than two episodes completed.
    pub ci95: Option<f64>,
    pub mean_query_loss: f64,
    pub curves: Vec<CurvePoint>,
}

/// Per-row extras kept in memory for the text dumps.
#[derive(Debug, Clone, Default)]
pub struct RowDumps {
    /// `(episode, logits, labels)` per completed episode.
    pub logits: Vec<(usize, Matrix, Vec<usize>)>,
    /// Episode 0's calibration history and augmentation log.
    pub first_episode: Option<FinetuneOutcome>,
}

#[derive(Debug, Clone)]
pub struct RowOutput {
    pub flags: Ablation,
    pub records: Vec<EpisodeRecord>,
    pub summary: RunRecord,
    pub dumps: RowDumps,
}

impl RowOutput {
    pub fn name(&self) -> String {
        self.flags.name()
    }

    /// Query accuracy per episode, `None` for excluded episodes.
    pub fn accuracies(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.query_accuracy).collect()
    }
}

fn base_record(index: usize, run_seed: u64, ep: &Episode) -> EpisodeRecord {
    EpisodeRecord {
        episode: index,
        episode_seed: episode_seed(run_seed, index),
        finetune_seed: finetune_seed(run_seed, index),
        fingerprint: format!("{:016x}", ep.fingerprint()),
        classes: ep.classes.clone(),
        shots_per_class: ep.shots_per_class.clone(),
        support_indices: ep.support_indices.clone(),
        query_indices: ep.query_indices.clone(),
        error: None,
        query_accuracy: None,
        query_loss: None,
        temperature: None,
        within_class_variance: None,
        traces: Vec::new(),
    }
}

fn reference_for(prepared: &Prepared, ep: &Episode) -> Result<Option<ClassReference>> {
    if !prepared.config.trace_bias || !matches!(prepared.config.data, DataSource::Synthetic(_)) {
        return Ok(None);
    }
    let pool = prepared.novel.select_classes(&ep.classes)?;
    Ok(Some(ClassReference {
        inputs: pool.inputs(),
        labels: pool.labels(),
    }))
}

type EpisodeResults = Vec<(EpisodeRecord, Option<FinetuneOutcome>)>;

fn run_episode(prepared: &Prepared, rows: &[Ablation], shots: Shots, index: usize) -> Result<EpisodeResults> {
    let cfg = &prepared.config;
    let ep = episodes::sample_episode(
        &prepared.novel,
        cfg.ways,
        shots,
        cfg.queries,
        episode_seed(cfg.seed, index),
    )?;
    let reference = reference_for(prepared, &ep)?;
    let mut out = Vec::with_capacity(rows.len());
    for &flags in rows {
        let ft = FinetuneConfig {
            flags,
            seed: finetune_seed(cfg.seed, index),
            ..cfg.finetune.clone()
        };
        let mut record = base_record(index, cfg.seed, &ep);
        match finetune::finetune_episode(&ep, &prepared.backbone, &ft, reference.as_ref()) {
            Ok(outcome) => {
                record.query_accuracy = Some(outcome.query_accuracy);
                record.query_loss = Some(outcome.query_loss);
                record.temperature = Some(outcome.temperature);
                record.within_class_variance = Some(finetune::within_class_variance(
                    &outcome.query_features,
                    &ep.query_labels(),
                    ep.num_ways,
                )?);
                record.traces = outcome.traces.clone();
                out.push((record, Some(outcome)));
            }
            Err(e) => {
                record.error = Some(e.to_string());
                out.push((record, None));
            }
        }
    }
    Ok(out)
}

fn with_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(job))
}

/// Runs every row on the same episode stream. Episodes are distributed
/// over the worker pool; results come back in episode order.
pub fn run_rows(prepared: &Prepared, rows: &[Ablation], shots: Shots) -> Result<Vec<RowOutput>> {
    let cfg = &prepared.config;
    let per_episode: Vec<Result<EpisodeResults>> = with_pool(cfg.workers, || {
        (0..cfg.episodes)
            .into_par_iter()
            .map(|i| run_episode(prepared, rows, shots, i))
            .collect()
    })?;
    let mut columns: Vec<(Vec<EpisodeRecord>, RowDumps)> =
        rows.iter().map(|_| (Vec::new(), RowDumps::default())).collect();
    for episode in per_episode {
        for (r, (record, outcome)) in episode?.into_iter().enumerate() {
            let (records, dumps) = &mut columns[r];
            if let Some(o) = outcome {
                if record.episode == 0 {
                    dumps.first_episode = Some(o.clone());
                }
                dumps.logits.push((record.episode, o.query_logits, Vec::new()));
            }
            records.push(record);
        }
    }
    let mut out = Vec::with_capacity(rows.len());
    for (&flags, (records, mut dumps)) in rows.iter().zip(columns) {
        for (episode, _, labels) in &mut dumps.logits {
            *labels = query_labels(prepared, &records[*episode]);
        }
        let summary = summarize(cfg, &flags.name(), shots, &records)?;
        out.push(RowOutput {
            flags,
            records,
            summary,
            dumps,
        });
    }
    Ok(out)
}

fn query_labels(prepared: &Prepared, record: &EpisodeRecord) -> Vec<usize> {
    let classes = &record.classes;
    record
        .query_indices
        .iter()
        .map(|&i| {
            let raw = prepared.novel.examples[i].label;
            classes.iter().position(|&c| c == raw).unwrap_or(usize::MAX)
        })
        .collect()
}

/// Aggregates per-episode records into a row summary. This is also what
/// `replay` recomputes.
pub fn summarize(config: &RunConfig, row: &str, shots: Shots, records: &[EpisodeRecord]) -> Result<RunRecord> {
    let done: Vec<&EpisodeRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    if done.is_empty() {
        let first = records.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(Error::Aggregation(format!(
            "row {row}: every episode was excluded (first error: {first})"
        )));
    }
    let acc: Vec<f64> = done
        .iter()
        .map(|r| r.query_accuracy.ok_or_else(|| missing(r.episode, "query_accuracy")))
        .collect::<Result<_>>()?;
    let loss: Vec<f64> = done
        .iter()
        .map(|r| r.query_loss.ok_or_else(|| missing(r.episode, "query_loss")))
        .collect::<Result<_>>()?;
    let ci95 = if acc.len() >= 2 {
        Some(stats::aggregate(&acc)?.ci95)
    } else {
        None
    };
    let mean_accuracy = if acc.len() >= 2 {
        stats::aggregate(&acc)?.mean
    } else {
        acc[0]
    };
    Ok(RunRecord {
        version: ARTIFACT_VERSION.to_string(),
        row: row.to_string(),
        shots,
        config: config.clone(),
        episodes_requested: records.len(),
        episodes_completed: done.len(),
        excluded: records
            .iter()
            .filter_map(|r| {
                r.error.as_ref().map(|e| Excluded {
                    episode: r.episode,
                    error: e.clone(),
                })
            })
            .collect(),
        mean_accuracy,
        ci95,
        mean_query_loss: loss.iter().sum::<f64>() / loss.len() as f64,
        curves: curves(&done),
    })
}

fn missing(episode: usize, field: &str) -> Error {
    Error::Aggregation(format!("episode {episode} has no {field}"))
}

fn curves(done: &[&EpisodeRecord]) -> Vec<CurvePoint> {
    let column = |f: &dyn Fn(&EpochTrace) -> Option<f64>| -> Vec<Option<f64>> {
        let rows: Vec<Vec<Option<f64>>> = done.iter().map(|r| r.traces.iter().map(f).collect()).collect();
        stats::column_means(&rows)
    };
    let support_loss = column(&|t| Some(t.support_loss));
    let support_acc = column(&|t| Some(t.support_acc));
    let query_loss = column(&|t| t.query_loss);
    let query_acc = column(&|t| t.query_acc);
    let chain = column(&|t| Some(t.mean_chain_length));
    let bias = column(&|t| {
        t.bias_norms
            .as_ref()
            .map(|b| b.iter().sum::<f64>() / b.len() as f64)
    });
    (0..support_loss.len())
        .map(|e| CurvePoint {
            epoch: e + 1,
            support_loss: support_loss[e].unwrap_or(f64::NAN),
            support_acc: support_acc[e].unwrap_or(f64::NAN),
            query_loss: query_loss[e],
            query_acc: query_acc[e],
            mean_chain_length: chain[e].unwrap_or(0.0),
            bias_norm: bias[e],
        })
        .collect()
}

/// Paired difference (`to - from`) of query accuracy between two rows over
/// episodes completed by both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub from: String,
    pub to: String,
    pub difference: Option<Aggregate>,
}

pub fn compare(from: &RowOutput, to: &RowOutput) -> Result<Comparison> {
    compare_records(&from.name(), &from.records, &to.name(), &to.records)
}

fn compare_records(from: &str, a: &[EpisodeRecord], to: &str, b: &[EpisodeRecord]) -> Result<Comparison> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| Some((x.query_accuracy?, y.query_accuracy?)))
        .unzip();
    Ok(Comparison {
        from: from.to_string(),
        to: to.to_string(),
        difference: if xs.len() >= 2 {
            Some(stats::paired(&xs, &ys)?)
        } else {
            None
        },
    })
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<RowOutput>,
    /// Consecutive rows, then the full method against `none`.
    pub comparisons: Vec<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ComparisonFile {
    version: String,
    comparisons: Vec<Comparison>,
}

fn ablation_comparisons(rows: &[(String, &[EpisodeRecord])]) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for w in rows.windows(2) {
        out.push(compare_records(&w[0].0, w[0].1, &w[1].0, w[1].1)?);
    }
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        if rows.len() > 2 {
            out.push(compare_records(&first.0, first.1, &last.0, last.1)?);
        }
    }
    Ok(out)
}

/// All rows of the ablation table on one paired episode stream.
pub fn run_ablation_suite(prepared: &Prepared) -> Result<AblationReport> {
    let rows = run_rows(prepared, &Ablation::TABLE, prepared.config.shots)?;
    let named: Vec<(String, &[EpisodeRecord])> = rows.iter().map(|r| (r.name(), r.records.as_slice())).collect();
    let comparisons = ablation_comparisons(&named)?;
    Ok(AblationReport { rows, comparisons })
}

#[derive(Debug, Clone)]
pub struct ShotCell {
    pub shots: usize,
    /// `none`, `B` and the full method, in that order.
    pub rows: Vec<RowOutput>,
    pub gain_over_baseline: Comparison,
    pub gain_over_backbone: Comparison,
}

pub const SHOT_SWEEP_ROWS: [Ablation; 3] = [Ablation::NONE, Ablation::B, Ablation::FULL];

fn shot_comparisons(rows: &[(String, &[EpisodeRecord])]) -> Result<(Comparison, Comparison)> {
    Ok((
        compare_records(&rows[0].0, rows[0].1, &rows[2].0, rows[2].1)?,
        compare_records(&rows[1].0, rows[1].1, &rows[2].0, rows[2].1)?,
    ))
}

/// Fixed-shot runs for every entry of `shot_list`; each cell reuses the
/// same episode seeds.
pub fn run_shot_sweep(prepared: &Prepared, shot_list: &[usize]) -> Result<Vec<ShotCell>> {
    if shot_list.is_empty() {
        return Err(Error::Config("shot list is empty".into()));
    }
    let mut cells = Vec::with_capacity(shot_list.len());
    for &k in shot_list {
        if k == 0 {
            return Err(Error::Config("shot counts must be at least 1".into()));
        }
        let rows = run_rows(prepared, &SHOT_SWEEP_ROWS, Shots::Fixed(k))?;
        let named: Vec<(String, &[EpisodeRecord])> = rows.iter().map(|r| (r.name(), r.records.as_slice())).collect();
        let (gain_over_baseline, gain_over_backbone) = shot_comparisons(&named)?;
        cells.push(ShotCell {
            shots: k,
            rows,
            gain_over_baseline,
            gain_over_backbone,
        });
    }
    Ok(cells)
}

// ---------------------------------------------------------------- output

/// Creates `<out>/run-NNNN` with the first unused number.
pub fn create_run_dir(out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for n in 1..=9999 {
        let dir = out.join(format!("run-{n:04}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    Err(Error::Config(format!("{} has no free run slots", out.display())))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let file = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(file))
}

fn write_text(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    body(&mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_text(path, |w| writeln!(w, "{text}"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Writes the files shared by every row: resolved config and backbone.
pub fn write_run_header(dir: &Path, prepared: &Prepared) -> Result<()> {
    write_text(&dir.join("config.txt"), |w| w.write_all(prepared.config.to_text().as_bytes()))?;
    write_text(&dir.join("backbone.ckpt"), |w| {
        w.write_all(prepared.backbone.to_checkpoint().as_bytes())
    })?;
    #[derive(Serialize)]
    struct BackboneInfo<'a> {
        version: &'a str,
        digest: String,
        pretrain: Option<&'a PretrainSummary>,
    }
    write_json(
        &dir.join("backbone.json"),
        &BackboneInfo {
            version: ARTIFACT_VERSION,
            digest: format!("{:016x}", prepared.backbone.digest()),
            pretrain: prepared.pretrain.as_ref(),
        },
    )
}

/// Writes one row's directory under `dir`.
pub fn write_row(dir: &Path, row: &RowOutput) -> Result<PathBuf> {
    let name = row.name();
    let row_dir = dir.join(&name);
    fs::create_dir(&row_dir).map_err(|e| Error::io(&row_dir, e))?;

    write_text(&row_dir.join("episodes.jsonl"), |w| {
        for r in &row.records {
            let line = serde_json::to_string(r).map_err(std::io::Error::other)?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    write_json(&row_dir.join("summary.json"), &row.summary)?;
    write_text(&row_dir.join(format!("curves_{name}.csv")), |w| {
        writeln!(w, "epoch,support_loss,support_acc,query_loss,query_acc")?;
        for c in &row.summary.curves {
            writeln!(
                w,
                "{},{:?},{:?},{},{}",
                c.epoch,
                c.support_loss,
                c.support_acc,
                opt(c.query_loss),
                opt(c.query_acc)
            )?;
        }
        Ok(())
    })?;
    write_text(&row_dir.join("logits.csv"), |w| {
        let ways = row.dumps.logits.first().map(|(_, m, _)| m.cols()).unwrap_or(0);
        let cols: Vec<String> = (0..ways).map(|c| format!("logit_{c}")).collect();
        writeln!(w, "episode,label,predicted,{}", cols.join(","))?;
        for (episode, logits, labels) in &row.dumps.logits {
            for (z, y) in logits.iter_rows().zip(labels) {
                write!(w, "{episode},{y},{}", crate::linalg::argmax(z))?;
                for v in z {
                    write!(w, ",{v:?}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    })?;
    if let Some(first) = &row.dumps.first_episode {
        write_text(&row_dir.join("dcm_state.csv"), |w| {
            writeln!(w, "epoch,dim,mu,sigma,scale")?;
            for (e, state) in first.dcm_history.iter().enumerate() {
                dcm::write_state_text(e + 1, state, &mut *w)?;
            }
            Ok(())
        })?;
        write_text(&row_dir.join("augmentation.csv"), |w| {
            writeln!(w, "epoch,kind,index,value")?;
            for rec in &first.augmentation_log {
                for (i, len) in rec.chain_lengths.iter().enumerate() {
                    writeln!(w, "{},chain,{i},{len}", rec.epoch + 1)?;
                }
                for (k, n) in rec.per_class_counts.iter().enumerate() {
                    writeln!(w, "{},class,{k},{n}", rec.epoch + 1)?;
                }
            }
            Ok(())
        })?;
    }
    Ok(row_dir)
}

pub fn write_ablation(dir: &Path, report: &AblationReport) -> Result<()> {
    for row in &report.rows {
        write_row(dir, row)?;
    }
    write_json(
        &dir.join("ablation.json"),
        &ComparisonFile {
            version: ARTIFACT_VERSION.to_string(),
            comparisons: report.comparisons.clone(),
        },
    )
}

pub fn write_shot_sweep(dir: &Path, cells: &[ShotCell]) -> Result<()> {
    for cell in cells {
        let cell_dir = dir.join(format!("shots-{}", cell.shots));
        fs::create_dir(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
        for row in &cell.rows {
            write_row(&cell_dir, row)?;
        }
        write_json(
            &cell_dir.join("shots.json"),
            &ComparisonFile {
                version: ARTIFACT_VERSION.to_string(),
                comparisons: vec![cell.gain_over_baseline.clone(), cell.gain_over_backbone.clone()],
            },
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------- replay

fn read_records(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::ConfigParse {
                line: i + 1,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn mismatch(field: String, recorded: impl std::fmt::Debug, recomputed: impl std::fmt::Debug) -> Error {
    Error::ReplayMismatch {
        field,
        recorded: format!("{recorded:?}"),
        recomputed: format!("{recomputed:?}"),
    }
}

fn same_f64(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

fn same_opt(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => same_f64(x, y),
        (None, None) => true,
        _ => false,
    }
}

fn check_summary(recorded: &RunRecord, fresh: &RunRecord) -> Result<()> {
    macro_rules! field {
        ($name:ident) => {
            if recorded.$name != fresh.$name {
                return Err(mismatch(stringify!($name).into(), &recorded.$name, &fresh.$name));
            }
        };
    }
    field!(version);
    field!(episodes_requested);
    field!(episodes_completed);
    field!(excluded);
    if !same_f64(recorded.mean_accuracy, fresh.mean_accuracy) {
        return Err(mismatch("mean_accuracy".into(), recorded.mean_accuracy, fresh.mean_accuracy));
    }
    if !same_opt(recorded.ci95, fresh.ci95) {
        return Err(mismatch("ci95".into(), recorded.ci95, fresh.ci95));
    }
    if !same_f64(recorded.mean_query_loss, fresh.mean_query_loss) {
        return Err(mismatch(
            "mean_query_loss".into(),
            recorded.mean_query_loss,
            fresh.mean_query_loss,
        ));
    }
    if recorded.curves.len() != fresh.curves.len() {
        return Err(mismatch("curves".into(), recorded.curves.len(), fresh.curves.len()));
    }
    for (i, (a, b)) in recorded.curves.iter().zip(&fresh.curves).enumerate() {
        let checks = [
            ("support_loss", Some(a.support_loss), Some(b.support_loss)),
            ("support_acc", Some(a.support_acc), Some(b.support_acc)),
            ("query_loss", a.query_loss, b.query_loss),
            ("query_acc", a.query_acc, b.query_acc),
            ("mean_chain_length", Some(a.mean_chain_length), Some(b.mean_chain_length)),
            ("bias_norm", a.bias_norm, b.bias_norm),
        ];
        if a.epoch != b.epoch {
            return Err(mismatch(format!("curves[{i}].epoch"), a.epoch, b.epoch));
        }
        for (name, x, y) in checks {
            if !same_opt(x, y) {
                return Err(mismatch(format!("curves[{i}].{name}"), x, y));
            }
        }
    }
    Ok(())
}

/// Recomputes a row's summary from its `episodes.jsonl` and checks that
/// every aggregate matches bit for bit.
pub fn replay_row(row_dir: &Path) -> Result<RunRecord> {
    let recorded: RunRecord = read_json(&row_dir.join("summary.json"))?;
    let records = read_records(&row_dir.join("episodes.jsonl"))?;
    let fresh = summarize(&recorded.config, &recorded.row, recorded.shots, &records)?;
    check_summary(&recorded, &fresh)?;
    Ok(recorded)
}

fn check_comparisons(dir: &Path, file: &str) -> Result<()> {
    let path = dir.join(file);
    if !path.is_file() {
        return Ok(());
    }
    let recorded: ComparisonFile = read_json(&path)?;
    for (i, c) in recorded.comparisons.iter().enumerate() {
        let a = read_records(&dir.join(&c.from).join("episodes.jsonl"))?;
        let b = read_records(&dir.join(&c.to).join("episodes.jsonl"))?;
        let fresh = compare_records(&c.from, &a, &c.to, &b)?;
        let same = match (&c.difference, &fresh.difference) {
            (Some(x), Some(y)) => x.n == y.n && same_f64(x.mean, y.mean) && same_f64(x.ci95, y.ci95),
            (None, None) => true,
            _ => false,
        };
        if !same {
            return Err(mismatch(
                format!("{file}: comparisons[{i}].difference"),
                c.difference,
                fresh.difference,
            ));
        }
    }
    Ok(())
}

/// Replays every row found under `dir` (a row directory, a run directory
/// or a shot-sweep cell). Returns the verified row directories.
pub fn replay(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("summary.json").is_file() {
        replay_row(dir)?;
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    let mut verified = Vec::new();
    for sub in entries {
        let rows = replay(&sub).map_err(|e| match e {
            Error::ReplayMismatch {
                field,
                recorded,
                recomputed,
            } => Error::ReplayMismatch {
                field: format!("{}/{field}", sub.file_name().unwrap_or_default().to_string_lossy()),
                recorded,
                recomputed,
            },
            other => other,
        })?;
        verified.extend(rows);
    }
    check_comparisons(dir, "ablation.json")?;
    check_comparisons(dir, "shots.json")?;
    if verified.is_empty() {
        return Err(Error::Config(format!("no run records under {}", dir.display())));
    }
    Ok(verified)
}
