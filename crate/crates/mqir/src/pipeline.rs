//! Subcommand bodies. Each takes the resolved config and the run directory it writes into.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mqir_core::data::{
    build_vocabulary, generate_synthetic, split_by_group, Batcher, FeatureRecord, NarrativeRecord, Scene, Vocabulary,
};
use mqir_core::model::Model;
use mqir_core::retrieval::{evaluate, evaluate_folds, mean_std, Metrics, Provenance, RetrievalIndex};
use mqir_core::train::{train, transfer_weights, EpochSummary, StepLog, TrainError, TrainObserver};

use crate::config::{RunConfig, EFFECTIVE_CONFIG};
use crate::engine::{QueryEngine, QueryRequest, QueryResponse};
use crate::formats::{self, features::FeatureDims, fingerprint, read_bytes, write_bytes};

pub const CHECKPOINT: &str = "checkpoint.mqck";
pub const BEST_CHECKPOINT: &str = "best.mqck";
pub const VOCAB: &str = "vocab.json";
pub const INDEX: &str = "index.mqix";
pub const METRICS: &str = "metrics.txt";
pub const LOSS_LOG: &str = "loss.log";

/// Creates `<out_dir>/<timestamp>-seed<seed>`, adding a counter if that name is taken.
pub fn create_run_dir(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
            let base = Path::new(&cfg.paths.out_dir).join(format!("{stamp}-seed{}", cfg.run.seed));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    Ok(dir)
}

pub fn write_effective_config(dir: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let path = dir.join(EFFECTIVE_CONFIG);
    write_bytes(&path, cfg.to_toml().as_bytes())?;
    Ok(path)
}

/// Progress lines go to standard error unless quiet.
#[derive(Debug, Clone, Copy, Default)]
pub struct Verbosity {
    pub quiet: bool,
}

impl Verbosity {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn subset<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

fn feature_dims(features: &[FeatureRecord]) -> Result<FeatureDims> {
    let f = features.first().ok_or_else(|| anyhow!("feature set is empty"))?;
    Ok(FeatureDims {
        global_dim: f.global.len(),
        region_dim: f.regions.first().map_or(0, |r| r.feature.len()),
        regions: f.regions.len(),
    })
}

/// Keeps the features of the images the records point at, in record order of first appearance.
pub fn features_for(records: &[NarrativeRecord], features: &[FeatureRecord]) -> Result<Vec<FeatureRecord>> {
    let by_id: HashMap<&str, &FeatureRecord> = features.iter().map(|f| (f.image_id.as_str(), f)).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in records {
        if seen.insert(r.image_id.as_str()) {
            let f = by_id.get(r.image_id.as_str()).ok_or_else(|| anyhow!("no features for image {}", r.image_id))?;
            out.push((*f).clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub scenes: usize,
    pub train: usize,
    pub eval: usize,
}

/// Writes the synthetic corpus, its group split and scene layouts.
pub fn gen_synth(cfg: &RunConfig, dir: &Path, v: Verbosity) -> Result<SynthOutput> {
    let ds = generate_synthetic(&cfg.synth_config()).map_err(|e| anyhow!("{e}"))?;
    let (tr, ev) = split_by_group(&ds.scenes, cfg.data.eval_groups, cfg.data.split_seed);
    let dims = feature_dims(&ds.features)?;
    formats::write_narratives(&dir.join("all.jsonl"), &ds.narratives)?;
    formats::write_narratives(&dir.join("train.jsonl"), &subset(&ds.narratives, &tr))?;
    formats::write_narratives(&dir.join("eval.jsonl"), &subset(&ds.narratives, &ev))?;
    formats::write_features(&dir.join("features.bin"), &ds.features, dims)?;
    formats::write_features(&dir.join("train_features.bin"), &subset(&ds.features, &tr), dims)?;
    formats::write_features(&dir.join("eval_features.bin"), &subset(&ds.features, &ev), dims)?;
    formats::write_scenes(&dir.join("scenes.json"), &ds.scenes)?;
    v.say(format!("{} scenes: {} train, {} eval -> {}", ds.scenes.len(), tr.len(), ev.len(), dir.display()));
    Ok(SynthOutput { scenes: ds.scenes.len(), train: tr.len(), eval: ev.len() })
}

pub fn vocab_from_records(records: &[NarrativeRecord], size: usize) -> Result<Vocabulary> {
    build_vocabulary(records.iter().map(|r| r.caption.as_str()), size).map_err(|e| anyhow!("vocabulary: {e}"))
}

pub fn build_vocab(cfg: &RunConfig, dir: &Path, v: Verbosity) -> Result<Vocabulary> {
    let records = formats::read_narratives(Path::new(&cfg.paths.train_narratives))?;
    let vocab = vocab_from_records(&records, cfg.data.vocab_size)?;
    formats::write_vocab(&dir.join(VOCAB), &vocab)?;
    v.say(format!("{} tokens, {} merges", vocab.len(), vocab.merges().len()));
    Ok(vocab)
}

/// Vocabulary named in the config, else `vocab.json` beside the checkpoint.
pub fn resolve_vocab(cfg: &RunConfig, checkpoint: &Path) -> Result<Vocabulary> {
    let path = match cfg.vocab_path() {
        Some(p) => p,
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(VOCAB),
    };
    formats::read_vocab(&path).with_context(|| "no usable vocabulary; pass --vocab")
}

fn require_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.checkpoint_path().ok_or_else(|| anyhow!("--checkpoint is required"))
}

/// Metrics report: aligned table, then one `name=value` line per metric.
pub fn metrics_report(metrics: &Metrics) -> String {
    let mut s = String::from("metric  value\n");
    for (name, value) in metrics.entries() {
        s.push_str(&format!("{name:<6}  {value:.4}\n"));
    }
    s.push('\n');
    for (name, value) in metrics.entries() {
        s.push_str(&format!("{name}={value}\n"));
    }
    s
}

/// Per-split (or per-fold) metrics plus their mean and sample standard deviation.
pub fn spread_report(label: &str, runs: &[Metrics]) -> (String, Metrics, Metrics) {
    let column = |f: fn(&Metrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    let (r1, r5, r10, map) = (column(|m| m.r1), column(|m| m.r5), column(|m| m.r10), column(|m| m.map));
    let mean = Metrics { r1: r1.0, r5: r5.0, r10: r10.0, map: map.0 };
    let std = Metrics { r1: r1.1, r5: r5.1, r10: r10.1, map: map.1 };
    let mut s = format!("{label:<8}");
    for (name, _) in mean.entries() {
        s.push_str(&format!("  {name:>16}"));
    }
    s.push('\n');
    for (i, m) in runs.iter().enumerate() {
        s.push_str(&format!("{:<8}", format!("{label}{i}")));
        for (_, value) in m.entries() {
            s.push_str(&format!("  {value:>16.4}"));
        }
        s.push('\n');
    }
    s.push_str(&format!("{:<8}", "mean±std"));
    for ((_, m), (_, sd)) in mean.entries().iter().zip(std.entries()) {
        s.push_str(&format!("  {:>16}", format!("{m:.4} ± {sd:.4}")));
    }
    s.push_str("\n\n");
    for (i, m) in runs.iter().enumerate() {
        for (name, value) in m.entries() {
            s.push_str(&format!("{label}{i}.{name}={value}\n"));
        }
    }
    for ((name, m), (_, sd)) in mean.entries().iter().zip(std.entries()) {
        s.push_str(&format!("{name}={m}\n{name}.std={sd}\n"));
    }
    (s, mean, std)
}

/// Parses the `name=value` lines of a metrics report.
pub fn parse_metric_lines(text: &str) -> HashMap<String, f64> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| v.trim().parse().ok().map(|v| (k.trim().to_string(), v)))
        .collect()
}

struct Recorder<'a> {
    log: BufWriter<fs::File>,
    dir: &'a Path,
    cfg: &'a RunConfig,
    validation: Option<(&'a [NarrativeRecord], &'a [FeatureRecord], &'a Vocabulary)>,
    best_r1: f64,
    v: Verbosity,
}

fn io_stop(e: impl std::fmt::Display) -> TrainError {
    TrainError::Stopped(e.to_string())
}

impl TrainObserver<f32> for Recorder<'_> {
    fn on_step(&mut self, s: &StepLog) -> Result<(), TrainError> {
        writeln!(self.log, "{} {} {:e} {}", s.step, s.epoch, s.lr, s.loss).map_err(io_stop)
    }

    fn on_epoch(&mut self, e: &EpochSummary, model: &Model<f32>) -> Result<(), TrainError> {
        self.log.flush().map_err(io_stop)?;
        let n = e.epoch + 1;
        let mut line = format!("epoch {n:>4}  loss {:.4}  batch-acc {:.3}", e.mean_loss, e.batch_accuracy);
        let every = self.cfg.train.checkpoint_every;
        if every > 0 && n % every == 0 {
            formats::write_checkpoint(&self.dir.join(format!("epoch-{n:04}.mqck")), model).map_err(io_stop)?;
        }
        let every = self.cfg.train.eval_every;
        if let Some((records, features, vocab)) = self.validation.filter(|_| every > 0 && n % every == 0) {
            let r1 = evaluate(model, records, features, vocab, &self.cfg.eval_options()).map_err(io_stop)?.metrics.r1;
            line.push_str(&format!("  val R@1 {r1:.2}"));
            if r1 > self.best_r1 {
                self.best_r1 = r1;
                formats::write_checkpoint(&self.dir.join(BEST_CHECKPOINT), model).map_err(io_stop)?;
            }
        }
        self.v.say(line);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub model_id: String,
    pub final_loss: Option<f64>,
    /// Evaluation of the final model on the held-out split, when one was available.
    pub metrics: Option<Metrics>,
    pub steps: usize,
}

/// Trains one model from in-memory splits and writes checkpoints, vocabulary, loss log and metrics into `dir`.
pub fn train_split(
    cfg: &RunConfig,
    dir: &Path,
    train_records: &[NarrativeRecord],
    train_features: &[FeatureRecord],
    eval: Option<(&[NarrativeRecord], &[FeatureRecord])>,
    v: Verbosity,
) -> Result<TrainOutput> {
    fs::create_dir_all(dir)?;
    let vocab = match cfg.vocab_path() {
        Some(p) => formats::read_vocab(&p)?,
        None => vocab_from_records(train_records, cfg.data.vocab_size)?,
    };
    formats::write_vocab(&dir.join(VOCAB), &vocab)?;
    let dims = feature_dims(train_features)?;
    let model_cfg = cfg.model_config(vocab.len(), dims.global_dim, dims.region_dim, dims.regions);
    let mut model = match cfg.init_from_path() {
        None => Model::<f32>::new(model_cfg, cfg.run.seed).map_err(|e| anyhow!("{e}"))?,
        Some(p) => {
            let source = formats::read_checkpoint(&p)?;
            let (model, report) =
                transfer_weights(&source.model, model_cfg, cfg.run.seed).map_err(|e| anyhow!("{e}"))?;
            v.say(format!(
                "initialized from {}: {} tensors copied, {} fresh",
                p.display(),
                report.copied.len(),
                report.initialized.len()
            ));
            model
        }
    };
    let batcher =
        Batcher::new(train_records, train_features, &vocab, cfg.batch_config()).map_err(|e| anyhow!("{e}"))?;
    let log = fs::File::create(dir.join(LOSS_LOG))?;
    let mut log = BufWriter::new(log);
    writeln!(log, "step epoch lr loss")?;
    let mut rec =
        Recorder { log, dir, cfg, validation: eval.map(|(r, f)| (r, f, &vocab)), best_r1: f64::NEG_INFINITY, v };
    let report = train(&mut model, &batcher, &cfg.train_config(), &mut rec).map_err(|e| anyhow!("{e}"))?;
    rec.log.flush()?;
    let checkpoint = dir.join(CHECKPOINT);
    let model_id = formats::write_checkpoint(&checkpoint, &model)?;
    let metrics = match eval {
        Some((records, features)) => {
            let m = evaluate(&model, records, features, &vocab, &cfg.eval_options()).map_err(|e| anyhow!("{e}"))?;
            fs::write(dir.join(METRICS), metrics_report(&m.metrics))?;
            Some(m.metrics)
        }
        None => None,
    };
    Ok(TrainOutput {
        checkpoint,
        model_id,
        final_loss: report.epochs.last().map(|e| e.mean_loss),
        metrics,
        steps: report.steps.len(),
    })
}

#[derive(Debug, Clone)]
pub enum TrainSummary {
    Single(TrainOutput),
    Resplits { runs: Vec<TrainOutput>, mean: Metrics, std: Metrics },
}

pub fn train_cmd(cfg: &RunConfig, dir: &Path, v: Verbosity) -> Result<TrainSummary> {
    if cfg.train.resplits > 0 {
        return resplits(cfg, dir, v);
    }
    let records = formats::read_narratives(Path::new(&cfg.paths.train_narratives))?;
    let (_, features) = formats::read_features(Path::new(&cfg.paths.train_features))?;
    let eval_path = Path::new(&cfg.paths.eval_narratives);
    let held_out = if eval_path.exists() && !cfg.paths.eval_narratives.is_empty() {
        let r = formats::read_narratives(eval_path)?;
        let (_, f) = formats::read_features(Path::new(&cfg.paths.eval_features))?;
        Some((r.clone(), features_for(&r, &f)?))
    } else {
        None
    };
    let out = train_split(cfg, dir, &records, &features, held_out.as_ref().map(|(r, f)| (&r[..], &f[..])), v)?;
    if let Some(m) = &out.metrics {
        v.say(metrics_report(m));
    }
    Ok(TrainSummary::Single(out))
}

/// Trains and evaluates once per group split `split_seed + i`, reporting per-split metrics and mean ± std.
pub fn resplits(cfg: &RunConfig, dir: &Path, v: Verbosity) -> Result<TrainSummary> {
    let records = formats::read_narratives(Path::new(&cfg.paths.narratives))?;
    let (_, features) = formats::read_features(Path::new(&cfg.paths.features))?;
    let scenes: Vec<Scene> = formats::read_scenes(Path::new(&cfg.paths.scene_file))?;
    let mut runs = Vec::new();
    for i in 0..cfg.train.resplits {
        let (tr, ev) = split_by_group(&scenes, cfg.data.eval_groups, cfg.data.split_seed + i as u64);
        let train_ids: BTreeSet<&str> = tr.iter().map(|&j| scenes[j].image_id.as_str()).collect();
        let eval_ids: BTreeSet<&str> = ev.iter().map(|&j| scenes[j].image_id.as_str()).collect();
        let pick = |ids: &BTreeSet<&str>| -> Vec<NarrativeRecord> {
            records.iter().filter(|r| ids.contains(r.image_id.as_str())).cloned().collect()
        };
        let (tr_rec, ev_rec) = (pick(&train_ids), pick(&eval_ids));
        if tr_rec.is_empty() || ev_rec.is_empty() {
            bail!("split {i} leaves no narratives on one side; check the scene file against the narratives");
        }
        let (tr_feat, ev_feat) = (features_for(&tr_rec, &features)?, features_for(&ev_rec, &features)?);
        v.say(format!("split {i}: {} train, {} eval", tr_rec.len(), ev_rec.len()));
        let out = train_split(cfg, &dir.join(format!("split-{i}")), &tr_rec, &tr_feat, Some((&ev_rec, &ev_feat)), v)?;
        runs.push(out);
    }
    let metrics: Vec<Metrics> = runs.iter().map(|r| r.metrics.expect("split has eval data")).collect();
    let (text, mean, std) = spread_report("split", &metrics);
    fs::write(dir.join(METRICS), &text)?;
    v.say(text);
    Ok(TrainSummary::Resplits { runs, mean, std })
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalSummary {
    Single(Metrics),
    Folds { folds: Vec<Metrics>, mean: Metrics, std: Metrics },
}

/// Returns the report text plus the parsed summary; the text is also written to `metrics.txt`.
pub fn evaluate_cmd(cfg: &RunConfig, dir: &Path) -> Result<(String, EvalSummary)> {
    let ckpt_path = require_checkpoint(cfg)?;
    let ckpt = formats::read_checkpoint(&ckpt_path)?;
    let vocab = resolve_vocab(cfg, &ckpt_path)?;
    let records = formats::read_narratives(Path::new(&cfg.paths.eval_narratives))?;
    let (_, features) = formats::read_features(Path::new(&cfg.paths.eval_features))?;
    let features = features_for(&records, &features)?;
    let opts = cfg.eval_options();
    let (text, summary) = if cfg.eval.folds > 1 {
        let rep = evaluate_folds(&ckpt.model, &records, &features, &vocab, &opts, cfg.eval.folds)
            .map_err(|e| anyhow!("{e}"))?;
        let (text, mean, std) = spread_report("fold", &rep.folds);
        (text, EvalSummary::Folds { folds: rep.folds, mean, std })
    } else {
        let rep = evaluate(&ckpt.model, &records, &features, &vocab, &opts).map_err(|e| anyhow!("{e}"))?;
        let mut lines = String::new();
        for r in &rep.results {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        fs::write(dir.join("rankings.jsonl"), lines)?;
        (metrics_report(&rep.metrics), EvalSummary::Single(rep.metrics))
    };
    fs::write(dir.join(METRICS), &text)?;
    Ok((text, summary))
}

pub fn build_index(cfg: &RunConfig) -> Result<RetrievalIndex> {
    let ckpt_path = require_checkpoint(cfg)?;
    let ckpt = formats::read_checkpoint(&ckpt_path)?;
    let feature_path = Path::new(&cfg.paths.features);
    let bytes = read_bytes(feature_path)?;
    let (_, features) = formats::features::decode_features(&bytes)?;
    let provenance = Provenance { checkpoint: ckpt.id, features: fingerprint(&bytes) };
    RetrievalIndex::build(&ckpt.model, &features, cfg.eval.eval_batch_size, provenance).map_err(|e| anyhow!("{e}"))
}

pub fn build_index_cmd(cfg: &RunConfig, dir: &Path, v: Verbosity) -> Result<PathBuf> {
    let index = build_index(cfg)?;
    let path = dir.join(INDEX);
    formats::write_index(&path, &index)?;
    v.say(format!("{} images x {} dims -> {}", index.len(), index.dim(), path.display()));
    Ok(path)
}

/// Loads checkpoint, vocabulary and index (or encodes `features` when no index is given).
pub fn load_engine(cfg: &RunConfig) -> Result<QueryEngine> {
    let ckpt_path = require_checkpoint(cfg)?;
    let ckpt = formats::read_checkpoint(&ckpt_path)?;
    let vocab = resolve_vocab(cfg, &ckpt_path)?;
    let index = match cfg.index_path() {
        Some(p) => {
            let index = formats::read_index(&p)?;
            if index.provenance.checkpoint != ckpt.id {
                bail!(
                    "index {} was built from checkpoint {}, not {}",
                    p.display(),
                    index.provenance.checkpoint,
                    ckpt.id
                );
            }
            index
        }
        None => build_index(cfg)?,
    };
    if index.dim() != ckpt.model.config.embed_dim {
        bail!("index has {} dimensions, model embeds into {}", index.dim(), ckpt.model.config.embed_dim);
    }
    Ok(QueryEngine {
        model: ckpt.model,
        vocab,
        index,
        model_id: ckpt.id,
        t_p: cfg.eval.t_p,
        s_p: cfg.eval.s_p,
        default_k: cfg.eval.k,
    })
}

pub fn query_cmd(cfg: &RunConfig, dir: &Path, req: &QueryRequest) -> Result<QueryResponse> {
    let start = std::time::Instant::now();
    let engine = load_engine(cfg)?;
    let outcome = engine.query(req).map_err(|e| anyhow!("{e}"))?;
    let resp = outcome.into_response(&engine.model_id, start.elapsed().as_secs_f64() * 1e3);
    write_bytes(&dir.join("response.json"), serde_json::to_string_pretty(&resp)?.as_bytes())?;
    Ok(resp)
}
