#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mqir::config::RunConfig;
use mqir::pipeline::{self, Verbosity};
use tempfile::TempDir;

pub const QUIET: Verbosity = Verbosity { quiet: true };

/// Small enough to train in a second, with every path rooted in `root`.
pub fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    let d = &mut cfg.data;
    d.scenes = 32;
    d.regions = 4;
    d.feature_dim = 16;
    d.eval_groups = 2;
    d.vocab_size = 48;
    let m = &mut cfg.model;
    m.d_model = 16;
    m.image_layers = 1;
    m.text_layers = 1;
    m.heads = 2;
    m.filter = 32;
    m.embed_hidden = 32;
    m.pooler_hidden = 32;
    m.embed_dim = 16;
    m.max_tokens = 16;
    let t = &mut cfg.train;
    t.epochs = 2;
    t.batch_size = 8;
    t.lr = 1e-3;
    t.eval_every = 0;
    t.checkpoint_every = 0;
    let data = root.join("data");
    let p = |f: &str| data.join(f).display().to_string();
    let paths = &mut cfg.paths;
    paths.out_dir = root.join("runs").display().to_string();
    paths.narratives = p("all.jsonl");
    paths.features = p("features.bin");
    paths.scene_file = p("scenes.json");
    paths.train_narratives = p("train.jsonl");
    paths.train_features = p("train_features.bin");
    paths.eval_narratives = p("eval.jsonl");
    paths.eval_features = p("eval_features.bin");
    cfg
}

pub struct Fixture {
    pub root: TempDir,
    pub cfg: RunConfig,
    pub run: PathBuf,
}

/// Synthetic data plus a briefly trained checkpoint; `cfg.paths.checkpoint` points at it.
pub fn trained_fixture() -> Fixture {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(root.path());
    pipeline::gen_synth(&cfg, &root.path().join("data"), QUIET).unwrap();
    let run = root.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    pipeline::train_cmd(&cfg, &run, QUIET).unwrap();
    cfg.paths.checkpoint = run.join(pipeline::CHECKPOINT).display().to_string();
    Fixture { root, cfg, run }
}
