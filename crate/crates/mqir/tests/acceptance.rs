//! Acceptance suite, one PASS/FAIL line per criterion.
//!
//! `cargo test -p mqir --test acceptance` runs everything; append criterion ids
//! (`-- P3 P5`) to run a subset. The process exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use mqir::config::RunConfig;
use mqir::pipeline;
use mqir::service::{router, Ready, ServiceState};
use mqir_core::data::{
    build_vocabulary, generate_synthetic, tokenize_aligned, FeatureRecord, QueryInput, Region, SynthConfig,
};
use mqir_core::geometry::{boxes_for_query, MouseTrace, TimedToken, TraceBox, TracePoint};
use mqir_core::model::{contrastive_loss, Model, ModelConfig, QueryMode};
use mqir_core::numerics::{finite_difference_check, Array};
use mqir_core::retrieval::{mean_average_precision, recall_at_k, Metrics, Provenance, RetrievalIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- P1

fn p1_config(mode: QueryMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        d_model: 32,
        image_layers: 1,
        text_layers: 1,
        heads: 2,
        filter: 64,
        embed_hidden: 32,
        pooler_hidden: 32,
        embed_dim: 16,
        dropout: 0.1,
        global_dim: 16,
        region_dim: 16,
        max_tokens: 8,
        regions: 4,
        query_mode: mode,
        use_positions: true,
        use_locations: true,
        init_std: 0.1,
    }
}

/// `batch` synthetic images with their traced queries, vocabulary of 40.
fn sample(batch: usize, k: usize) -> (Vec<FeatureRecord>, Vec<QueryInput>) {
    let ds = generate_synthetic(&SynthConfig { scenes: 8, regions: 4, feature_dim: 16, seed: 1, ..Default::default() })
        .expect("synthetic data");
    let vocab = build_vocabulary(ds.narratives.iter().map(|r| r.caption.as_str()), 40).expect("vocabulary");
    let queries = ds.narratives[..batch]
        .iter()
        .map(|r| QueryInput::build(&tokenize_aligned(r, &vocab), Some(&r.trace), k, 0.1, 0.05))
        .collect();
    (ds.features[..batch].to_vec(), queries)
}

fn p1() -> Check {
    let start = Instant::now();
    let (images, queries) = sample(2, 8);
    let mut m = Model::<f64>::new(p1_config(QueryMode::TextTrace), 3).map_err(|e| e.to_string())?;
    let mut pass = m.forward(&images, &queries, None).map_err(|e| e.to_string())?;
    let report = finite_difference_check(&mut pass.graph, &mut m.params, pass.loss, &[], 1e-5, 1e-3)
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let checked: Vec<&str> = report.params.iter().map(|p| p.name.as_str()).collect();
    for part in ["ire.", "tte.", "tbe.", "image.layer0", "text.layer0", "image.pool", "text.pool"] {
        ensure(checked.iter().any(|n| n.starts_with(part)), || format!("no parameter under {part} was checked"))?;
    }
    let entries: usize = report.params.iter().map(|p| p.entries).sum();
    ensure(entries == m.params.num_values(), || format!("{entries} of {} entries checked", m.params.num_values()))?;
    let worst: Vec<String> = report
        .failures()
        .map(|p| format!("{} {:.2e} (analytic {:e}, numeric {:e})", p.name, p.max_rel_error, p.analytic, p.numeric))
        .collect();
    ensure(report.pass, || format!("failing tensors: {}", worst.join(", ")))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} tensors, {entries} entries, max rel err {:.2e} < 1e-3, {secs:.1} s",
        report.params.len(),
        report.max_rel_error()
    ))
}

// ---------------------------------------------------------------- P2

/// Direct formula without the max shift.
fn naive_loss(s: &[Vec<f64>]) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| s[i][j].exp()).sum();
        let col: f64 = (0..b).map(|j| s[j][i].exp()).sum();
        total += 2.0 * s[i][i] - row.ln() - col.ln();
    }
    -total / (2.0 * b as f64)
}

fn matrix(s: &[Vec<f64>]) -> Array<f64> {
    let b = s.len();
    Array::from_f64(b, b, &s.concat())
}

fn p2() -> Check {
    let loss = |s: &[Vec<f64>]| contrastive_loss(&matrix(s)).map_err(|e| e.to_string());
    let one = loss(&[vec![3.7]])?;
    ensure(one == 0.0, || format!("B = 1 gives {one}"))?;
    let uniform = loss(&vec![vec![0.3; 4]; 4])?;
    ensure((uniform - 4f64.ln()).abs() <= 1e-9, || format!("uniform 4x4 gives {uniform}"))?;
    let diag = loss(&[vec![2.0, 0.0], vec![0.0, 2.0]])?;
    let want = (1.0 + (-2f64).exp()).ln();
    ensure((diag - want).abs() <= 1e-9, || format!("[[2,0],[0,2]] gives {diag}, want {want}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_oracle = 0f64;
    for case in 0..100 {
        let b = rng.random_range(1..=8);
        let s: Vec<Vec<f64>> = (0..b).map(|_| (0..b).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let t: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| s[j][i]).collect()).collect();
        let (ls, lt) = (loss(&s)?, loss(&t)?);
        ensure(ls == lt, || format!("case {case}: L(S) = {ls}, L(S^T) = {lt}"))?;
        worst_oracle = worst_oracle.max((ls - naive_loss(&s)).abs());
    }
    ensure(worst_oracle <= 1e-9, || format!("direct formula differs by {worst_oracle:.2e}"))?;
    Ok(format!("hand values hold; 100 random matrices symmetric, direct formula within {worst_oracle:.1e}"))
}

// ---------------------------------------------------------------- P3

/// Linear scan over every point, no ordering assumptions.
fn oracle_box(raw: &[(f64, f64, f64)], t1: f64, t2: f64, t_p: f64, s_p: f64) -> Option<[f64; 5]> {
    let (lo, hi) = (t1 - t_p, t2 + t_p);
    let mut hit: Option<[f64; 4]> = None;
    for &(x, y, t) in raw {
        if t < lo || t > hi {
            continue;
        }
        let (x, y) = (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
        hit = Some(match hit {
            None => [x, y, x, y],
            Some([a, b, c, d]) => [a.min(x), b.min(y), c.max(x), d.max(y)],
        });
    }
    hit.map(|[a, b, c, d]| {
        let (x0, y0) = ((a - s_p).clamp(0.0, 1.0), (b - s_p).clamp(0.0, 1.0));
        let (x1, y1) = ((c + s_p).clamp(0.0, 1.0), (d + s_p).clamp(0.0, 1.0));
        [x0, y0, x1, y1, (x1 - x0) * (y1 - y0)]
    })
}

fn contains(outer: [f64; 5], inner: [f64; 5]) -> bool {
    outer[0] <= inner[0] && outer[1] <= inner[1] && outer[2] >= inner[2] && outer[3] >= inner[3]
}

fn p3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut fallbacks, mut clipped, mut mono) = (0, 0, 0);
    for case in 0..1000 {
        let n = if case % 10 == 0 { 0 } else { rng.random_range(1..40) };
        let mut t = 0.0;
        let raw: Vec<(f64, f64, f64)> = (0..n)
            .map(|_| {
                // repeated timestamps happen in real traces
                if rng.random_bool(0.8) {
                    t += rng.random_range(0.0..0.3);
                }
                (rng.random_range(-0.3..1.3), rng.random_range(-0.3..1.3), t)
            })
            .collect();
        clipped += raw.iter().filter(|p| !(0.0..=1.0).contains(&p.0) || !(0.0..=1.0).contains(&p.1)).count();
        let trace = MouseTrace::new(raw.iter().map(|&(x, y, t)| TracePoint { x, y, t }).collect())
            .map_err(|e| format!("case {case}: {e}"))?;
        let tokens: Vec<TimedToken> = (0..rng.random_range(1..6))
            .map(|i| {
                let a = rng.random_range(0.0..t + 1.0);
                TimedToken { token_id: i, t_start: a, t_end: a + rng.random_range(0.0..0.8) }
            })
            .collect();
        let (t_p, s_p) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.2));
        let got = boxes_for_query(&tokens, &trace, t_p, s_p);
        for (i, (tok, b)) in tokens.iter().zip(&got).enumerate() {
            let want = oracle_box(&raw, tok.t_start, tok.t_end, t_p, s_p);
            if want.is_none() {
                fallbacks += 1;
            }
            let want = want.unwrap_or(TraceBox::WHOLE.to_array());
            ensure(b.to_array() == want, || format!("case {case} token {i}: {:?} vs oracle {want:?}", b.to_array()))?;

            let (dt, ds) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.2));
            if let Some(small) = oracle_box(&raw, tok.t_start, tok.t_end, t_p, s_p) {
                let wider = boxes_for_query(std::slice::from_ref(tok), &trace, t_p + dt, s_p)[0].to_array();
                ensure(contains(wider, small), || format!("case {case} token {i}: not monotone in t_p"))?;
            }
            let grown = boxes_for_query(std::slice::from_ref(tok), &trace, t_p, s_p + ds)[0].to_array();
            ensure(contains(grown, b.to_array()), || format!("case {case} token {i}: not monotone in s_p"))?;
            mono += 1;
        }
    }
    ensure(fallbacks > 0 && clipped > 0, || "sampling never hit the fallback or clipping".into())?;
    Ok(format!(
        "1000 cases exact ({fallbacks} whole-canvas fallbacks, {clipped} clipped points), {mono} monotone pairs"
    ))
}

// ---------------------------------------------------------------- P4

fn p4() -> Check {
    let cfg = ModelConfig { max_tokens: 8, ..p1_config(QueryMode::TextTrace) };
    let m = Model::<f32>::new(cfg.clone(), 4).map_err(|e| e.to_string())?;
    let (images, queries) = sample(4, 8);
    let enc_i = |m: &Model<f32>, x: &[FeatureRecord]| m.encode_image(x).map_err(|e| e.to_string());
    let enc_q = |m: &Model<f32>, x: &[QueryInput]| m.encode_query(x).map_err(|e| e.to_string());
    let base_i = enc_i(&m, &images)?;
    let base_q = enc_q(&m, &queries)?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut perm_diff = 0f32;
    for _ in 0..50 {
        let mut shuffled = images.clone();
        // features, geometry and validity travel together
        shuffled.iter_mut().for_each(|f| f.regions.shuffle(&mut rng));
        perm_diff = perm_diff.max(enc_i(&m, &shuffled)?.max_abs_diff(&base_i));
    }
    ensure(perm_diff <= 1e-5, || format!("region permutation moved the image embedding by {perm_diff:.2e}"))?;

    // two extra region slots, masked off and filled with junk
    let mut wide_img = m.clone();
    wide_img.config.regions += 2;
    let padded: Vec<FeatureRecord> = images
        .iter()
        .map(|f| {
            let mut f = f.clone();
            for v in [5.0, -2.0] {
                f.regions.push(Region {
                    feature: vec![v; 16],
                    geometry: TraceBox::from_corners(0.1, 0.2, 0.6, 0.9),
                    valid: false,
                });
            }
            f
        })
        .collect();
    let img_pad = enc_i(&wide_img, &padded)?.max_abs_diff(&base_i);

    // four extra query positions with fresh position rows, masked off and filled with junk
    let extra = 4;
    let mut wide_q = m.clone();
    wide_q.config.max_tokens += extra;
    for name in ["tte.pos", "tbe.pos"] {
        let id = wide_q.params.find(name).ok_or(format!("{name} missing"))?;
        let p = wide_q.params.get_mut(id);
        let mut values = p.value.values().to_vec();
        values.extend((0..extra * cfg.d_model).map(|_| rng.random_range(-1.0f32..1.0)));
        p.value = Array::new(vec![cfg.max_tokens + extra, cfg.d_model], values).map_err(|e| e.to_string())?;
    }
    let long: Vec<QueryInput> = queries
        .iter()
        .map(|q| {
            let mut q = q.clone();
            for i in 0..extra {
                q.token_ids.push(7 + i as u32);
                q.token_mask.push(false);
                q.boxes.push(TraceBox::from_corners(0.3, 0.3, 0.5, 0.8));
                q.box_valid.push(false);
            }
            q
        })
        .collect();
    let q_pad = enc_q(&wide_q, &long)?.max_abs_diff(&base_q);
    ensure(img_pad <= 1e-6 && q_pad <= 1e-6, || format!("padding moved image {img_pad:.2e}, query {q_pad:.2e}"))?;

    let mut swapped = queries.clone();
    let q = &mut swapped[0];
    let (a, b) = (0, 2);
    ensure(q.token_mask[a] && q.token_mask[b] && q.token_ids[a] != q.token_ids[b], || "bad swap positions".into())?;
    q.token_ids.swap(a, b);
    q.boxes.swap(a, b);
    let swap_diff = enc_q(&m, &swapped)?.max_abs_diff(&base_q);
    ensure(swap_diff > 1e-3, || format!("swapping two tokens changed the query by only {swap_diff:.2e}"))?;
    Ok(format!(
        "permutations {perm_diff:.1e} <= 1e-5; padding image {img_pad:.1e}, query {q_pad:.1e} <= 1e-6; token swap {swap_diff:.2e} > 1e-3"
    ))
}

// ---------------------------------------------------------------- P5

fn p5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tied = 0;
    for case in 0..100 {
        let (nq, ni) = (rng.random_range(1..30), rng.random_range(1..40));
        let coarse = case % 2 == 0;
        let scores: Vec<Vec<f32>> = (0..nq)
            .map(|_| {
                (0..ni)
                    .map(|_| if coarse { rng.random_range(0..4) as f32 } else { rng.random_range(-1.0f32..1.0) })
                    .collect()
            })
            .collect();
        let targets: Vec<usize> = (0..nq).map(|_| rng.random_range(0..ni)).collect();
        let ids: Vec<String> = (0..ni).map(|j| format!("img-{j:03}")).collect();
        // one-hot rows make the dot product return the score itself
        let mut rows = vec![0f32; ni * ni];
        (0..ni).for_each(|j| rows[j * ni + j] = 1.0);
        let index = RetrievalIndex::new(ids.clone(), ni, rows, Provenance::default()).map_err(|e| e.to_string())?;

        let mut results = Vec::new();
        let mut brute_ranks = Vec::new();
        for (q, row) in scores.iter().enumerate() {
            let t = targets[q];
            let ahead = (0..ni).filter(|&j| row[j] > row[t] || (row[j] == row[t] && j < t)).count();
            tied += (0..ni).filter(|&j| j != t && row[j] == row[t]).count();
            brute_ranks.push(ahead + 1);
            let r = index.rank(&format!("q{q}"), row, ni, Some(&ids[t])).map_err(|e| e.to_string())?;
            let mut order: Vec<usize> = (0..ni).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let want: Vec<(String, f32)> = order.iter().map(|&j| (ids[j].clone(), row[j])).collect();
            ensure(r.ranked == want, || format!("case {case} query {q}: ranking order differs"))?;
            results.push(r);
        }
        let got: Vec<usize> = results.iter().map(|r| r.rank_of_target.unwrap_or(0)).collect();
        ensure(got == brute_ranks, || format!("case {case}: ranks {got:?} vs {brute_ranks:?}"))?;
        let recall = |k: usize| 100.0 * brute_ranks.iter().filter(|&&r| r <= k).count() as f64 / nq as f64;
        let map = brute_ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / nq as f64;
        let m = Metrics::from_results(&results).map_err(|e| e.to_string())?;
        let want = Metrics { r1: recall(1), r5: recall(5), r10: recall(10), map };
        ensure(m == want, || format!("case {case}: {m:?} vs brute force {want:?}"))?;
        ensure(mean_average_precision(&results).map_err(|e| e.to_string())? == map, || "mAP".into())?;
        let mut prev = 0.0;
        for k in 1..=ni {
            let r = recall_at_k(&results, k).map_err(|e| e.to_string())?;
            ensure(r >= prev, || format!("case {case}: R@{k} = {r} < R@{} = {prev}", k - 1))?;
            prev = r;
        }
        ensure(prev == 100.0, || format!("case {case}: R@{ni} = {prev}"))?;
    }
    Ok(format!("100 matrices exact against brute force ({tied} tied scores), R@K monotone"))
}

// ---------------------------------------------------------------- CLI helpers

fn mqir(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mqir")).env_clear().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("mqir {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn metrics_of(dir: &Path) -> Result<HashMap<String, f64>, String> {
    let text = fs::read_to_string(dir.join(pipeline::METRICS)).map_err(|e| format!("{}: {e}", dir.display()))?;
    Ok(pipeline::parse_metric_lines(&text))
}

fn data_paths(cfg: &mut RunConfig, data: &Path) {
    let p = |f: &str| data.join(f).display().to_string();
    let paths = &mut cfg.paths;
    paths.narratives = p("all.jsonl");
    paths.features = p("features.bin");
    paths.scene_file = p("scenes.json");
    paths.train_narratives = p("train.jsonl");
    paths.train_features = p("train_features.bin");
    paths.eval_narratives = p("eval.jsonl");
    paths.eval_features = p("eval_features.bin");
}

/// Writes `cfg` to `<root>/<name>.toml` and generates its corpus under `<root>/data-<name>`.
fn prepare(root: &Path, name: &str, mut cfg: RunConfig) -> Result<PathBuf, String> {
    let data = root.join(format!("data-{name}"));
    cfg.paths.out_dir = root.join("runs").display().to_string();
    data_paths(&mut cfg, &data);
    let path = root.join(format!("{name}.toml"));
    fs::write(&path, cfg.to_toml()).map_err(|e| e.to_string())?;
    mqir(&["gen-synth", "-q", "--config", s(&path), "--run-dir", s(&data)])?;
    Ok(path)
}

// ---------------------------------------------------------------- P6 / P7

const SEEDS: [u64; 3] = [0, 1, 2];

/// 256 scenes in 64 groups of 4, 16 groups held out.
fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    let d = &mut cfg.data;
    d.scenes = 256;
    d.group_size = 4;
    d.regions = 8;
    d.feature_dim = 16;
    d.eval_groups = 16;
    d.vocab_size = 64;
    let m = &mut cfg.model;
    m.d_model = 32;
    m.image_layers = 1;
    m.text_layers = 1;
    m.heads = 2;
    m.filter = 64;
    m.embed_hidden = 64;
    m.pooler_hidden = 64;
    m.embed_dim = 32;
    m.max_tokens = 16;
    let t = &mut cfg.train;
    t.epochs = 150;
    t.batch_size = 32;
    t.lr = 1e-3;
    t.eval_every = 0;
    t.checkpoint_every = 0;
    cfg
}

struct Desk {
    root: tempfile::TempDir,
    config: PathBuf,
    /// Held-out R@1 per variant, one entry per seed.
    r1: HashMap<&'static str, Vec<f64>>,
    secs: f64,
}

const VARIANTS: [(&str, &[&str]); 5] = [
    ("text+trace", &[]),
    ("text-only", &["--use-traces=false"]),
    ("trace-only", &["--trace-only"]),
    ("no-position", &["--no-position"]),
    ("no-location", &["--no-location"]),
];

fn desk_run(desk: &mut Desk, variant: &'static str, seeds: &[u64]) -> Result<(), String> {
    let flags = VARIANTS.iter().find(|v| v.0 == variant).expect("known variant").1;
    for &seed in seeds {
        let dir = desk.root.path().join(format!("{variant}-{seed}"));
        let seed_s = seed.to_string();
        let mut args = vec!["train", "-q", "--config", s(&desk.config), "--seed", &seed_s, "--run-dir", s(&dir)];
        args.extend_from_slice(flags);
        let start = Instant::now();
        mqir(&args)?;
        desk.secs += start.elapsed().as_secs_f64();
        let r1 = *metrics_of(&dir)?.get("R@1").ok_or("no R@1 in metrics")?;
        println!("    {variant:<12} seed {seed}: R@1 {r1:6.2}");
        desk.r1.entry(variant).or_default().push(r1);
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk() -> Result<Desk, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = prepare(root.path(), "desk", desk_config())?;
    let data = root.path().join("data-desk");
    let count = |f: &str| fs::read_to_string(data.join(f)).map(|t| t.lines().count()).unwrap_or(0);
    let (train, eval) = (count("train.jsonl"), count("eval.jsonl"));
    if (train, eval) != (192, 64) {
        return Err(format!("split is {train} train / {eval} eval, expected 192 / 64"));
    }
    Ok(Desk { root, config, r1: HashMap::new(), secs: 0.0 })
}

fn p6(desk: &mut Desk) -> Check {
    desk_run(desk, "text+trace", &SEEDS)?;
    desk_run(desk, "text-only", &SEEDS)?;
    let both = mean(&desk.r1["text+trace"]);
    let text = mean(&desk.r1["text-only"]);
    let gap = both - text;
    ensure(gap >= 15.0, || format!("text+trace {both:.2} - text-only {text:.2} = {gap:.2} < 15"))?;
    Ok(format!(
        "mean R@1 text+trace {both:.2}, text-only {text:.2} (group ceiling 25 + cross-group margin, reported), gap {gap:+.2} >= 15 over {} seeds, {:.0} s",
        SEEDS.len(),
        desk.secs
    ))
}

fn p7(desk: &mut Desk) -> Check {
    for v in ["text+trace", "text-only"] {
        if !desk.r1.contains_key(v) {
            desk_run(desk, v, &SEEDS)?;
        }
    }
    for v in ["trace-only", "no-position", "no-location"] {
        desk_run(desk, v, &SEEDS)?;
    }
    let m: HashMap<&str, f64> = desk.r1.iter().map(|(k, v)| (*k, mean(v))).collect();
    let both = m["text+trace"];
    ensure(m["trace-only"] < both, || format!("trace-only {:.2} >= text+trace {both:.2}", m["trace-only"]))?;
    ensure(m["text-only"] < both, || format!("text-only {:.2} >= text+trace {both:.2}", m["text-only"]))?;
    let mut parts: Vec<String> = VARIANTS.iter().map(|(v, _)| format!("{v} {:.2}", m[v])).collect::<Vec<_>>();
    parts.push("trace-only < text+trace, text-only < text+trace".into());
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------- P8

fn quick_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    let d = &mut cfg.data;
    d.scenes = 64;
    d.regions = 4;
    d.feature_dim = 16;
    d.eval_groups = 4;
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
    t.epochs = 8;
    t.batch_size = 16;
    t.lr = 1e-3;
    t.eval_every = 2;
    t.checkpoint_every = 4;
    cfg
}

fn same_files(a: &Path, b: &Path, files: &[&str]) -> Result<(), String> {
    for f in files {
        let (x, y) =
            (fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?, fs::read(b.join(f)).map_err(|e| e.to_string())?);
        ensure(x == y, || format!("{f} differs between {} and {}", a.display(), b.display()))?;
    }
    Ok(())
}

fn p8() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = prepare(root.path(), "quick", quick_config())?;

    let first = root.path().join("single");
    mqir(&["train", "-q", "--config", s(&config), "--seed", "11", "--run-dir", s(&first)])?;
    let again = root.path().join("single-again");
    mqir(&["train", "-q", "--config", s(&first.join("effective-config.toml")), "--run-dir", s(&again)])?;
    let files =
        [pipeline::METRICS, pipeline::CHECKPOINT, pipeline::BEST_CHECKPOINT, pipeline::LOSS_LOG, "epoch-0004.mqck"];
    same_files(&first, &again, &files)?;

    let splits = root.path().join("resplit");
    mqir(&["train", "-q", "--config", s(&config), "--resplits", "5", "--run-dir", s(&splits)])?;
    let report = metrics_of(&splits)?;
    let mut r1 = Vec::new();
    for i in 0..5 {
        let own = metrics_of(&splits.join(format!("split-{i}")))?;
        let listed = report.get(&format!("split{i}.R@1")).copied();
        ensure(listed == own.get("R@1").copied(), || format!("split {i}: report {listed:?} vs split metrics"))?;
        r1.push(own["R@1"]);
    }
    let m = mean(&r1);
    let sd = (r1.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r1.len() - 1) as f64).sqrt();
    let (got_m, got_sd) = (report.get("R@1").copied(), report.get("R@1.std").copied());
    let close = |a: Option<f64>, b: f64| a.is_some_and(|a| (a - b).abs() <= 1e-9 * b.abs().max(1.0));
    ensure(close(got_m, m) && close(got_sd, sd), || format!("reported {got_m:?} ± {got_sd:?}, recomputed {m} ± {sd}"))?;
    let text = fs::read_to_string(splits.join(pipeline::METRICS)).map_err(|e| e.to_string())?;
    ensure(text.contains("mean±std"), || "no mean ± std row".into())?;

    let splits_again = root.path().join("resplit-again");
    mqir(&["train", "-q", "--config", s(&splits.join("effective-config.toml")), "--run-dir", s(&splits_again)])?;
    same_files(&splits, &splits_again, &[pipeline::METRICS, "split-3/checkpoint.mqck"])?;
    Ok(format!("re-runs bit-identical; 5 re-splits R@1 = {m:.2} ± {sd:.2} (sample std)"))
}

// ---------------------------------------------------------------- P9

fn check_schema(def: &str, instance: &Value) -> Result<(), String> {
    let mut schema: Value = serde_json::from_str(mqir::QUERY_SCHEMA).map_err(|e| e.to_string())?;
    schema["$ref"] = Value::from(format!("#/$defs/{def}"));
    let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| e.to_string()).collect();
    ensure(errors.is_empty(), || format!("{def} violates the schema: {}", errors.join("; ")))
}

async fn call(state: &Arc<ServiceState>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map_or_else(Body::empty, |v| Body::from(v.to_string()));
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json").body(body);
    let resp = router(Arc::clone(state)).oneshot(req.expect("request")).await.expect("infallible");
    let status = resp.status();
    let bytes = resp.into_body().collect().await.expect("body").to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn p9() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = quick_config();
    cfg.train.eval_every = 0;
    cfg.train.checkpoint_every = 0;
    let config = prepare(root.path(), "quick", cfg)?;
    let run = root.path().join("train");
    mqir(&["train", "-q", "--config", s(&config), "--run-dir", s(&run)])?;
    let ckpt = run.join(pipeline::CHECKPOINT);

    let caption = "a red circle next to a blue square";
    let cli: Value = serde_json::from_str(&mqir(&[
        "query",
        "-q",
        "--config",
        s(&config),
        "--checkpoint",
        s(&ckpt),
        "--caption",
        caption,
        "--k",
        "64",
        "--run-dir",
        s(&root.path().join("query")),
    ])?)
    .map_err(|e| e.to_string())?;

    let mut served_cfg: RunConfig =
        toml::from_str(&fs::read_to_string(&config).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    served_cfg.paths.checkpoint = s(&ckpt).to_string();
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let state = ServiceState::new();
        let (status, health) = call(&state, Method::GET, "/v1/healthz", None).await;
        ensure(status == StatusCode::SERVICE_UNAVAILABLE, || format!("health before load: {status}"))?;
        check_schema("Health", &health)?;

        let engine = pipeline::load_engine(&served_cfg).map_err(|e| e.to_string())?;
        state.set_ready(Ready { engine, scenes: HashMap::new(), config: served_cfg.clone() });
        let (status, health) = call(&state, Method::GET, "/v1/healthz", None).await;
        ensure(status == StatusCode::OK, || format!("health after load: {status}"))?;
        check_schema("Health", &health)?;

        let traced = json!({
            "caption": caption,
            "timings": [[0.0, 0.3], [0.3, 0.6], [0.6, 1.0], [1.0, 1.3], [1.3, 1.5], [1.5, 1.6], [1.6, 1.9], [1.9, 2.4]],
            "trace": [[0.1, 0.1, 0.0], [0.2, 0.2, 0.8], [0.6, 0.6, 1.6], [0.8, 0.7, 2.4]],
            "k": 5
        });
        check_schema("QueryRequest", &traced)?;
        let (status, resp) = call(&state, Method::POST, "/v1/query", Some(traced)).await;
        ensure(status == StatusCode::OK, || format!("traced query: {status} {resp}"))?;
        check_schema("QueryResponse", &resp)?;
        ensure(resp["trace_used"] == true, || "traced query reported trace_used = false".into())?;

        let plain = json!({ "caption": caption, "k": 64 });
        let (status, resp) = call(&state, Method::POST, "/v1/query", Some(plain)).await;
        ensure(status == StatusCode::OK, || format!("untraced query: {status} {resp}"))?;
        check_schema("QueryResponse", &resp)?;
        ensure(resp["trace_used"] == false, || "missing trace reported trace_used = true".into())?;
        let bits = |v: &Value| -> Vec<(String, u32)> {
            v["results"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|r| {
                    (
                        r["image_id"].as_str().unwrap_or("").to_string(),
                        (r["score"].as_f64().unwrap_or(f64::NAN) as f32).to_bits(),
                    )
                })
                .collect()
        };
        let (served, cli_side) = (bits(&resp), bits(&cli));
        ensure(!served.is_empty() && served == cli_side, || "service and CLI rankings differ".into())?;
        Ok(format!(
            "responses satisfy the schema; untraced ranking of {} images equals the CLI bit-for-bit; health 503 -> 200",
            served.len()
        ))
    })
}

// ---------------------------------------------------------------- driver

fn run(id: &str, title: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS {id} {title} [{secs:.1} s]: {detail}"),
        Err(detail) => println!("FAIL {id} {title} [{secs:.1} s]: {detail}"),
    }
    result.is_ok()
}

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let on = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w.eq_ignore_ascii_case(id));
    let mut ok = true;
    let simple: [(&str, &str, fn() -> Check); 5] = [
        ("P1", "gradient check on the full tiny model", p1),
        ("P2", "contrastive loss against hand values", p2),
        ("P3", "trace geometry against a naive scan", p3),
        ("P4", "tower invariances", p4),
        ("P5", "ranking metrics against brute force", p5),
    ];
    for (id, title, f) in simple {
        if on(id) {
            ok &= run(id, title, f);
        }
    }
    if on("P6") || on("P7") {
        match desk() {
            Ok(mut d) => {
                if on("P6") {
                    ok &= run("P6", "traces beat text alone on grouped scenes", || p6(&mut d));
                }
                if on("P7") {
                    ok &= run("P7", "ablations reachable by flag", || p7(&mut d));
                }
            }
            Err(e) => {
                for id in ["P6", "P7"].into_iter().filter(|id| on(id)) {
                    println!("FAIL {id} desk corpus: {e}");
                }
                ok = false;
            }
        }
    }
    if on("P8") {
        ok &= run("P8", "reproducible runs and re-split spread", p8);
    }
    if on("P9") {
        ok &= run("P9", "query service contract", p9);
    }
    if !ok {
        std::process::exit(1);
    }
}
