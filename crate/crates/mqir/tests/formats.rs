use std::fs;
use std::path::Path;

use mqir::formats::checkpoint::{decode_checkpoint, encode_checkpoint};
use mqir::formats::features::{decode_features, encode_features, FeatureDims};
use mqir::formats::index::{decode_index, encode_index};
use mqir::formats::{self, FormatError};
use mqir_core::data::{build_vocabulary, generate_synthetic, SynthConfig};
use mqir_core::model::{Model, ModelConfig, QueryMode};
use mqir_core::retrieval::{Provenance, RetrievalIndex};
use proptest::prelude::*;

fn golden() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/golden.jsonl"))
}

fn synth() -> mqir_core::data::SynthDataset {
    generate_synthetic(&SynthConfig { scenes: 16, regions: 4, feature_dim: 16, seed: 5, ..Default::default() }).unwrap()
}

#[test]
fn golden_sample_loads_with_clipping() {
    let records = formats::read_narratives(golden()).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records[0].timed_words[5].word, "standing");
    assert_eq!((records[0].timed_words[5].t_start, records[0].timed_words[5].t_end), (1.7, 2.3));
    let p = records[1].trace.points()[0];
    assert_eq!((p.x, p.y, p.t), (1.0, 0.0, 0.5));
    assert!(records[2].timed_words.is_empty() && records[2].trace.is_empty());
}

#[test]
fn empty_file_gives_no_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    fs::write(&path, "").unwrap();
    assert!(formats::read_narratives(&path).unwrap().is_empty());
}

fn parse_err(body: &str) -> FormatError {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(&path, body).unwrap();
    formats::read_narratives(&path).unwrap_err()
}

#[test]
fn malformed_lines_name_line_and_field() {
    let good = r#"{"image_id":"a","caption":"x","timed_words":[["x",0,1]],"trace":[]}"#;
    let missing = r#"{"image_id":"b","caption":"x","timed_words":[["x",0,1]]}"#;
    match parse_err(&format!("{good}\n{missing}\n")) {
        FormatError::Field { line, field, .. } => assert_eq!((line, field.as_str()), (2, "trace")),
        e => panic!("{e}"),
    }
    let msg = parse_err(&format!("{missing}\n")).to_string();
    assert!(msg.contains("\"trace\"") && msg.contains("line 1"), "{msg}");
    match parse_err(&format!("{good}\n{good}\n")) {
        FormatError::DuplicateId { line, id } => assert_eq!((line, id.as_str()), (2, "a")),
        e => panic!("{e}"),
    }
    let cases = [
        (r#"{"image_id":"a","caption":"x","timed_words":[["x",0,1]],"trace":[[0.1,0.2]]}"#, "trace"),
        (r#"{"image_id":"a","caption":"x","timed_words":[["x",0,1]],"trace":[[0.1,0.2,1],[0.1,0.2,0.5]]}"#, "trace"),
        (r#"{"image_id":"a","caption":"x y","timed_words":[["x",0,1]],"trace":[]}"#, "timed_words"),
        (r#"{"image_id":"a","caption":"x","timed_words":[[1,0,1]],"trace":[]}"#, "timed_words"),
        (r#"{"image_id":"","caption":"x","timed_words":[["x",0,1]],"trace":[]}"#, "image_id"),
        (r#"{"image_id":"a","caption":3,"timed_words":[],"trace":[]}"#, "caption"),
        (r#"{"image_id":"a","caption":"","timed_words":[],"trace":[],"mood":1}"#, "mood"),
    ];
    for (line, want) in cases {
        match parse_err(line) {
            FormatError::Field { field, .. } => assert_eq!(field, want, "{line}"),
            e => panic!("{line}: {e}"),
        }
    }
    assert!(matches!(parse_err("{not json\n"), FormatError::Syntax { line: 1, .. }));
}

#[test]
fn synthetic_narratives_round_trip() {
    let ds = synth();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.jsonl");
    formats::write_narratives(&path, &ds.narratives).unwrap();
    assert_eq!(formats::read_narratives(&path).unwrap(), ds.narratives);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn arbitrary_records_round_trip(
        words in prop::collection::vec(("[a-z]{1,8}", 0.0f64..2.0), 0..6),
        pts in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..1.0), 0..8),
        id in "[a-zA-Z0-9_\\-\"\\\\ é]{1,12}",
    ) {
        use mqir_core::data::{NarrativeRecord, TimedWord};
        use mqir_core::geometry::{MouseTrace, TracePoint};
        let mut t = 0.0;
        let timed_words: Vec<TimedWord> = words.iter().map(|(w, d)| {
            let tw = TimedWord { word: w.clone(), t_start: t, t_end: t + d };
            t += d;
            tw
        }).collect();
        let caption = words.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(" ");
        let mut acc = 0.0;
        let trace = MouseTrace::new(pts.iter().map(|&(x, y, dt)| { acc += dt; TracePoint { x, y, t: acc } }).collect()).unwrap();
        let rec = NarrativeRecord { image_id: id, caption, timed_words, trace };
        let line = formats::narratives::to_line(&rec);
        prop_assert_eq!(formats::narratives::parse_line(&line, 1).unwrap(), rec);
    }
}

#[test]
fn features_round_trip_and_reject_corruption() {
    let ds = synth();
    let dims = FeatureDims { global_dim: 16, region_dim: 16, regions: 4 };
    let bytes = encode_features(&ds.features, dims).unwrap();
    let (got_dims, back) = decode_features(&bytes).unwrap();
    assert_eq!(got_dims, dims);
    assert_eq!(back.len(), ds.features.len());
    for (a, b) in ds.features.iter().zip(&back) {
        assert_eq!((&a.image_id, &a.global), (&b.image_id, &b.global));
        for (ra, rb) in a.regions.iter().zip(&b.regions) {
            assert_eq!((&ra.feature, ra.valid), (&rb.feature, rb.valid));
            // geometry is stored as f32
            for (x, y) in ra.geometry.to_array().iter().zip(rb.geometry.to_array()) {
                assert_eq!(*x as f32, y as f32);
            }
        }
    }
    assert_eq!(encode_features(&back, dims).unwrap(), bytes);

    // header layout: magic, version, D_g, D_r, N
    assert_eq!(&bytes[..4], b"MQIR");
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    assert_eq!([word(0), word(1), word(2), word(3)], [1, 16, 16, 4]);

    assert!(decode_features(&bytes[..bytes.len() - 3]).is_err());
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(decode_features(&wrong_magic), Err(FormatError::Binary { .. })));
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(decode_features(&bad_version), Err(FormatError::Version { version: 9, .. })));
    let wrong_dims = FeatureDims { global_dim: 8, ..dims };
    assert!(encode_features(&ds.features, wrong_dims).is_err());
    assert!(decode_features(&encode_features(&[], dims).unwrap()).unwrap().1.is_empty());
}

fn small_model(mode: QueryMode) -> Model<f32> {
    let cfg = ModelConfig {
        vocab_size: 40,
        d_model: 8,
        image_layers: 1,
        text_layers: 1,
        heads: 2,
        filter: 16,
        embed_hidden: 12,
        pooler_hidden: 12,
        embed_dim: 6,
        global_dim: 16,
        region_dim: 16,
        max_tokens: 8,
        regions: 4,
        query_mode: mode,
        ..ModelConfig::default()
    };
    Model::new(cfg, 11).unwrap()
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let ds = synth();
    for mode in [QueryMode::Text, QueryMode::TextTrace, QueryMode::TraceOnly] {
        let m = small_model(mode);
        let bytes = encode_checkpoint(&m);
        assert_eq!(&bytes[..4], b"MQCK");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back.encode_image(&ds.features).unwrap(), m.encode_image(&ds.features).unwrap());
    }
}

#[test]
fn checkpoint_shapes_are_validated() {
    let m = small_model(QueryMode::TextTrace);
    let bytes = encode_checkpoint(&m);
    // claim a larger vocabulary than the stored embedding table
    let mut cfg = m.config.clone();
    cfg.vocab_size = 41;
    let mismatched = Model { config: cfg, params: m.params.clone() };
    let err = decode_checkpoint(&encode_checkpoint(&mismatched)).unwrap_err();
    assert!(err.to_string().contains("tte.emb"), "{err}");
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
}

#[test]
fn index_and_vocab_round_trip() {
    let ds = synth();
    let m = small_model(QueryMode::Text);
    let prov = Provenance { checkpoint: "abc".into(), features: "def".into() };
    let index = RetrievalIndex::build(&m, &ds.features, 4, prov).unwrap();
    let bytes = encode_index(&index);
    assert_eq!(&bytes[..4], b"MQIX");
    assert_eq!(decode_index(&bytes).unwrap(), index);

    let vocab = build_vocabulary(ds.narratives.iter().map(|r| r.caption.as_str()), 40).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.json");
    formats::write_vocab(&path, &vocab).unwrap();
    assert_eq!(formats::read_vocab(&path).unwrap(), vocab);
    fs::write(&path, r#"{"tokens":["<pad>"],"merges":[],"extra":1}"#).unwrap();
    assert!(formats::read_vocab(&path).is_err());

    let scenes = dir.path().join("s.json");
    formats::write_scenes(&scenes, &ds.scenes).unwrap();
    assert_eq!(formats::read_scenes(&scenes).unwrap(), ds.scenes);
}

#[test]
fn fingerprint_is_fnv1a() {
    // reference values of 64-bit FNV-1a
    assert_eq!(formats::fingerprint(b""), "cbf29ce484222325");
    assert_eq!(formats::fingerprint(b"a"), "af63dc4c8601ec8c");
}
