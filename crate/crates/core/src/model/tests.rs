use super::*;
use crate::data::{build_vocabulary, generate_synthetic, tokenize_aligned, SynthConfig};
use crate::geometry::TraceBox;
use crate::numerics::finite_difference_check;
use alloc::vec;
use rand::seq::SliceRandom;

fn tiny_config(mode: QueryMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        d_model: 8,
        image_layers: 1,
        text_layers: 1,
        heads: 2,
        filter: 16,
        embed_hidden: 12,
        pooler_hidden: 12,
        embed_dim: 6,
        dropout: 0.1,
        global_dim: 16,
        region_dim: 16,
        max_tokens: 8,
        regions: 4,
        query_mode: mode,
        use_positions: true,
        use_locations: true,
        init_std: 0.3,
    }
}

fn sample(batch: usize, k: usize) -> (Vec<FeatureRecord>, Vec<QueryInput>) {
    let ds = generate_synthetic(&SynthConfig { scenes: 8, regions: 4, feature_dim: 16, ..Default::default() }).unwrap();
    let vocab = build_vocabulary(ds.narratives.iter().map(|r| r.caption.as_str()), 40).unwrap();
    let queries = ds.narratives[..batch]
        .iter()
        .map(|r| QueryInput::build(&tokenize_aligned(r, &vocab), Some(&r.trace), k, 0.1, 0.05))
        .collect();
    (ds.features[..batch].to_vec(), queries)
}

fn set_zero<T: Real>(m: &mut Model<T>, name: &str) {
    let id = m.params.find(name).unwrap();
    m.params.get_mut(id).value.values_mut().iter_mut().for_each(|v| *v = T::zero());
}

fn row(a: &Array<f64>, i: usize) -> &[f64] {
    let n = a.dims2().1;
    &a.values()[i * n..(i + 1) * n]
}

fn param_row(m: &Model<f64>, name: &str, i: usize) -> Vec<f64> {
    let p = &m.params.get(m.params.find(name).unwrap()).value;
    row(p, i).to_vec()
}

#[test]
fn similarity_is_a_dot_product() {
    assert_eq!(similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 32.0);
    assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    let u = [0.6, 0.8];
    assert!((similarity(&u, &u).unwrap() - 1.0f64).abs() < 1e-15);
    assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn parameter_sets_follow_mode_and_ablations() {
    let names = |cfg: &ModelConfig| parameter_specs(cfg).into_iter().map(|(n, _, _)| n).collect::<Vec<_>>();
    let text = names(&tiny_config(QueryMode::Text));
    assert!(!text.iter().any(|n| n.starts_with("tbe.")));
    let trace_only = names(&tiny_config(QueryMode::TraceOnly));
    assert!(!trace_only.iter().any(|n| n.starts_with("tte.")));
    let mut cfg = tiny_config(QueryMode::TextTrace);
    cfg.use_positions = false;
    cfg.use_locations = false;
    let ablated = names(&cfg);
    assert!(!ablated.iter().any(|n| n.ends_with(".pos") || n.starts_with("ire.loc")));
}

#[test]
fn zero_ire_mlp_gives_zero_outputs() {
    let (images, _) = sample(2, 8);
    let mut m = Model::<f64>::new(tiny_config(QueryMode::TextTrace), 1).unwrap();
    set_zero(&mut m, "ire.w2");
    let out = m.embed_image_regions(&images).unwrap();
    assert_eq!(out.dims2(), (2 * 5, 8));
    assert!(out.values().iter().all(|&v| v == 0.0));
}

#[test]
fn geometry_changes_region_embedding() {
    let (mut images, _) = sample(1, 8);
    let m = Model::<f64>::new(tiny_config(QueryMode::TextTrace), 2).unwrap();
    images[0].regions[1].feature = images[0].regions[0].feature.clone();
    images[0].regions[1].geometry = TraceBox::from_corners(0.6, 0.6, 0.9, 0.9);
    images[0].regions[0].geometry = TraceBox::from_corners(0.0, 0.0, 0.2, 0.3);
    let out = m.embed_image_regions(&images).unwrap();
    let diff: f64 = row(&out, 1).iter().zip(row(&out, 2)).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6);
}

#[test]
fn zero_token_path_leaves_position_embedding() {
    let (_, queries) = sample(1, 8);
    let mut m = Model::<f64>::new(tiny_config(QueryMode::TextTrace), 3).unwrap();
    set_zero(&mut m, "tte.w2");
    set_zero(&mut m, "tbe.w2");
    let tte = m.embed_text_tokens(&queries).unwrap();
    let tbe = m.embed_trace_boxes(&queries).unwrap();
    for i in 0..8 {
        assert_eq!(row(&tte, i), param_row(&m, "tte.pos", i).as_slice());
        assert_eq!(row(&tbe, i), param_row(&m, "tbe.pos", i).as_slice());
    }
}

#[test]
fn position_embeddings_are_additive() {
    let m = Model::<f64>::new(tiny_config(QueryMode::TextTrace), 4).unwrap();
    let mut q = QueryInput::dummy(8);
    q.token_ids[0] = 7;
    q.token_ids[5] = 7;
    let tte = m.embed_text_tokens(core::slice::from_ref(&q)).unwrap();
    let (p0, p5) = (param_row(&m, "tte.pos", 0), param_row(&m, "tte.pos", 5));
    for j in 0..8 {
        let got = row(&tte, 5)[j] - row(&tte, 0)[j];
        assert!((got - (p5[j] - p0[j])).abs() < 1e-12);
    }
    let tbe = m.embed_trace_boxes(core::slice::from_ref(&q)).unwrap();
    let (p0, p3) = (param_row(&m, "tbe.pos", 0), param_row(&m, "tbe.pos", 3));
    for j in 0..8 {
        let got = row(&tbe, 3)[j] - row(&tbe, 0)[j];
        assert!((got - (p3[j] - p0[j])).abs() < 1e-12);
    }
    q.boxes[3] = TraceBox::from_corners(0.1, 0.1, 0.4, 0.5);
    q.boxes[0] = q.boxes[3];
    q.boxes[0].xmax = 0.9;
    let tbe = m.embed_trace_boxes(core::slice::from_ref(&q)).unwrap();
    let p0 = param_row(&m, "tbe.pos", 0);
    let box0: Vec<f64> = row(&tbe, 0).iter().zip(&p0).map(|(a, p)| a - p).collect();
    let box3: Vec<f64> = row(&tbe, 3).iter().zip(&p3).map(|(a, p)| a - p).collect();
    assert!(box0.iter().zip(&box3).any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn image_tower_ignores_region_order() {
    let (images, _) = sample(2, 8);
    let m = Model::<f32>::new(tiny_config(QueryMode::TextTrace), 5).unwrap();
    let base = m.encode_image(&images).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let mut shuffled = images.clone();
        for img in &mut shuffled {
            img.regions.shuffle(&mut rng);
        }
        assert!(m.encode_image(&shuffled).unwrap().max_abs_diff(&base) <= 1e-5);
    }
}

#[test]
fn masked_padding_does_not_move_either_tower() {
    let (images, queries) = sample(2, 8);
    let m = Model::<f32>::new(tiny_config(QueryMode::TextTrace), 6).unwrap();
    let img = m.encode_image(&images).unwrap();
    let qry = m.encode_query(&queries).unwrap();

    let mut wider = m.clone();
    wider.config.regions += 1;
    let padded: Vec<FeatureRecord> = images
        .iter()
        .map(|f| {
            let mut f = f.clone();
            f.regions.push(crate::data::Region { feature: vec![3.0; 16], geometry: TraceBox::WHOLE, valid: false });
            f
        })
        .collect();
    assert!(wider.encode_image(&padded).unwrap().max_abs_diff(&img) <= 1e-6);

    // scribble into PAD slots without changing K
    let mut noisy = queries.clone();
    for q in &mut noisy {
        for i in q.real_tokens()..8 {
            q.token_ids[i] = 5;
            q.boxes[i] = TraceBox::from_corners(0.2, 0.2, 0.3, 0.3);
        }
    }
    assert!(m.encode_query(&noisy).unwrap().max_abs_diff(&qry) <= 1e-6);
}

#[test]
fn swapping_tokens_changes_query() {
    let (_, queries) = sample(1, 8);
    let m = Model::<f32>::new(tiny_config(QueryMode::TextTrace), 7).unwrap();
    let base = m.encode_query(&queries).unwrap();
    let mut swapped = queries.clone();
    swapped[0].token_ids.swap(0, 1);
    assert_ne!(swapped[0].token_ids, queries[0].token_ids);
    assert!(m.encode_query(&swapped).unwrap().max_abs_diff(&base) > 1e-3);
}

#[test]
fn text_mode_ignores_boxes() {
    let (_, queries) = sample(2, 8);
    let m = Model::<f32>::new(tiny_config(QueryMode::Text), 8).unwrap();
    let base = m.encode_query(&queries).unwrap();
    let mut other = queries.clone();
    for q in &mut other {
        q.boxes.iter_mut().for_each(|b| *b = TraceBox::from_corners(0.5, 0.5, 0.6, 0.7));
    }
    assert_eq!(m.encode_query(&other).unwrap(), base);
}

#[test]
fn forward_scores_match_encoders_and_loss() {
    let (images, queries) = sample(3, 8);
    let m = Model::<f64>::new(tiny_config(QueryMode::TextTrace), 9).unwrap();
    let mut pass = m.forward(&images, &queries, None).unwrap();
    let outs = pass.graph.evaluate(&m.params, &[]).unwrap();
    let img = m.encode_image(&images).unwrap();
    let qry = m.encode_query(&queries).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let s = similarity(row(&img, i), row(&qry, j)).unwrap();
            assert!((outs["scores"].get(i, j) - s).abs() < 1e-12);
        }
    }
    let loss = contrastive_loss(&outs["scores"]).unwrap();
    assert!((outs["loss"].values()[0] - loss).abs() < 1e-12);
}

#[test]
fn dropout_only_with_rng() {
    let (images, queries) = sample(2, 8);
    let m = Model::<f32>::new(tiny_config(QueryMode::TextTrace), 10).unwrap();
    let eval = |rng: Option<&mut ChaCha8Rng>| {
        let mut p = m.forward(&images, &queries, rng).unwrap();
        p.graph.evaluate(&m.params, &[]).unwrap()["scores"].clone()
    };
    let a = eval(None);
    assert_eq!(a, eval(None));
    let b = eval(Some(&mut ChaCha8Rng::seed_from_u64(1)));
    assert_ne!(a, b);
    assert_eq!(b, eval(Some(&mut ChaCha8Rng::seed_from_u64(1))));
}

#[test]
fn init_is_seeded_per_name() {
    let a = Model::<f32>::new(tiny_config(QueryMode::TextTrace), 11).unwrap();
    let b = Model::<f32>::new(tiny_config(QueryMode::Text), 11).unwrap();
    let c = Model::<f32>::new(tiny_config(QueryMode::TextTrace), 12).unwrap();
    let get = |m: &Model<f32>, n: &str| m.params.get(m.params.find(n).unwrap()).value.clone();
    assert_eq!(get(&a, "tte.emb"), get(&b, "tte.emb"));
    assert_ne!(get(&a, "tte.emb"), get(&c, "tte.emb"));
    let ln = get(&a, "image.layer0.ln1.gamma");
    assert!(ln.values().iter().all(|&v| v == 1.0));
}

#[test]
fn rejects_bad_inputs() {
    let (images, mut queries) = sample(2, 8);
    let m = Model::<f32>::new(tiny_config(QueryMode::TextTrace), 13).unwrap();
    queries[0].token_ids[0] = 99;
    assert!(matches!(m.encode_query(&queries), Err(ModelError::TokenOutOfRange { id: 99, vocab: 40 })));
    queries[0].boxes.pop();
    assert!(matches!(m.encode_query(&queries), Err(ModelError::Dimension { .. })));
    let mut short = images.clone();
    short[1].global.pop();
    assert!(matches!(m.encode_image(&short), Err(ModelError::Input(_))));
    assert!(matches!(m.encode_image(&[]), Err(ModelError::EmptyBatch)));
    let mut cfg = tiny_config(QueryMode::Text);
    cfg.heads = 3;
    assert!(matches!(Model::<f32>::new(cfg, 0), Err(ModelError::Config(_))));
}

#[test]
fn from_params_checks_every_tensor() {
    let m = Model::<f32>::new(tiny_config(QueryMode::TextTrace), 14).unwrap();
    assert!(Model::from_params(m.config.clone(), m.params.clone()).is_ok());
    let mut cfg = m.config.clone();
    cfg.embed_dim = 7;
    assert!(matches!(Model::from_params(cfg, m.params.clone()), Err(ModelError::Dimension { .. })));
    let text_only = Model::<f32>::new(tiny_config(QueryMode::Text), 14).unwrap();
    assert!(matches!(
        Model::from_params(m.config.clone(), text_only.params),
        Err(ModelError::MissingParam(n)) if n.starts_with("tbe.")
    ));
}

#[test]
fn small_model_passes_gradient_check() {
    let (images, queries) = sample(2, 8);
    for mode in [QueryMode::TextTrace, QueryMode::Text, QueryMode::TraceOnly] {
        let mut m = Model::<f64>::new(tiny_config(mode), 15).unwrap();
        let mut pass = m.forward(&images, &queries, None).unwrap();
        let report = finite_difference_check(&mut pass.graph, &mut m.params, pass.loss, &[], 1e-5, 1e-3).unwrap();
        let worst = report.failures().map(|c| (c.name.clone(), c.max_rel_error)).collect::<Vec<_>>();
        assert!(report.pass, "{mode:?}: {worst:?}");
    }
}
