use nalgebra::DMatrix;
use spikekit_core::attention::MapKind;
use spikekit_core::hybrid::{AttentionKind, FfnKind, LayerSpec, LayoutKind};
use spikekit_core::math::rel_err;
use spikekit_core::model::{
    argmax, build_model, convert_from_softmax, linear_fit, BranchCache, ConversionPlan, Ffn, GateKind, LaNorm, Model,
    ModelConfig, MoeSettings,
};
use spikekit_core::moe::scaling_factor;
use spikekit_core::proj::Mode;
use spikekit_core::Error;

fn small(cfg: ModelConfig) -> ModelConfig {
    cfg.with_dims(32, 2, 64, 64)
}

fn tokens(seed: u64, n: usize, vocab: usize) -> Vec<u32> {
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 33) % vocab as u64) as u32
        })
        .collect()
}

fn families() -> Vec<(&'static str, ModelConfig)> {
    let mut sinks = small(ModelConfig::uniform(AttentionKind::Fa, 2));
    for s in &mut sinks.layout {
        s.sink_count = 3;
    }
    let mut window = small(ModelConfig::toy(LayoutKind::InterLayer, 4).unwrap());
    window.window = 5;
    for s in &mut window.layout {
        if s.window.is_some() {
            s.window = Some(5);
        }
    }
    let mut key_tied = small(ModelConfig::uniform(AttentionKind::La, 2));
    key_tied.gate = GateKind::KeyTied;
    let mut sum_norm = small(ModelConfig::uniform(AttentionKind::La, 2));
    sum_norm.la_norm = LaNorm::Sum;
    sum_norm.chunk = 4;
    let mut ungated = small(ModelConfig::uniform(AttentionKind::La, 2));
    ungated.gate = GateKind::None;
    vec![
        ("inter_layer", small(ModelConfig::toy(LayoutKind::InterLayer, 4).unwrap())),
        ("intra_layer", small(ModelConfig::toy(LayoutKind::IntraLayer, 8).unwrap())),
        ("pure_la", small(ModelConfig::uniform(AttentionKind::La, 3))),
        ("pure_fa", small(ModelConfig::uniform(AttentionKind::Fa, 3))),
        ("pure_swa", small(ModelConfig::uniform(AttentionKind::Swa, 2))),
        ("fa_sinks", sinks),
        ("short_window", window),
        ("key_tied", key_tied),
        ("sum_norm", sum_norm),
        ("ungated", ungated),
    ]
}

#[test]
fn same_seed_same_parameters() {
    let cfg = small(ModelConfig::toy(LayoutKind::IntraLayer, 8).unwrap());
    let a = build_model(cfg.clone(), 7).unwrap();
    let b = build_model(cfg.clone(), 7).unwrap();
    assert_eq!(a, b);
    let c = build_model(cfg, 8).unwrap();
    assert_ne!(a.embed, c.embed);
}

#[test]
fn inter_layer_depth_four() {
    let m = build_model(small(ModelConfig::toy(LayoutKind::InterLayer, 4).unwrap()), 0).unwrap();
    let kinds: Vec<_> = m.layers.iter().map(|l| l.spec.attention).collect();
    assert_eq!(kinds, [AttentionKind::La, AttentionKind::Swa, AttentionKind::La, AttentionKind::Swa]);
}

#[test]
fn inconsistent_dims_rejected() {
    let mut cfg = small(ModelConfig::uniform(AttentionKind::La, 2));
    cfg.d_head = 15;
    assert!(matches!(build_model(cfg, 0), Err(Error::Config(_))));
    let mut cfg = small(ModelConfig::uniform(AttentionKind::La, 2));
    cfg.depth = 3;
    assert!(build_model(cfg, 0).is_err());
    let mut cfg = small(ModelConfig::toy(LayoutKind::IntraLayer, 4).unwrap());
    cfg.moe = None;
    assert!(build_model(cfg, 0).is_err());
}

#[test]
fn token_out_of_range() {
    let m = build_model(small(ModelConfig::uniform(AttentionKind::La, 2)), 0).unwrap();
    assert_eq!(m.prefill(&[1, 64]).unwrap_err(), Error::TokenOutOfRange { token: 64, vocab: 64 });
    assert_eq!(m.prefill(&[]).unwrap_err(), Error::EmptyInput);
}

#[test]
fn prefill_then_decode_matches_batch_prefill() {
    for (name, cfg) in families() {
        let m = build_model(cfg, 3).unwrap();
        for n in [1usize, 7, 19] {
            let toks = tokens(n as u64, n + 3, 64);
            let (_, mut cache) = m.prefill(&toks[..n]).unwrap();
            for j in n..n + 3 {
                let step = m.decode_step(toks[j], &mut cache).unwrap();
                let (batch, _) = m.prefill(&toks[..=j]).unwrap();
                let e = rel_err(step.data(), batch.data());
                assert!(e <= 1e-5, "{name}: n={n} j={j} rel err {e}");
            }
        }
    }
}

#[test]
fn logits_are_deterministic() {
    for (name, cfg) in families() {
        let m = build_model(cfg, 4).unwrap();
        let toks = tokens(9, 12, 64);
        let a = m.prefill(&toks).unwrap().0;
        let b = m.prefill(&toks).unwrap().0;
        assert_eq!(a, b, "{name}");
        assert!(a.is_finite());
    }
}

#[test]
fn every_layout_is_causal() {
    for depth in 2..=8 {
        for kind in [LayoutKind::InterLayer, LayoutKind::IntraLayer] {
            let mut cfg = small(ModelConfig::toy(kind, depth).unwrap());
            cfg.chunk = 3;
            let m = build_model(cfg, depth as u64).unwrap();
            let toks = tokens(depth as u64, 10, 64);
            let mut other = toks.clone();
            other[6] = (other[6] + 1) % 64;
            let a = m.logits_all(&toks, &mut Mode::float()).unwrap();
            let b = m.logits_all(&other, &mut Mode::float()).unwrap();
            for r in 0..6 {
                assert_eq!(a.row(r), b.row(r), "depth {depth} {kind:?} row {r}");
            }
            assert_ne!(a.row(6), b.row(6));
        }
    }
}

fn branch_cache_bytes(m: &Model, n: usize) -> usize {
    let toks = tokens(1, n, 64);
    m.prefill(&toks).unwrap().1.nbytes()
}

#[test]
fn linear_cache_is_constant() {
    let m = build_model(small(ModelConfig::uniform(AttentionKind::La, 2)), 0).unwrap();
    assert_eq!(branch_cache_bytes(&m, 64), branch_cache_bytes(&m, 4096));
    let (_, mut cache) = m.prefill(&tokens(2, 4, 64)).unwrap();
    let before = cache.nbytes();
    for t in 0..200 {
        m.decode_step(t % 64, &mut cache).unwrap();
        assert_eq!(cache.nbytes(), before);
    }
}

#[test]
fn window_cache_holds_min_n_w() {
    let m = build_model(small(ModelConfig::uniform(AttentionKind::Swa, 2)), 0).unwrap();
    let w = m.config.window;
    for n in [1usize, 5, w, w + 1, 3 * w] {
        let (_, cache) = m.prefill(&tokens(3, n, 64)).unwrap();
        for lc in &cache.layers {
            let BranchCache::Kv(kv) = &lc.branches[0] else { panic!("expected kv cache") };
            assert_eq!(kv.entries(), n.min(w));
        }
    }
    let (_, mut cache) = m.prefill(&tokens(3, 2, 64)).unwrap();
    for t in 0..(2 * w as u32) {
        m.decode_step(t % 64, &mut cache).unwrap();
        let BranchCache::Kv(kv) = &cache.layers[0].branches[0] else { panic!() };
        assert_eq!(kv.entries(), (t as usize + 3).min(w));
    }
}

#[test]
fn full_cache_grows_one_pair_per_step() {
    let m = build_model(small(ModelConfig::uniform(AttentionKind::Fa, 2)), 0).unwrap();
    let (_, mut cache) = m.prefill(&tokens(4, 5, 64)).unwrap();
    let pair = 2 * m.config.heads * m.config.d_head * 4 * m.layers.len();
    let mut prev = cache.nbytes();
    for t in 0..20 {
        m.decode_step(t, &mut cache).unwrap();
        assert_eq!(cache.nbytes() - prev, pair);
        prev = cache.nbytes();
    }
}

#[test]
fn memory_laws_over_lengths() {
    let la = build_model(small(ModelConfig::uniform(AttentionKind::La, 2)), 0).unwrap();
    let swa = build_model(small(ModelConfig::uniform(AttentionKind::Swa, 2)), 0).unwrap();
    let fa = build_model(small(ModelConfig::uniform(AttentionKind::Fa, 2)), 0).unwrap();
    let ns = [64usize, 256, 1024];
    let la_b: Vec<usize> = ns.iter().map(|&n| branch_cache_bytes(&la, n)).collect();
    assert!(la_b.iter().all(|&b| b == la_b[0]));
    let swa_b: Vec<usize> = ns.iter().map(|&n| branch_cache_bytes(&swa, n)).collect();
    let per_entry = 2 * 32 * 4 * 2;
    assert!(swa_b.iter().all(|&b| b == swa.config.window * per_entry));
    let fa_b: Vec<f64> = ns.iter().map(|&n| branch_cache_bytes(&fa, n) as f64).collect();
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let fit = linear_fit(&xs, &fa_b).unwrap();
    assert!(fit.r2 >= 0.999);
    assert_eq!(fit.slope, per_entry as f64);
}

fn softmax_source(seed: u64) -> Model {
    build_model(small(ModelConfig::uniform(AttentionKind::Fa, 3)), seed).unwrap()
}

#[test]
fn covering_window_conversion_is_exact() {
    let src = softmax_source(5);
    let plan = ConversionPlan {
        layout: vec![LayerSpec::new(AttentionKind::Swa, FfnKind::Dense).with_window(64); 3],
        gate: GateKind::LowRank,
        la_norm: LaNorm::Rms,
        moe: None,
        merge: Default::default(),
        seed: 1,
    };
    let (dst, summary) = convert_from_softmax(&src, &plan).unwrap();
    assert!(summary.layers.iter().all(|l| l.new_params == 0 && l.to == AttentionKind::Swa));
    for p in 0..10 {
        let toks = tokens(100 + p, 20 + p as usize * 4, 64);
        assert_eq!(src.prefill(&toks).unwrap().0, dst.prefill(&toks).unwrap().0);
        let a = src.logits_all(&toks, &mut Mode::float()).unwrap();
        let b = dst.logits_all(&toks, &mut Mode::float()).unwrap();
        assert_eq!(a, b);
    }
}

fn numerical_rank(rows: usize, cols: usize, data: &[f32]) -> usize {
    let m = DMatrix::from_fn(rows, cols, |i, j| data[i * cols + j] as f64);
    let sv = m.svd(false, false).singular_values;
    let tol = sv.max() * rows.max(cols) as f64 * 1e-6;
    sv.iter().filter(|&&s| s > tol).count()
}

#[test]
fn linear_conversion_maps_are_nonnegative_and_low_rank() {
    let src = softmax_source(6);
    let plan = ConversionPlan {
        layout: vec![LayerSpec::new(AttentionKind::La, FfnKind::Dense); 3],
        gate: GateKind::LowRank,
        la_norm: LaNorm::Rms,
        moe: None,
        merge: Default::default(),
        seed: 2,
    };
    let (dst, summary) = convert_from_softmax(&src, &plan).unwrap();
    let d_head = dst.config.d_head;
    assert!(summary.layers.iter().all(|l| l.new_params > 0));
    let toks = tokens(7, 40, 64);
    for layer in 0..3 {
        for map in dst.attention_maps(&toks, layer).unwrap() {
            assert_eq!(map.kind, MapKind::Linear);
            assert!(map.a.data().iter().all(|&x| x >= 0.0));
        }
        let (inp, gate) = dst.branch_inputs(&toks, layer, 0).unwrap();
        assert!(gate.is_some());
        let (heads, n, d) = inp.q.dims3().unwrap();
        for h in 0..heads {
            let q = &inp.q.data()[h * n * d..(h + 1) * n * d];
            let k = &inp.k.data()[h * n * d..(h + 1) * n * d];
            let mut sim = vec![0.0f32; n * n];
            for i in 0..n {
                for j in 0..n {
                    sim[i * n + j] = (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum();
                }
            }
            assert!(numerical_rank(n, n, &sim) <= d_head);
        }
        // projections are shared verbatim with the source
        assert_eq!(dst.layers[layer].branches[0].wq.w, src.layers[layer].branches[0].wq.w);
    }
}

#[test]
fn moe_conversion_upcycles_source_ffn() {
    let src = softmax_source(8);
    let plan = ConversionPlan {
        layout: vec![
            LayerSpec::new(AttentionKind::LaSwa, FfnKind::Moe).with_window(8),
            LayerSpec::new(AttentionKind::LaSwa, FfnKind::Dense).with_window(8),
            LayerSpec::new(AttentionKind::LaFa, FfnKind::Moe).with_sinks(2),
        ],
        gate: GateKind::KeyTied,
        la_norm: LaNorm::Rms,
        moe: Some(MoeSettings { experts: 4, top_k: 1, shared: 1, ..Default::default() }),
        merge: Default::default(),
        seed: 3,
    };
    let (dst, summary) = convert_from_softmax(&src, &plan).unwrap();
    let f = scaling_factor(4, 1, 1).unwrap();
    assert!((f - 0.9283).abs() < 1e-4);
    assert_eq!(summary.layers[0].scaling_factor, Some(f));
    assert_eq!(summary.layers[1].scaling_factor, None);
    for i in [0, 2] {
        let (Ffn::Dense(dense), Ffn::Moe(moe)) = (&src.layers[i].ffn, &dst.layers[i].ffn) else { panic!() };
        assert_eq!(moe.experts.len(), 4);
        assert_eq!(moe.shared.len(), 1);
        for e in moe.experts.iter().chain(&moe.shared) {
            assert_eq!(e, &dense.scaled(f as f32));
        }
    }
    let toks = tokens(9, 16, 64);
    let (logits, mut cache) = dst.prefill(&toks).unwrap();
    assert!(logits.is_finite());
    dst.decode_step(argmax(&logits), &mut cache).unwrap();
}

#[test]
fn conversion_rejects_mismatched_plans() {
    let src = softmax_source(9);
    let plan = ConversionPlan {
        layout: vec![LayerSpec::new(AttentionKind::La, FfnKind::Dense); 2],
        gate: GateKind::None,
        la_norm: LaNorm::Rms,
        moe: None,
        merge: Default::default(),
        seed: 0,
    };
    assert!(convert_from_softmax(&src, &plan).is_err());
    let hybrid = build_model(small(ModelConfig::uniform(AttentionKind::La, 2)), 0).unwrap();
    let plan2 = ConversionPlan { layout: vec![LayerSpec::new(AttentionKind::La, FfnKind::Dense); 2], ..plan };
    assert!(convert_from_softmax(&hybrid, &plan2).is_err());
}

#[test]
fn cache_from_other_model_rejected() {
    let a = build_model(small(ModelConfig::uniform(AttentionKind::La, 2)), 0).unwrap();
    let b = build_model(small(ModelConfig::uniform(AttentionKind::Fa, 2)), 0).unwrap();
    let (_, mut cache) = a.prefill(&[1, 2]).unwrap();
    assert_eq!(b.decode_step(3, &mut cache).unwrap_err(), Error::CacheMismatch);
    let c = build_model(small(ModelConfig::uniform(AttentionKind::La, 3)), 0).unwrap();
    assert_eq!(c.decode_step(3, &mut cache).unwrap_err(), Error::CacheMismatch);
}

#[test]
fn param_names_are_unique_and_counted() {
    let m = build_model(small(ModelConfig::toy(LayoutKind::IntraLayer, 8).unwrap()), 0).unwrap();
    let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert!(m.param_count() > 0);
}
