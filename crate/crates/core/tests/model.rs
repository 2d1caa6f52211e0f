use vlt_core::model::{
    check_parameter_gradients, fuse, language_gate, loss, pick_coordinates, qbm_apply, ForwardOptions, ParamCounts,
    QuerySource, VltConfig, VltParams,
};
use vlt_core::nn::{ParamId, ParamSet, Session};
use vlt_core::tensor::{kernels, Prng, Tensor};

fn model(cfg: &VltConfig, seed: u64) -> (VltParams, ParamSet) {
    VltParams::init(cfg, &mut Prng::new(seed)).unwrap()
}

fn image(cfg: &VltConfig, p: &mut Prng) -> Tensor {
    p.uniform(0.0, 1.0, &[3, cfg.image_height, cfg.image_width]).unwrap()
}

fn tokens(cfg: &VltConfig, len: usize, p: &mut Prng) -> Vec<usize> {
    (0..len).map(|_| 1 + p.below(cfg.vocab_size - 1)).collect()
}

fn zero(set: &mut ParamSet, id: ParamId) {
    let shape = set.get(id).shape().to_vec();
    set.set(id, Tensor::zeros(&shape)).unwrap();
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let data = perm
        .iter()
        .flat_map(|&r| t.data()[r * c..(r + 1) * c].to_vec())
        .collect();
    Tensor::new(t.shape(), data).unwrap()
}

#[test]
fn backbone_shape_and_zero_image() {
    let cfg = VltConfig::micro();
    let (m, set) = model(&cfg, 1);
    let mut s = Session::new(&set);
    let img = s.constant(Tensor::zeros(&[3, 16, 16]));
    let f = m.vision_backbone(&mut s, img).unwrap();
    assert_eq!(s.graph.shape(f), &[8, 4, 4]);
    assert!(s.value(f).data().iter().all(|&v| v == 0.0));
    let bad = s.constant(Tensor::zeros(&[3, 12, 16]));
    assert!(m.vision_backbone(&mut s, bad).is_err());
}

#[test]
fn backbone_is_sum_of_independent_stages() {
    let cfg = VltConfig::small();
    let (m, set) = model(&cfg, 2);
    let img_t = image(&cfg, &mut Prng::new(3));
    let mut s = Session::new(&set);
    let img = s.constant(img_t.clone());
    let f = m.vision_backbone(&mut s, img).unwrap();
    let got = s.value(f).clone();

    // Recompute each stage in its own graph and add with plain loops.
    let (h, w) = (cfg.feature_height(), cfg.feature_width());
    let mut expect = vec![0.0; cfg.channels * h * w];
    for stage in 0..3 {
        let mut s = Session::new(&set);
        let mut x = s.constant(img_t.clone());
        for conv in &m.backbone.convs[..stage + 3] {
            x = conv.forward_relu(&mut s, x).unwrap();
        }
        let p = m.backbone.projections[stage].forward(&mut s, x).unwrap();
        let shape = s.graph.shape(p).to_vec();
        let resized = kernels::resize_nearest(s.value(p).data(), shape[0], (shape[1], shape[2]), (h, w));
        for (e, r) in expect.iter_mut().zip(resized) {
            *e += r;
        }
    }
    let expect = Tensor::new(&[cfg.channels, h, w], expect).unwrap();
    assert!(got.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn language_encoding_pads_and_matches_gru() {
    let cfg = VltConfig::micro();
    let (m, set) = model(&cfg, 4);
    let mut p = Prng::new(5);
    for len in 1..=cfg.max_words {
        let toks = tokens(&cfg, len, &mut p);
        let mut s = Session::new(&set);
        let lang = m.language_encode(&mut s, &toks).unwrap();
        assert_eq!(lang.pad_mask, (0..cfg.max_words).map(|i| i < len).collect::<Vec<_>>());
        let f = s.value(lang.features).clone();
        assert_eq!(f.shape(), &[cfg.max_words, cfg.channels]);
        assert!(f.data()[len * cfg.channels..].iter().all(|&v| v == 0.0));

        let table = s.param(m.embedding);
        let emb = s.graph.gather_rows(table, &toks).unwrap();
        let direct = m.gru.forward(&mut s, emb).unwrap();
        let last = &s.value(direct.per_step).data()[(len - 1) * cfg.channels..len * cfg.channels];
        assert_eq!(s.value(lang.final_state).data(), last);
    }
    let mut s = Session::new(&set);
    assert!(m.language_encode(&mut s, &[]).is_err());
    assert!(m.language_encode(&mut s, &[cfg.vocab_size]).is_err());
    assert!(m.language_encode(&mut s, &vec![1; cfg.max_words + 1]).is_err());
}

#[test]
fn language_gate_cases() {
    let set = ParamSet::new();
    let mut p = Prng::new(6);
    let fv_t = p.uniform(-1.0, 1.0, &[5, 4]).unwrap();
    let mut s = Session::new(&set);
    let fv = s.constant(fv_t.clone());

    let zero = s.constant(Tensor::zeros(&[4]));
    let out = language_gate(&mut s, fv, zero).unwrap();
    assert!(s.value(out).data().iter().all(|&v| v == 0.0));

    let g = s.constant(Tensor::full(&[4], 0.7));
    let out = language_gate(&mut s, fv, g).unwrap();
    let expect = fv_t.map(|v| v * 0.7f64.tanh());
    assert!(s.value(out).bitwise_eq(&expect));

    let gate_t = p.uniform(-2.0, 2.0, &[4]).unwrap();
    let gate = s.constant(gate_t.clone());
    let out = language_gate(&mut s, fv, gate).unwrap();
    for pos in 0..5 {
        for c in 0..4 {
            let e = fv_t.at(&[pos, c]) * gate_t.at(&[c]).tanh();
            assert_eq!(s.value(out).at(&[pos, c]), e);
        }
    }
}

#[test]
fn qgm_vision_prep_rows_are_flattened_channels() {
    let cfg = VltConfig::micro();
    let (m, set) = model(&cfg, 7);
    let mut s = Session::new(&set);
    let raw_t = Prng::new(8).uniform(-1.0, 1.0, &[8, 4, 4]).unwrap();
    let raw = s.constant(raw_t);
    let fvq = m.qgm_vision_prep(&mut s, raw).unwrap();
    assert_eq!(s.graph.shape(fvq), &[cfg.queries, cfg.positions()]);

    let [a, b, c] = &m.qgm.reduce;
    let x = a.forward_relu(&mut s, raw).unwrap();
    let x = b.forward_relu(&mut s, x).unwrap();
    let x = c.forward(&mut s, x).unwrap();
    let conv = s.value(x).clone();
    for n in 0..cfg.queries {
        for pos in 0..cfg.positions() {
            assert_eq!(s.value(fvq).at(&[n, pos]), conv.at(&[n, pos / 4, pos % 4]));
        }
    }

    let z = s.constant(Tensor::zeros(&[8, 4, 4]));
    let fz = m.qgm_vision_prep(&mut s, z).unwrap();
    assert!(s.value(fz).data().iter().all(|&v| v == 0.0));
}

#[test]
fn qgm_attention_rows_and_degenerate_case() {
    let cfg = VltConfig::micro();
    let (m, set) = model(&cfg, 9);
    let mut p = Prng::new(10);
    let mut s = Session::new(&set);
    let fvq = s.constant(p.uniform(-1.0, 1.0, &[cfg.queries, cfg.positions()]).unwrap());
    let ft = s.constant(p.uniform(-1.0, 1.0, &[cfg.max_words, cfg.channels]).unwrap());
    let mask = [true, true, true, false];
    let a = m.qgm_attention(&mut s, fvq, ft, &mask).unwrap();
    for row in s.value(a).data().chunks(cfg.max_words) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(row[3], 0.0);
    }
    let single = m.qgm_attention(&mut s, fvq, ft, &[true, false, false, false]).unwrap();
    for row in s.value(single).data().chunks(cfg.max_words) {
        assert_eq!(row, &[1.0, 0.0, 0.0, 0.0]);
    }
    assert!(m.qgm_attention(&mut s, fvq, ft, &[false; 4]).is_err());
}

#[test]
fn qgm_attention_scalar_hand_case() {
    // 4×4 image: a single feature position. Only the [0,0] entries of W_v
    // and W_a are nonzero, so each score is relu(x·wv)·relu(f_i·wa).
    let cfg = VltConfig {
        image_height: 4,
        image_width: 4,
        queries: 1,
        max_words: 2,
        ..VltConfig::micro()
    };
    let (m, mut set) = model(&cfg, 11);
    let (wv, wa) = (0.8, 1.5);
    let mut wv_t = vec![0.0; cfg.channels];
    wv_t[0] = wv;
    let mut wa_t = vec![0.0; cfg.channels * cfg.channels];
    wa_t[0] = wa;
    set.set(m.qgm.vision.weight, Tensor::new(&[1, cfg.channels], wv_t).unwrap())
        .unwrap();
    set.set(
        m.qgm.words.weight,
        Tensor::new(&[cfg.channels, cfg.channels], wa_t).unwrap(),
    )
    .unwrap();
    let (x, f0, f1) = (1.25, 0.4, -0.3);
    let mut words = vec![0.0; 2 * cfg.channels];
    words[0] = f0;
    words[cfg.channels] = f1;
    let mut s = Session::new(&set);
    let fvq = s.constant(Tensor::new(&[1, 1], vec![x]).unwrap());
    let ft = s.constant(Tensor::new(&[2, cfg.channels], words).unwrap());
    let a = m.qgm_attention(&mut s, fvq, ft, &[true, true]).unwrap();

    let relu = |v: f64| v.max(0.0);
    let scores = [relu(x * wv) * relu(f0 * wa), relu(x * wv) * relu(f1 * wa)];
    let z = scores[0].exp() + scores[1].exp();
    let expect = [scores[0].exp() / z, scores[1].exp() / z];
    for (got, want) in s.value(a).data().iter().zip(expect) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
}

#[test]
fn qgm_queries_selection_and_average() {
    let cfg = VltConfig::micro();
    let (m, set) = model(&cfg, 12);
    let mut s = Session::new(&set);
    let ft = s.constant(Prng::new(13).uniform(-1.0, 1.0, &[4, 8]).unwrap());
    let proj = m.qgm.project.forward(&mut s, ft).unwrap();
    let proj = s.graph.relu(proj).unwrap();
    let projected = s.value(proj).clone();

    let one_hot = s.constant(Tensor::new(&[2, 4], vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
    let q = m.qgm_queries(&mut s, one_hot, ft).unwrap();
    assert_eq!(&s.value(q).data()[..8], &projected.data()[16..24]);
    assert_eq!(&s.value(q).data()[8..], &projected.data()[..8]);

    let uniform = s.constant(Tensor::new(&[1, 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap());
    let q = m.qgm_queries(&mut s, uniform, ft).unwrap();
    for c in 0..8 {
        let mean = 0.5 * projected.at(&[0, c]) + 0.5 * projected.at(&[1, c]);
        assert!((s.value(q).at(&[0, c]) - mean).abs() < 1e-15);
    }
}

#[test]
fn query_sources() {
    let mut p = Prng::new(14);
    let learned = VltConfig {
        query_source: QuerySource::LearnedFixed,
        ..VltConfig::micro()
    };
    let (m, set) = model(&learned, 15);
    let toks = tokens(&learned, 3, &mut p);
    let a = m
        .trace(&set, &image(&learned, &mut p), &toks, ForwardOptions::default())
        .unwrap();
    let b = m
        .trace(&set, &image(&learned, &mut p), &toks, ForwardOptions::default())
        .unwrap();
    assert!(a.queries.bitwise_eq(&b.queries));
    assert!(a.queries.bitwise_eq(set.get(m.learned_queries)));
    assert!(a.word_attention.is_none());

    let words = VltConfig {
        query_source: QuerySource::WordsAsQueries,
        queries: 4,
        ..VltConfig::micro()
    };
    let (m, set) = model(&words, 16);
    let t = m
        .trace(&set, &image(&words, &mut p), &toks, ForwardOptions::default())
        .unwrap();
    assert!(t.queries.bitwise_eq(&t.language));

    let cfg = VltConfig::micro();
    let (m, set) = model(&cfg, 17);
    let img = image(&cfg, &mut p);
    let t = m.trace(&set, &img, &toks, ForwardOptions::default()).unwrap();
    let mut s = Session::new(&set);
    let iv = s.constant(img);
    let raw = m.vision_backbone(&mut s, iv).unwrap();
    let lang = m.language_encode(&mut s, &toks).unwrap();
    let fvq = m.qgm_vision_prep(&mut s, raw).unwrap();
    let att = m.qgm_attention(&mut s, fvq, lang.features, &lang.pad_mask).unwrap();
    let q = m.qgm_queries(&mut s, att, lang.features).unwrap();
    assert!(s.value(q).bitwise_eq(&t.queries));
    assert!(s.value(att).bitwise_eq(t.word_attention.as_ref().unwrap()));
}

#[test]
fn encoder_recomposes_and_is_equivariant_without_positions() {
    let cfg = VltConfig::micro();
    let (m, set) = model(&cfg, 18);
    let x_t = Prng::new(19)
        .uniform(-1.0, 1.0, &[cfg.positions(), cfg.channels])
        .unwrap();
    let mut s = Session::new(&set);
    let x = s.constant(x_t.clone());
    let (mem, _) = m.transformer_encode(&mut s, x, false).unwrap();
    assert_eq!(s.graph.shape(mem), &[cfg.positions(), cfg.channels]);

    let pos = s.constant(m.position_embedding().unwrap());
    let mut y = s.graph.add(x, pos).unwrap();
    for layer in &m.encoder {
        y = layer.forward(&mut s, y).unwrap().output;
    }
    assert!(s.value(y).bitwise_eq(s.value(mem)));

    let perm: Vec<usize> = (0..cfg.positions()).rev().collect();
    let xp = s.constant(permute_rows(&x_t, &perm));
    let (a, _) = m.transformer_encode(&mut s, x, true).unwrap();
    let (b, _) = m.transformer_encode(&mut s, xp, true).unwrap();
    assert!(permute_rows(s.value(a), &perm).max_abs_diff(s.value(b)) < 1e-12);
}

#[test]
fn decoder_shapes_and_query_permutation() {
    let cfg = VltConfig {
        queries: 3,
        ..VltConfig::micro()
    };
    let (m, set) = model(&cfg, 20);
    let mut p = Prng::new(21);
    let q_t = p.uniform(-1.0, 1.0, &[3, 8]).unwrap();
    let mut s = Session::new(&set);
    let q = s.constant(q_t.clone());
    let mem = s.constant(p.uniform(-1.0, 1.0, &[cfg.positions(), 8]).unwrap());
    let r = m.transformer_decode(&mut s, q, mem).unwrap();
    assert_eq!(s.graph.shape(r), &[3, 8]);

    let perm = [2, 0, 1];
    let qp = s.constant(permute_rows(&q_t, &perm));
    let rp = m.transformer_decode(&mut s, qp, mem).unwrap();
    assert!(permute_rows(s.value(r), &perm).max_abs_diff(s.value(rp)) < 1e-12);

    let single = s.constant(p.uniform(-1.0, 1.0, &[1, 8]).unwrap());
    let out = m.decoder[0].forward(&mut s, single, mem).unwrap();
    for w in out.self_attention {
        assert_eq!(s.value(w).data(), &[1.0]);
    }
}

#[test]
fn qbm_confidence_cases() {
    let cfg = VltConfig::micro();
    let (m, mut set) = model(&cfg, 22);
    let mut p = Prng::new(23);
    let (fq, fr) = (
        p.uniform(-1.0, 1.0, &[2, 8]).unwrap(),
        p.uniform(-1.0, 1.0, &[2, 8]).unwrap(),
    );
    {
        let mut s = Session::new(&set);
        let (q, r) = (s.constant(fq.clone()), s.constant(fr.clone()));
        let c = m.qbm_confidence(&mut s, q, r).unwrap();
        assert_eq!(s.graph.shape(c), &[2, 1]);
        assert!(s.value(c).data().iter().all(|&v| v > 0.0 && v < 1.0));

        // Direct evaluation of σ(W₂·relu(W₁·[q‖r] + b₁) + b₂).
        let (w1, w2, b2) = (
            set.get(m.qbm.hidden.weight),
            set.get(m.qbm.out.weight),
            set.get(m.qbm.out.bias),
        );
        for n in 0..2 {
            let joint: Vec<f64> = fq.data()[n * 8..(n + 1) * 8]
                .iter()
                .chain(&fr.data()[n * 8..(n + 1) * 8])
                .copied()
                .collect();
            let mut z = b2.at(&[0]);
            for j in 0..8 {
                let h: f64 = (0..16).map(|i| joint[i] * w1.at(&[i, j])).sum();
                z += h.max(0.0) * w2.at(&[j, 0]);
            }
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!((s.value(c).at(&[n, 0]) - expect).abs() < 1e-14);
        }
    }
    for id in [m.qbm.hidden.weight, m.qbm.hidden.bias, m.qbm.out.weight, m.qbm.out.bias] {
        zero(&mut set, id);
    }
    let mut s = Session::new(&set);
    let (q, r) = (s.constant(fq), s.constant(fr));
    let c = m.qbm_confidence(&mut s, q, r).unwrap();
    assert_eq!(s.value(c).data(), &[0.5, 0.5]);
}

#[test]
fn qbm_apply_cases() {
    let set = ParamSet::new();
    let mut p = Prng::new(24);
    let fr_t = p.uniform(-1.0, 1.0, &[3, 4]).unwrap();
    let c_t = p.uniform(0.0, 1.0, &[3, 1]).unwrap();
    let mut s = Session::new(&set);
    let fr = s.constant(fr_t.clone());
    let ones = s.constant(Tensor::ones(&[3, 1]));
    let out = qbm_apply(&mut s, fr, ones).unwrap();
    assert!(s.value(out).bitwise_eq(&fr_t));
    let half = s.constant(Tensor::full(&[3, 1], 0.5));
    let out = qbm_apply(&mut s, fr, half).unwrap();
    assert!(s.value(out).bitwise_eq(&fr_t.map(|v| v / 2.0)));
    let c = s.constant(c_t.clone());
    let out = qbm_apply(&mut s, fr, c).unwrap();
    for n in 0..3 {
        for j in 0..4 {
            assert_eq!(s.value(out).at(&[n, j]), c_t.at(&[n, 0]) * fr_t.at(&[n, j]));
        }
    }
    let wrong = s.constant(Tensor::ones(&[2, 1]));
    assert!(qbm_apply(&mut s, fr, wrong).is_err());
}

#[test]
fn fusion_zero_and_linearity() {
    let cfg = VltConfig::micro();
    let (m, set) = model(&cfg, 25);
    let mut p = Prng::new(26);
    let (h, w) = (cfg.feature_height(), cfg.feature_width());
    let mut s = Session::new(&set);
    let mem = s.constant(p.uniform(-1.0, 1.0, &[cfg.positions(), cfg.channels]).unwrap());
    let zero_resp = s.constant(Tensor::zeros(&[cfg.queries, cfg.channels]));
    let logits = m.fuse_and_mask_decode(&mut s, zero_resp, mem).unwrap();
    assert_eq!(s.graph.shape(logits), &[cfg.image_height, cfg.image_width]);
    let zero_map = s.constant(Tensor::zeros(&[cfg.channels, h, w]));
    let bias_only = m.mask_decode(&mut s, zero_map).unwrap();
    assert!(s.value(logits).bitwise_eq(s.value(bias_only)));

    let fr = s.constant(p.uniform(-1.0, 1.0, &[cfg.queries, cfg.channels]).unwrap());
    let c_t = p.uniform(0.0, 0.5, &[cfg.queries, 1]).unwrap();
    let c1 = s.constant(c_t.clone());
    let c2 = s.constant(c_t.map(|v| 2.0 * v));
    let b1 = qbm_apply(&mut s, fr, c1).unwrap();
    let b2 = qbm_apply(&mut s, fr, c2).unwrap();
    let f1 = fuse(&mut s, b1, mem, h, w).unwrap();
    let f2 = fuse(&mut s, b2, mem, h, w).unwrap();
    assert!(s.value(f1).map(|v| 2.0 * v).max_abs_diff(s.value(f2)) < 1e-12);
}

#[test]
fn forward_trace_shapes_and_determinism() {
    let cfg = VltConfig::micro();
    let (m, set) = model(&cfg, 27);
    let mut p = Prng::new(28);
    let img = image(&cfg, &mut p);
    let toks = tokens(&cfg, 3, &mut p);
    let opts = ForwardOptions {
        record_attention: true,
        ..Default::default()
    };
    let t = m.trace(&set, &img, &toks, opts).unwrap();
    let (nv, c, nq, nl) = (cfg.positions(), cfg.channels, cfg.queries, cfg.max_words);
    assert_eq!(t.raw_vision.shape(), &[4, 4, c]);
    assert_eq!(t.language.shape(), &[nl, c]);
    assert_eq!(t.final_state.shape(), &[c]);
    assert_eq!(t.vision.shape(), &[nv, c]);
    assert_eq!(t.vision_queries.as_ref().unwrap().shape(), &[nq, nv]);
    assert_eq!(t.word_attention.as_ref().unwrap().shape(), &[nq, nl]);
    assert_eq!(t.queries.shape(), &[nq, c]);
    assert_eq!(t.memory.shape(), &[nv, c]);
    assert_eq!(t.responses.shape(), &[nq, c]);
    assert_eq!(t.confidence.shape(), &[nq, 1]);
    assert_eq!(t.logits.shape(), &[16, 16]);
    assert_eq!(t.encoder_attention.len(), cfg.encoder_layers);
    assert_eq!(t.encoder_attention[0].len(), cfg.heads);
    assert_eq!(t.encoder_attention[0][0].shape(), &[nv, nv]);
    assert_eq!(m.trace(&set, &img, &toks, opts).unwrap(), t);
    // Raw features are reported position-major.
    let mut s = Session::inference(&set);
    let iv = s.constant(img);
    let raw = m.vision_backbone(&mut s, iv).unwrap();
    assert_eq!(t.raw_vision.at(&[1, 2, 3]), s.value(raw).at(&[3, 1, 2]));
}

#[test]
fn unit_confidence_hook_equals_pipeline_without_balance() {
    let cfg = VltConfig::micro();
    let (m, set) = model(&cfg, 29);
    let mut p = Prng::new(30);
    let img = image(&cfg, &mut p);
    let toks = tokens(&cfg, 2, &mut p);
    let hooked = m
        .trace(
            &set,
            &img,
            &toks,
            ForwardOptions {
                unit_confidence: true,
                ..Default::default()
            },
        )
        .unwrap();
    assert!(hooked.confidence.data().iter().all(|&v| v == 1.0));

    let mut s = Session::inference(&set);
    let iv = s.constant(img.clone());
    let raw = m.vision_backbone(&mut s, iv).unwrap();
    let lang = m.language_encode(&mut s, &toks).unwrap();
    let flat = s.graph.reshape(raw, &[cfg.channels, cfg.positions()]).unwrap();
    let fv = s.graph.transpose(flat).unwrap();
    let gated = language_gate(&mut s, fv, lang.final_state).unwrap();
    let (q, _, _) = m.make_queries(&mut s, raw, &lang).unwrap();
    let (mem, _) = m.transformer_encode(&mut s, gated, false).unwrap();
    let r = m.transformer_decode(&mut s, q, mem).unwrap();
    let logits = m.fuse_and_mask_decode(&mut s, r, mem).unwrap();
    assert!(s.value(logits).bitwise_eq(&hooked.logits));

    let off = VltConfig { use_qbm: false, ..cfg };
    let (m_off, set_off) = model(&off, 29);
    assert_eq!(set_off, set);
    let t_off = m_off.trace(&set, &img, &toks, ForwardOptions::default()).unwrap();
    assert!(t_off.logits.bitwise_eq(&hooked.logits));
}

#[test]
fn loss_reaches_every_module() {
    let cfg = VltConfig::micro();
    let (m, set) = model(&cfg, 31);
    let mut p = Prng::new(32);
    let img = image(&cfg, &mut p);
    let toks = tokens(&cfg, 3, &mut p);
    let target = Tensor::new(&[16, 16], (0..256).map(|i| ((i / 16) < 8) as u8 as f64).collect()).unwrap();
    let mut s = Session::new(&set);
    let vars = m.forward(&mut s, &img, &toks, ForwardOptions::default()).unwrap();
    let l = loss(&mut s, vars.logits, &target).unwrap();
    let grads = s.backward_params(l).unwrap();
    let norm = |prefix: &str| -> f64 {
        set.iter()
            .zip(&grads)
            .filter(|((_, n, _), _)| n.starts_with(prefix))
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    };
    for prefix in [
        "qgm.vision.weight",
        "qgm.words.weight",
        "qgm.project.weight",
        "qbm.",
        "mask.",
        "decoder.",
        "encoder.",
        "backbone.",
        "embedding",
        "gru.",
    ] {
        assert!(norm(prefix) > 0.0, "no gradient reaches {prefix}");
    }
    assert_eq!(norm("learned_queries"), 0.0);
    let bad = Tensor::full(&[16, 16], 0.5);
    assert!(loss(&mut s, vars.logits, &bad).is_err());
}

#[test]
fn end_to_end_gradient_check() {
    let cfg = VltConfig::micro();
    for trial in 0..5 {
        let mut p = Prng::derive(33, trial);
        let (m, set) = VltParams::init(&cfg, &mut p).unwrap();
        let img = image(&cfg, &mut p);
        let len = 1 + p.below(cfg.max_words);
        let toks = tokens(&cfg, len, &mut p);
        let target = Tensor::new(&[16, 16], (0..256).map(|_| (p.next_f64() < 0.3) as u8 as f64).collect()).unwrap();
        let coords = pick_coordinates(&set, 20, &mut p);
        let checks = check_parameter_gradients(&m, &set, &img, &toks, &target, &coords, 1e-3, 4).unwrap();
        for c in &checks {
            assert!(c.rel_error < 1e-3, "{c:?}");
        }
    }
}

#[test]
fn parameter_counts() {
    let cfg = VltConfig::default();
    let (_, set) = VltParams::layout(&cfg).unwrap();
    let counts = ParamCounts::of(&set);
    assert!(counts.attention > 0 && counts.attention < counts.total);
    let c = cfg.channels;
    let mha = 4 * (c * c + c);
    let ffn = c * 4 * c + 4 * c + 4 * c * c + c;
    let enc = mha + ffn + 4 * c;
    let dec = 2 * mha + ffn + 6 * c;
    let qgm = (c * c * 9 + c)
        + (c * c / 2 * 9 + c / 2)
        + (c / 2 * cfg.queries + cfg.queries)
        + (cfg.positions() * c + c)
        + 2 * (c * c + c);
    let qbm = (2 * c * c + c) + (c + 1);
    assert_eq!(counts.attention, 2 * enc + 2 * dec + qgm + qbm);
}
