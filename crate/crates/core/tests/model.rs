use bytelift_core::model::{
    boundary_scores, depool, depool_index, init_byte_lm, init_teacher, lm_head, pool_ends,
    pool_last, predicted_mask, Bound, BoundaryMode, ByteLm, Component, FusedSymbol, GlobalConfig,
    GlobalSource, MlstmConfig, ModelConfig, ParamStore, SubwordLm, FUSED_VOCAB,
};
use bytelift_core::numerics::{finite_difference_check, Graph, NumericsError, Tensor, Var};
use bytelift_core::tokenization::{
    subword_boundary_mask, train_bpe, BoundaryMask, SubwordVocab, SuffixIndex,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vocab() -> SubwordVocab {
    train_bpe(
        &["the flower bed and the flowerbed by the bed of the sun"],
        270,
    )
    .vocab
}

fn tiny(v: &SubwordVocab) -> ModelConfig {
    ModelConfig {
        d: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        mlstm: MlstmConfig {
            heads: 2,
            qk_dim: 2,
            v_dim: 3,
            gate_soft_cap: 15.0,
            input_gate_bias_init: -10.0,
        },
        ffn_expansion: 1.5,
        global: GlobalConfig {
            layers: 2,
            heads: 2,
            head_dim: 4,
            rope_base: 10000.0,
        },
        subword_vocab: v.len(),
        n_probe: 1,
        boundary_threshold: 0.5,
        norm_eps: 1e-6,
    }
}

/// Initialised stores with every tensor jittered, so zero-initialised pieces
/// also carry signal.
fn stores(cfg: &ModelConfig, seed: u64) -> (ParamStore, ParamStore) {
    let teacher = init_teacher(cfg, seed).unwrap();
    let mut p = init_byte_lm(cfg, &teacher, false, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for (_, t) in p.iter_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    (teacher, p)
}

fn logp_rows(g: &Graph, v: Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn run(
    p: &ParamStore,
    m: &ByteLm,
    x: &[u8],
    mask: Option<&BoundaryMask>,
    mode: BoundaryMode,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, BoundaryMask) {
    let mut g = Graph::no_grad();
    let b = Bound::bind(&mut g, p, |_| false);
    let out = m
        .forward(&mut g, &b, x, mask, mode, GlobalSource::Pooled)
        .unwrap();
    (logp_rows(&g, out.e_hat), logp_rows(&g, out.logp), out.mask)
}

#[test]
fn fused_symbol_is_bijective() {
    for v in 0..512u16 {
        let s = FusedSymbol(v);
        assert_eq!(FusedSymbol::new(s.byte(), s.has_boundary()), s);
    }
    assert_eq!(FusedSymbol(256 + 65).byte(), b'A');
    assert!(FusedSymbol(256 + 65).has_boundary());
}

#[test]
fn embedding_is_sum_of_byte_and_suffix_rows() {
    let v = vocab();
    let cfg = tiny(&v);
    let idx = SuffixIndex::new(&v);
    let (_, mut p) = stores(&cfg, 1);
    let m = ByteLm::new(&cfg, &idx, v.bos());
    let x = b"the";
    let mut g = Graph::no_grad();
    let b = Bound::bind(&mut g, &p, |_| false);
    let e = m.embed(&mut g, &b, x, 0).unwrap();
    let be = p.get("byte_embed").unwrap();
    let se = p.get("subword_embed").unwrap();
    let e = g.value(e);
    for c in 0..cfg.d {
        assert_eq!(e.at(0, c), be.at(256, c) + se.at(v.bos() as usize, c));
    }
    for i in 0..3 {
        let s = idx.longest_suffix_token(x, i) as usize;
        for c in 0..cfg.d {
            assert_eq!(e.at(i + 1, c), be.at(x[i] as usize, c) + se.at(s, c));
        }
    }
    // Repeated byte, different suffix tokens.
    let tok = v
        .iter_tokens()
        .map(|(_, t)| t.to_vec())
        .find(|t| t.len() > 1)
        .unwrap();
    let mut y = vec![*tok.last().unwrap()];
    y.extend(&tok);
    let last = y.len() - 1;
    assert_ne!(
        idx.longest_suffix_token(&y, 0),
        idx.longest_suffix_token(&y, last)
    );
    let ey = m.embed(&mut g, &b, &y, 0).unwrap();
    assert_ne!(g.value(ey).row(1), g.value(ey).row(last + 1));

    // A zero suffix table leaves only the byte rows.
    let zeros = Tensor::zeros(p.get("subword_embed").unwrap().shape());
    p.insert("subword_embed", zeros);
    let mut g = Graph::no_grad();
    let b = Bound::bind(&mut g, &p, |_| false);
    let e = m.embed(&mut g, &b, x, 0).unwrap();
    assert_eq!(
        g.value(e).row(2),
        p.get("byte_embed").unwrap().row(b'h' as usize)
    );
}

#[test]
fn encoder_is_causal_and_length_one_is_history_free() {
    let v = vocab();
    let cfg = tiny(&v);
    let idx = SuffixIndex::new(&v);
    let (_, p) = stores(&cfg, 3);
    let m = ByteLm::new(&cfg, &idx, v.bos());
    let x = b"the flowerbed".to_vec();
    let (ea, la, _) = run(
        &p,
        &m,
        &x,
        Some(&BoundaryMask::new(vec![true; x.len()])),
        BoundaryMode::NonCausal,
    );
    for t in 0..x.len() {
        let mut y = x.clone();
        y[t] = b'#';
        let (eb, lb, _) = run(
            &p,
            &m,
            &y,
            Some(&BoundaryMask::new(vec![true; y.len()])),
            BoundaryMode::NonCausal,
        );
        // Byte t is at position t + 1.
        for s in 0..=t {
            assert_eq!(ea[s], eb[s], "encoder position {s} saw byte {t}");
        }
        assert_ne!(ea[t + 1], eb[t + 1]);
        // Logit row r predicts byte r from bytes before it.
        for r in 0..=t {
            assert_eq!(la[r], lb[r], "logit row {r} saw byte {t}");
        }
    }
    let (e1, _, _) = run(&p, &m, b"t", None, BoundaryMode::NonCausal);
    let (e2, _, _) = run(&p, &m, b"t", None, BoundaryMode::NonCausal);
    assert_eq!(e1, e2);
    assert_eq!(e1.len(), 2);
}

#[test]
fn full_model_has_one_byte_of_lookahead_with_predicted_boundaries() {
    let v = vocab();
    let cfg = tiny(&v);
    let idx = SuffixIndex::new(&v);
    let (_, mut p) = stores(&cfg, 4);
    // Random projections put roughly half the positions over the threshold.
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for name in ["boundary.wq", "boundary.wk"] {
        for w in p.get_mut(name).unwrap().data_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
    }
    let m = ByteLm::new(&cfg, &idx, v.bos());
    let x = b"the sun and the flower bed".to_vec();
    let (_, la, ma) = run(&p, &m, &x, None, BoundaryMode::NonCausal);
    assert!(ma.popcount() > 1 && ma.popcount() < x.len());
    let mut differs_early = false;
    for t in 1..x.len() {
        let mut y = x.clone();
        y[t] = b'z';
        let (_, lb, mb) = run(&p, &m, &y, None, BoundaryMode::NonCausal);
        for r in 0..t {
            assert_eq!(la[r], lb[r], "row {r} changed when byte {t} changed");
        }
        differs_early |= ma.flags[t - 1] != mb.flags[t - 1];
    }
    // The boundary after byte t-1 does look at byte t.
    assert!(differs_early);
}

#[test]
fn boundary_scores_follow_cosine() {
    let v = vocab();
    let cfg = tiny(&v);
    let (_, mut p) = stores(&cfg, 5);
    p.insert("boundary.wq", Tensor::identity(cfg.d));
    p.insert("boundary.wk", Tensor::identity(cfg.d));
    let mut rows = vec![0.0; 5 * cfg.d];
    let base: Vec<f64> = (0..cfg.d).map(|i| (i as f64 - 3.0) * 0.5).collect();
    let orth2: Vec<f64> = (0..cfg.d)
        .map(|i| if i % 2 == 1 { 1.0 } else { 0.0 })
        .collect();
    // Rows: BOS, a, 2a (parallel), -2a (antiparallel), then orth pairs.
    let neg: Vec<f64> = base.iter().map(|x| -2.0 * x).collect();
    let dbl: Vec<f64> = base.iter().map(|x| 2.0 * x).collect();
    for (r, row) in [&orth2, &base, &dbl, &neg, &orth2].iter().enumerate() {
        rows[r * cfg.d..(r + 1) * cfg.d].copy_from_slice(row);
    }
    let e = Tensor::matrix(5, cfg.d, rows);
    let mut g = Graph::no_grad();
    let b = Bound::bind(&mut g, &p, |_| false);
    let ev = g.constant(e);
    let s = boundary_scores(&mut g, &b, ev, BoundaryMode::NonCausal)
        .unwrap()
        .unwrap();
    let s = g.value(s).data().to_vec();
    // Free positions 1..=3 compare (ê2, ê1), (ê3, ê2), (ê4, ê3).
    assert!(s[0].abs() < 1e-12);
    assert!((s[1] - 1.0).abs() < 1e-12);
    let c = {
        let dot: f64 = neg.iter().zip(&orth2).map(|(a, b)| a * b).sum();
        let na: f64 = neg.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = orth2.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    assert!((s[2] - 0.5 * (1.0 - c)).abs() < 1e-12);
    let causal = boundary_scores(&mut g, &b, ev, BoundaryMode::Causal)
        .unwrap()
        .unwrap();
    let causal = g.value(causal).data().to_vec();
    // Causal position 2 compares (ê2, ê1): parallel.
    assert!(causal[1].abs() < 1e-12);

    // Orthogonal pair scores one half.
    let mut g = Graph::no_grad();
    let b = Bound::bind(&mut g, &p, |_| false);
    let mut rows = orth2.clone();
    rows.extend(&orth2);
    rows.extend((0..cfg.d).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }));
    let ev = g.constant(Tensor::matrix(3, cfg.d, rows));
    let s = boundary_scores(&mut g, &b, ev, BoundaryMode::NonCausal)
        .unwrap()
        .unwrap();
    assert!((g.value(s).item() - 0.5).abs() < 1e-12);
}

#[test]
fn predicted_mask_thresholds_and_forces_last() {
    let m = predicted_mask(&[0.9, 0.2, 0.51], 4, 0.5);
    assert_eq!(m.flags, vec![true, false, true, true]);
    assert_eq!(predicted_mask(&[], 1, 0.5).flags, vec![true]);
}

#[test]
fn pooling_and_depooling_examples() {
    // Byte mask [F,T,F,T] pools the BOS pseudo-patch then bytes 1 and 3.
    let mask = BoundaryMask::new(vec![false, true, false, true]);
    assert_eq!(pool_ends(&mask), vec![0, 2, 4]);
    let mut g = Graph::no_grad();
    let rows = Tensor::matrix(4, 1, vec![10.0, 11.0, 12.0, 13.0]);
    let r = g.constant(rows.clone());
    let h = pool_last(&mut g, r, &[1, 3]).unwrap();
    assert_eq!(g.value(h).data(), &[11.0, 13.0]);
    let all = pool_last(&mut g, r, &[0, 1, 2, 3]).unwrap();
    assert_eq!(g.value(all), &rows);
    let last = pool_last(&mut g, r, &[3]).unwrap();
    assert_eq!(g.value(last).data(), &[13.0]);
    assert!(pool_last(&mut g, r, &[]).is_err());

    // Patches ending at 1 and 3: position 0 precedes every end, positions
    // 1 and 2 see patch 0, position 3 sees patch 1.
    assert_eq!(depool_index(4, &[1, 3]), vec![0, 1, 1, 2]);
    assert_eq!(depool_index(4, &[0, 1, 2, 3]), vec![1, 2, 3, 4]);

    let v = vocab();
    let cfg = tiny(&v);
    let (_, p) = stores(&cfg, 6);
    let mut g = Graph::no_grad();
    let b = Bound::bind(&mut g, &p, |_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let e: Vec<f64> = (0..4 * cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let hh: Vec<f64> = (0..2 * cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ev = g.constant(Tensor::matrix(4, cfg.d, e.clone()));
    let hv = g.constant(Tensor::matrix(2, cfg.d, hh.clone()));
    let z = depool(&mut g, &b, ev, hv, &[1, 3]).unwrap();
    let w = p.get("depool_proj").unwrap();
    let sv = p.get("start_vector").unwrap();
    for j in 0..4 {
        let ctx: Vec<f64> = match j {
            0 => sv.data().to_vec(),
            1 | 2 => hh[..cfg.d].to_vec(),
            _ => hh[cfg.d..].to_vec(),
        };
        for c in 0..cfg.d {
            let proj: f64 = (0..cfg.d).map(|i| e[j * cfg.d + i] * w.at(i, c)).sum();
            assert!((g.value(z).at(j, c) - proj - ctx[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn global_model_is_causal_over_patches_and_probe_zero_is_identity() {
    let v = vocab();
    let cfg = tiny(&v);
    let idx = SuffixIndex::new(&v);
    let (_, p) = stores(&cfg, 7);
    let m = ByteLm::new(&cfg, &idx, v.bos());
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let h: Vec<f64> = (0..5 * cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fwd = |h: &[f64]| {
        let mut g = Graph::no_grad();
        let b = Bound::bind(&mut g, &p, |_| false);
        let hv = g.constant(Tensor::matrix(5, cfg.d, h.to_vec()));
        let out = m.global(&mut g, &b, hv, 0, None).unwrap();
        let probe0 = m.global_probe(&mut g, &b, hv, 0).unwrap();
        assert_eq!(g.value(probe0).data(), h);
        logp_rows(&g, out)
    };
    let base = fwd(&h);
    for k in 0..5 {
        let mut h2 = h.clone();
        h2[k * cfg.d] += 1.0;
        let out = fwd(&h2);
        for j in 0..k {
            assert_eq!(base[j], out[j]);
        }
        assert_ne!(base[k], out[k]);
    }
}

#[test]
fn fused_head_normalises_and_uniform_logits_give_log_512() {
    let v = vocab();
    let cfg = tiny(&v);
    let (_, mut p) = stores(&cfg, 8);
    let mut g = Graph::no_grad();
    let b = Bound::bind(&mut g, &p, |_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let z = g.constant(Tensor::matrix(
        3,
        cfg.d,
        (0..3 * cfg.d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    ));
    let lp = lm_head(&mut g, &cfg, &b, z).unwrap();
    for r in 0..3 {
        let row = g.value(lp).row(r);
        assert_eq!(row.len(), FUSED_VOCAB);
        let total: f64 = row.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let byte_a: f64 = row[b'a' as usize].exp() + row[256 + b'a' as usize].exp();
        assert!(byte_a > 0.0 && byte_a < 1.0);
    }
    p.insert("lm_head.weight", Tensor::zeros(&[cfg.d, FUSED_VOCAB]));
    p.insert("lm_head.bias", Tensor::zeros(&[FUSED_VOCAB]));
    let mut g = Graph::no_grad();
    let b = Bound::bind(&mut g, &p, |_| false);
    let z = g.constant(Tensor::matrix(1, cfg.d, vec![0.5; cfg.d]));
    let lp = lm_head(&mut g, &cfg, &b, z).unwrap();
    for &x in g.value(lp).data() {
        assert!((x + 512f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn forward_shapes_and_determinism() {
    let v = vocab();
    let cfg = tiny(&v);
    let idx = SuffixIndex::new(&v);
    let (_, p) = stores(&cfg, 9);
    let m = ByteLm::new(&cfg, &idx, v.bos());
    let x = b"the flower bed";
    let mask = subword_boundary_mask(&v, x);
    let mut g = Graph::no_grad();
    let b = Bound::bind(&mut g, &p, |_| false);
    let out = m
        .forward(
            &mut g,
            &b,
            x,
            Some(&mask),
            BoundaryMode::NonCausal,
            GlobalSource::Pooled,
        )
        .unwrap();
    assert_eq!(g.value(out.pooled).rows(), mask.popcount() + 1);
    assert_eq!(g.value(out.logp).shape(), &[x.len(), FUSED_VOCAB]);
    assert_eq!(g.value(out.scores.unwrap()).rows(), x.len() - 1);
    let a = run(&p, &m, x, None, BoundaryMode::NonCausal);
    let c = run(&p, &m, x, None, BoundaryMode::NonCausal);
    assert_eq!(a, c);
    // Same seed, same initial parameters.
    assert_eq!(stores(&cfg, 9).1, p);
}

#[test]
fn teacher_scores_match_its_log_probs() {
    let v = vocab();
    let cfg = tiny(&v);
    let (t, _) = stores(&cfg, 10);
    let lm = SubwordLm::new(&cfg, &t, &v).unwrap();
    let x = b"the flowerbed by the sun";
    let out = lm.outputs(x).unwrap();
    assert_eq!(out.hidden.len(), cfg.global.layers + 1);
    let mask = subword_boundary_mask(&v, x);
    use bytelift_core::boundary_supervision::AuxLm;
    let scores = lm.patch_scores(x, &mask).unwrap();
    let lps = out.token_logprobs();
    assert_eq!(scores.len(), mask.popcount());
    for (s, lp) in scores.iter().zip(&lps) {
        assert!((s.cross_entropy + lp).abs() < 1e-12);
        assert!(s.entropy >= 0.0 && s.entropy <= (v.len() as f64).ln() + 1e-9);
    }
    let mut g = Graph::no_grad();
    let b = Bound::bind(&mut g, &t, |_| false);
    let nll = SubwordLm::nll_graph(&mut g, &cfg, &b, &out.ids).unwrap();
    let want = -lps.iter().sum::<f64>() / lps.len() as f64;
    assert!((g.value(nll).item() - want).abs() < 1e-12);
    assert!(lm
        .patch_scores(x, &BoundaryMask::new(vec![true; x.len()]))
        .is_err());
}

#[test]
fn local_parameter_count_is_stable() {
    let v = vocab();
    let cfg = tiny(&v);
    let local = |p: &ParamStore| {
        p.num_params(|n| {
            matches!(
                Component::of(n),
                Some(
                    Component::Encoder
                        | Component::Decoder
                        | Component::Boundary
                        | Component::DepoolProj
                        | Component::LmHead
                )
            )
        })
    };
    let a = local(&stores(&cfg, 11).1);
    let b = local(&stores(&cfg, 12).1);
    assert_eq!(a, b);
    let d = cfg.d;
    let (h, qk, vd) = (2, 4, 6);
    let f = cfg.ffn_hidden();
    let block = d + 2 * d * qk + 2 * d * vd + d * 2 * h + 2 * h + vd + vd * d + d + 3 * d * f;
    let want = 2 * block + 2 * d * d + d * d + d + d * FUSED_VOCAB + FUSED_VOCAB;
    assert_eq!(a, want);
}

fn check_point(p: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    p.iter()
        .filter(|(n, _)| *n != "byte_embed" && *n != "subword_embed")
        .map(|(n, t)| (n.to_string(), t.clone()))
        .unzip()
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let v = vocab();
    let cfg = tiny(&v);
    let idx = SuffixIndex::new(&v);
    let (_, p) = stores(&cfg, 13);
    let m = ByteLm::new(&cfg, &idx, v.bos());
    let x = b"the be";
    let mask = BoundaryMask::new(vec![false, false, true, false, true, true]);
    let (names, point) = check_point(&p);
    let emb = p.get("byte_embed").unwrap().clone();
    let sub = p.get("subword_embed").unwrap().clone();
    let f = |g: &mut Graph<'_>, vars: &[Var]| -> Result<Var, NumericsError> {
        let err = |e: bytelift_core::model::ModelError| NumericsError::Invalid(e.to_string());
        let eb = g.constant(emb.clone());
        let sb = g.constant(sub.clone());
        let mut pairs: Vec<(String, Var)> =
            names.iter().cloned().zip(vars.iter().copied()).collect();
        pairs.push(("byte_embed".into(), eb));
        pairs.push(("subword_embed".into(), sb));
        let b = Bound::from_pairs(pairs);
        let out = m
            .forward(
                g,
                &b,
                x,
                Some(&mask),
                BoundaryMode::NonCausal,
                GlobalSource::Pooled,
            )
            .map_err(err)?;
        let w = g.constant(Tensor::new(
            g.value(out.logp).shape().to_vec(),
            (0..x.len() * FUSED_VOCAB)
                .map(|i| ((i * 13 % 7) as f64 - 3.0) / 50.0)
                .collect(),
        )?);
        let a = g.mul(out.logp, w)?;
        let a = g.sum_all(a)?;
        let s = g.sum_all(out.scores.unwrap())?;
        g.add(a, s)
    };
    let r = finite_difference_check(f, &point, 1e-5, 1e-4).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn fixed_source_blocks_encoder_gradient_through_depool() {
    let v = vocab();
    let cfg = tiny(&v);
    let idx = SuffixIndex::new(&v);
    let (_, p) = stores(&cfg, 14);
    let m = ByteLm::new(&cfg, &idx, v.bos());
    let x = b"the bed";
    let mask = subword_boundary_mask(&v, x);
    let fixed = Tensor::full(&[mask.popcount() + 1, cfg.d], 0.25);
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &p, |n| {
        n.starts_with("encoder") || n.starts_with("decoder")
    });
    let out = m
        .forward(
            &mut g,
            &b,
            x,
            Some(&mask),
            BoundaryMode::NonCausal,
            GlobalSource::Fixed(&fixed),
        )
        .unwrap();
    let loss = g.sum_all(out.logp).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(b.get("decoder.0.wq").unwrap()).is_some());
    assert!(grads.get(b.get("encoder.0.wq").unwrap()).is_none());
}
