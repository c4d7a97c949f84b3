use bytelift_core::merge_tools::{
    reset_embeddings_check, spectrum_report, task_arithmetic_merge, MergeError, WeightDelta,
};
use bytelift_core::model::{
    init_byte_lm, init_teacher, GlobalConfig, MlstmConfig, ModelConfig, ParamStore,
};
use bytelift_core::numerics::Tensor;
use bytelift_core::tokenization::{train_bpe, SubwordVocab};
use bytelift_core::training::{TeacherTrainer, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const DOCS: &[&str] = &[
    "the sun sets over the sunflower bed.",
    "a lighthouse stands by the sea and the light turns.",
    "the flowerbed lies under the old sunlight.",
];

fn vocab() -> SubwordVocab {
    train_bpe(DOCS, 290).vocab
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

fn jitter(p: &ParamStore, seed: u64, scale: f64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = p.clone();
    for (_, t) in out.iter_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-scale..scale);
        }
    }
    out
}

fn bits(p: &ParamStore, global: bool) -> Vec<(String, Vec<u64>)> {
    p.iter()
        .filter(|(n, _)| n.starts_with("global.") == global)
        .map(|(n, t)| {
            (
                n.to_string(),
                t.data().iter().map(|x| x.to_bits()).collect(),
            )
        })
        .collect()
}

fn scalar_store(pairs: &[(&str, f64)]) -> ParamStore {
    let mut s = ParamStore::new();
    for &(n, v) in pairs {
        s.insert(n, Tensor::vector(vec![v]));
    }
    s
}

#[test]
fn scalar_merge() {
    let byte = scalar_store(&[("global.0.w", 3.0), ("encoder.0.w", 7.0)]);
    let base = scalar_store(&[("global.0.w", 2.0), ("embed", 1.0)]);
    let post = scalar_store(&[("global.0.w", 5.0), ("embed", 9.0)]);
    let m = task_arithmetic_merge(&byte, &base, &post).unwrap();
    assert_eq!(m.get("global.0.w").unwrap().item(), 6.0);
    assert_eq!(m.get("encoder.0.w").unwrap().item(), 7.0);
    assert!(!m.contains("embed"));
}

#[test]
fn zero_delta_is_bit_exact_identity_and_locals_never_change() {
    let v = vocab();
    let cfg = tiny(&v);
    let base = init_teacher(&cfg, 1).unwrap();
    let byte = jitter(&init_byte_lm(&cfg, &base, false, 2).unwrap(), 3, 0.2);
    assert_eq!(task_arithmetic_merge(&byte, &base, &base).unwrap(), byte);
    let post = jitter(&base, 4, 0.1);
    let merged = task_arithmetic_merge(&byte, &base, &post).unwrap();
    assert_eq!(bits(&merged, false), bits(&byte, false));
    assert_ne!(bits(&merged, true), bits(&byte, true));
    let delta = WeightDelta::between(&base, &post).unwrap();
    assert!(delta.tensors.keys().all(|n| n.starts_with("global.")));
    assert_eq!(
        delta.tensors.len(),
        base.names().filter(|n| n.starts_with("global.")).count()
    );
}

#[test]
fn merging_onto_the_base_global_model_gives_the_posttrained_one() {
    let v = vocab();
    let cfg = tiny(&v);
    let base = init_teacher(&cfg, 5).unwrap();
    let byte = init_byte_lm(&cfg, &base, false, 6).unwrap();
    let post = jitter(&base, 7, 0.1);
    let merged = task_arithmetic_merge(&byte, &base, &post).unwrap();
    for (n, t) in merged.iter().filter(|(n, _)| n.starts_with("global.")) {
        let (p, b) = (post.get(n).unwrap(), base.get(n).unwrap());
        for ((m, p), b) in t.data().iter().zip(p.data()).zip(b.data()) {
            assert!((m - p).abs() <= f64::EPSILON * p.abs().max(b.abs()), "{n}");
        }
    }
}

proptest! {
    // Values on a coarse dyadic grid add without rounding, so the inverse is exact.
    #[test]
    fn merge_then_unmerge_is_exact_on_representable_sums(
        a in prop::collection::vec(-1_000_000i64..1_000_000, 6),
        d in prop::collection::vec(-1_000_000i64..1_000_000, 6),
    ) {
        let to = |xs: &[i64]| Tensor::vector(xs.iter().map(|&x| x as f64 / 1024.0).collect());
        let mut byte = ParamStore::new();
        byte.insert("global.0.w", to(&a));
        byte.insert("decoder.0.w", to(&d));
        let mut base = ParamStore::new();
        base.insert("global.0.w", Tensor::zeros(&[6]));
        let mut post = ParamStore::new();
        post.insert("global.0.w", to(&d));
        let delta = WeightDelta::between(&base, &post).unwrap();
        let back = delta.apply(&delta.apply(&byte, 1.0).unwrap(), -1.0).unwrap();
        prop_assert_eq!(bits(&back, true), bits(&byte, true));
        prop_assert_eq!(bits(&back, false), bits(&byte, false));
    }

    #[test]
    fn merge_then_unmerge_is_within_rounding_in_general(
        a in prop::collection::vec(-10.0f64..10.0, 6),
        d in prop::collection::vec(-10.0f64..10.0, 6),
    ) {
        let mut byte = ParamStore::new();
        byte.insert("global.0.w", Tensor::vector(a.clone()));
        let mut base = ParamStore::new();
        base.insert("global.0.w", Tensor::zeros(&[6]));
        let mut post = ParamStore::new();
        post.insert("global.0.w", Tensor::vector(d.clone()));
        let delta = WeightDelta::between(&base, &post).unwrap();
        let back = delta.apply(&delta.apply(&byte, 1.0).unwrap(), -1.0).unwrap();
        for ((x, y), dx) in back.get("global.0.w").unwrap().data().iter().zip(&a).zip(&d) {
            prop_assert!((x - y).abs() <= 2.0 * f64::EPSILON * (y.abs() + dx.abs()));
        }
    }
}

#[test]
fn merge_rejects_mismatched_checkpoints() {
    let byte = scalar_store(&[("global.0.w", 3.0)]);
    let base = scalar_store(&[("global.0.w", 2.0), ("global.1.w", 1.0)]);
    let post = scalar_store(&[("global.0.w", 5.0)]);
    assert_eq!(
        task_arithmetic_merge(&byte, &base, &post).unwrap_err(),
        MergeError::MissingName("global.1.w".into())
    );
    let both = scalar_store(&[("global.0.w", 5.0), ("global.1.w", 1.0)]);
    assert!(matches!(
        task_arithmetic_merge(&byte, &base, &both),
        Err(MergeError::MissingName(_))
    ));
    let mut wide = ParamStore::new();
    wide.insert("global.0.w", Tensor::zeros(&[2]));
    assert!(matches!(
        task_arithmetic_merge(&byte, &scalar_store(&[("global.0.w", 2.0)]), &wide),
        Err(MergeError::Shape { .. })
    ));
}

#[test]
fn resetting_embeddings_of_an_unchanged_model_is_neutral() {
    let v = vocab();
    let cfg = tiny(&v);
    let base = init_teacher(&cfg, 8).unwrap();
    let r = reset_embeddings_check(&cfg, &v, &base, &base, DOCS, 64).unwrap();
    assert_eq!(r.ratio(), 1.0);
}

#[test]
fn resetting_after_a_brief_fine_tune_stays_near_one() {
    let v = vocab();
    let cfg = tiny(&v);
    let init = init_teacher(&cfg, 9).unwrap();
    let train = |p: ParamStore, docs: &[&str], steps: usize, lr: f64| {
        let tc = TrainConfig {
            steps,
            batch_size: 2,
            warmup_steps: 1,
            lr,
            max_bytes: 64,
            ..Default::default()
        };
        let mut t = TeacherTrainer::new(&cfg, tc, p, &v, docs).unwrap();
        t.run(|_| {}).unwrap();
        t.params
    };
    let base = train(init, DOCS, 60, 1e-2);
    let post = train(base.clone(), &DOCS[1..2], 5, 1e-3);
    let r = reset_embeddings_check(&cfg, &v, &base, &post, DOCS, 64).unwrap();
    assert!(r.ratio() > 0.95 && r.ratio() < 1.1, "{r:?}");
}

#[test]
fn spectrum_of_rank_one_and_identity() {
    let u = [1.0, -2.0, 0.5];
    let w = [3.0, 1.0, 0.0, 2.0];
    let m = Tensor::matrix(
        3,
        4,
        u.iter()
            .flat_map(|a| w.iter().map(move |b| a * b))
            .collect(),
    );
    let r = spectrum_report(&m).unwrap();
    assert!((r.ratios[0] - 1.0).abs() < 1e-12);
    assert!(r.ratios[1..].iter().all(|x| x.abs() < 1e-12));
    assert_eq!(r.rank_for(0.99), 1);
    let id = spectrum_report(&Tensor::identity(5)).unwrap();
    assert!(id.ratios.iter().all(|x| (x - 0.2).abs() < 1e-12));
    assert!((id.cumulative[4] - 1.0).abs() < 1e-12);
    let table = id.to_table();
    assert_eq!(table.lines().count(), 6);
    assert!(table.starts_with("index\tsingular_value\tratio\tcumulative"));
}

#[test]
fn spectrum_rejects_degenerate_input() {
    assert!(spectrum_report(&Tensor::zeros(&[3, 3])).is_err());
    assert!(spectrum_report(&Tensor::zeros(&[0, 3])).is_err());
    assert!(spectrum_report(&Tensor::matrix(1, 2, vec![f64::NAN, 1.0])).is_err());
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn spectrum_matches_gram_eigenvalue_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for &(rows, cols) in &[(12, 5), (6, 6), (20, 9)] {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let m = Tensor::matrix(rows, cols, data.clone());
        let gram: Vec<Vec<f64>> = (0..cols)
            .map(|i| {
                (0..cols)
                    .map(|j| {
                        (0..rows)
                            .map(|r| data[r * cols + i] * data[r * cols + j])
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let ev = jacobi_eigenvalues(gram);
        let total: f64 = ev.iter().sum();
        let r = spectrum_report(&m).unwrap();
        assert_eq!(r.ratios.len(), cols);
        for (i, e) in ev.iter().enumerate() {
            assert!((r.ratios[i] - e / total).abs() < 1e-8);
            assert!((r.singular_values[i] - e.max(0.0).sqrt()).abs() < 1e-8);
        }
    }
}
