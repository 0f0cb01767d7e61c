use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;

fn mini_dims() -> MilDims {
    MilDims {
        input_dim: 4,
        hidden_dim: 5,
        embed_dim: 3,
        key_dim: 3,
        patient_hidden_dim: 4,
    }
}

fn random_bag(id: &str, n: usize, d: usize, label: u8, seed: u64) -> Bag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Bag::new(id, Tensor::new(vec![n, d], data).unwrap(), label).unwrap()
}

fn gaussian_bags(count: usize, d: usize, seed: u64) -> Vec<Bag> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    (0..count)
        .map(|i| {
            let label = (i % 2) as u8;
            let mean = if label == 1 { 1.0 } else { -1.0 };
            let n = 4 + i % 3;
            let data = (0..n * d).map(|_| mean + noise.sample(&mut rng)).collect();
            Bag::new(format!("c{i}"), Tensor::new(vec![n, d], data).unwrap(), label).unwrap()
        })
        .collect()
}

#[test]
fn zero_model_projects_to_zero() {
    let m = MilModel::zeros(MilDims::new(6));
    let bag = random_bag("a", 3, 6, 1, 1);
    let e = project_patches(&m, &bag).unwrap();
    assert_eq!(e.shape(), &[3, 128]);
    assert!(e.data().iter().all(|&v| v == 0.0));
    let single = random_bag("b", 1, 6, 0, 2);
    assert_eq!(project_patches(&m, &single).unwrap().shape(), &[1, 128]);
}

#[test]
fn hand_set_projection() {
    let dims = MilDims {
        input_dim: 2,
        hidden_dim: 2,
        embed_dim: 2,
        key_dim: 2,
        patient_hidden_dim: 2,
    };
    let mut m = MilModel::zeros(dims);
    m.set_param("patch_projector.0.weight", &[1.0, 0.0, 0.0, 1.0]).unwrap();
    m.set_param("patch_projector.0.bias", &[0.0, -1.0]).unwrap();
    m.set_param("patch_projector.1.weight", &[2.0, 0.0, 1.0, 1.0]).unwrap();
    m.set_param("patch_projector.1.bias", &[0.5, 0.0]).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 3.0], vec![-1.0, 0.5]]).unwrap();
    let e = project_patches(&m, &Bag::new("h", x, 0).unwrap()).unwrap();
    assert_eq!(e.data(), &[4.5, 2.0, 0.5, 0.0]);
}

#[test]
fn width_mismatch_names_both_widths() {
    let m = MilModel::zeros(MilDims::new(6));
    let err = project_patches(&m, &random_bag("a", 2, 5, 0, 0)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("D=6") && msg.contains("D=5"), "{msg}");
}

#[test]
fn singleton_and_identical_attention() {
    let m = MilModel::new(mini_dims(), 3);
    let e = Tensor::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap();
    let (z, a) = mil_attention(&m, &e).unwrap();
    assert_eq!(a, vec![1.0]);
    let tape = Tape::new();
    let p = m.params().bind_frozen(&tape);
    let v = m.value.forward(&p, tape.constant(&e)).unwrap();
    for (x, y) in z.iter().zip(v.data().iter()) {
        assert!((x - y).abs() < 1e-15);
    }

    let same = Tensor::from_rows(&vec![vec![0.1, 0.2, 0.3]; 5]).unwrap();
    let (_, a) = mil_attention(&m, &same).unwrap();
    assert!(a.iter().all(|&x| (x - 0.2).abs() < 1e-12));
}

#[test]
fn attention_uses_own_query_key_product() {
    let dims = MilDims {
        input_dim: 1,
        hidden_dim: 1,
        embed_dim: 1,
        key_dim: 1,
        patient_hidden_dim: 1,
    };
    let mut m = MilModel::zeros(dims);
    m.set_param("query.weight", &[1.0]).unwrap();
    m.set_param("key.weight", &[1.0]).unwrap();
    m.set_param("value.weight", &[1.0]).unwrap();
    let e = Tensor::from_rows(&[vec![2f64.sqrt()], vec![0.0]]).unwrap();
    let (z, a) = mil_attention(&m, &e).unwrap();
    assert!((a[0] - 0.880797).abs() < 1e-6, "{a:?}");
    assert!((a[1] - 0.119203).abs() < 1e-6);
    assert!((z[0] - a[0] * 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn classifier_bias_limits() {
    let mut m = MilModel::zeros(MilDims::new(3));
    let z = vec![0.7; 128];
    assert_eq!(classify_core(&m, &z).unwrap(), 0.5);
    m.set_param("classifier.bias", &[10.0]).unwrap();
    assert!((classify_core(&m, &z).unwrap() - 0.9999546).abs() < 1e-7);
    m.set_param("classifier.bias", &[-10.0]).unwrap();
    assert!((classify_core(&m, &z).unwrap() - 4.5398e-5).abs() < 1e-8);
}

#[test]
fn bce_examples() {
    assert!(bce_loss(&[1.0], &[1]).unwrap() < 2e-7);
    let ln2 = std::f64::consts::LN_2;
    assert!((bce_loss(&[0.5], &[1]).unwrap() - ln2).abs() < 1e-12);
    assert!((bce_loss(&[0.5, 0.5], &[1, 0]).unwrap() - ln2).abs() < 1e-12);
    assert!(matches!(
        bce_loss(&[0.5], &[1, 0]),
        Err(MilError::LengthMismatch { .. })
    ));
    assert!(bce_loss(&[0.0], &[1]).unwrap().is_finite());
}

#[test]
fn tape_bce_matches_plain() {
    let preds = [0.2, 0.9, 1.0, 0.0];
    let labels = [0u8, 1, 0, 1];
    let tape = Tape::new();
    let vars: Vec<_> = preds.iter().map(|&p| tape.constant_data(vec![1, 1], vec![p]).unwrap()).collect();
    let l = bce_loss_var(&tape, &vars, &labels).unwrap().item();
    assert!((l - bce_loss(&preds, &labels).unwrap()).abs() < 1e-12);
}

#[test]
fn stage1_loss_gradients_match_finite_differences() {
    let m = MilModel::new(mini_dims(), 11);
    let bags = [random_bag("a", 3, 4, 1, 5), random_bag("b", 2, 4, 0, 6)];
    let err = grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let preds = bags
                .iter()
                .map(|b| m.forward(tape, &p, b).map(|f| f.yhat))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| match e {
                    MilError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
            bce_loss_var(tape, &preds, &[1, 0]).map_err(|e| match e {
                MilError::Autodiff(a) => a,
                other => panic!("{other}"),
            })
        },
        m.params().tensors(),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn instance_scores_match_single_patch_bags() {
    let m = MilModel::new(mini_dims(), 4);
    let bag = random_bag("a", 5, 4, 1, 3);
    let s = m.instance_scores(&bag).unwrap();
    for (i, &v) in s.iter().enumerate() {
        let one = Tensor::new(vec![1, 4], bag.patch_embeddings.row(i).to_vec()).unwrap();
        let y = m.predict(&Bag::new("b", one, 1).unwrap()).unwrap().yhat;
        assert!((v - y).abs() < 1e-14, "{v} vs {y}");
    }
}

#[test]
fn gradient_norms_cover_each_patch() {
    let m = MilModel::new(mini_dims(), 2);
    let bag = random_bag("a", 4, 4, 1, 9);
    let g = m.embedding_gradient_norms(&bag).unwrap();
    assert_eq!(g.len(), 4);
    assert!(g.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(g.iter().any(|v| *v > 0.0));
}

#[test]
fn early_stopping_on_worsening_loss() {
    let mut s = EarlyStopping::new(1);
    let mut stopped_at = None;
    for (epoch, loss) in [(1, 0.5), (2, 0.6), (3, 0.7)] {
        s.update(epoch, loss);
        if s.should_stop() {
            stopped_at = Some(epoch);
            break;
        }
    }
    assert_eq!(stopped_at, Some(2));
    assert_eq!(s.best_epoch(), 1);
}

#[test]
fn stratified_split_keeps_both_classes() {
    let labels: Vec<u8> = (0..30).map(|i| u8::from(i % 3 == 0)).collect();
    let (train, val) = stratified_split(&labels, 0.2, 4);
    assert_eq!(train.len() + val.len(), 30);
    assert_eq!(val.iter().filter(|&&i| labels[i] == 1).count(), 2);
    assert_eq!(val.iter().filter(|&&i| labels[i] == 0).count(), 4);
    assert!(val.iter().all(|i| !train.contains(i)));
    assert_eq!(stratified_split(&labels, 0.2, 4), (train, val));
}

#[test]
fn training_rejects_single_class_and_bad_config() {
    let bags: Vec<Bag> = (0..4).map(|i| random_bag("x", 2, 4, 1, i)).collect();
    let err = train_stage1(&bags, &bags, mini_dims(), &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, MilError::SingleClass { class: 1 }));
    let cfg = TrainConfig {
        patience: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train_stage1(&bags, &bags, mini_dims(), &cfg),
        Err(MilError::InvalidConfig(_))
    ));
    assert!(matches!(
        train_stage1(&bags, &[], mini_dims(), &TrainConfig::default()),
        Err(MilError::EmptySplit("validation"))
    ));
}

#[test]
fn training_is_deterministic_and_improves() {
    let dims = MilDims {
        input_dim: 4,
        hidden_dim: 16,
        embed_dim: 8,
        key_dim: 8,
        patient_hidden_dim: 16,
    };
    let bags = gaussian_bags(24, 4, 7);
    let (train, val) = bags.split_at(18);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        max_epochs: 20,
        batch_bags: 6,
        seed: 3,
        ..TrainConfig::default()
    };
    let (a, ha) = train_stage1(train, val, dims, &cfg).unwrap();
    let (b, hb) = train_stage1(train, val, dims, &cfg).unwrap();
    assert_eq!(ha, hb);
    for (x, y) in a.params().tensors().iter().zip(b.params().tensors()) {
        assert_eq!(x.data(), y.data());
    }
    assert!(ha.best_val_loss < ha.initial_val_loss);
    let out = a.predict_all(val).unwrap();
    for o in out {
        assert_eq!(o.yhat > 0.5, o.label == 1, "{o:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_is_a_distribution_and_permutation_invariant(
        seed in 0u64..1000, n in 1usize..7, shift in 0usize..7,
    ) {
        let m = MilModel::new(mini_dims(), seed);
        let bag = random_bag("p", n, 4, 1, seed + 1);
        let out = m.predict(&bag).unwrap();
        let s: f64 = out.alpha.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(out.alpha.iter().all(|&a| a >= 0.0));

        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| bag.patch_embeddings.row((i + shift) % n).to_vec())
            .collect();
        let rotated = Bag::new("p", Tensor::from_rows(&rows).unwrap(), 1).unwrap();
        let again = m.predict(&rotated).unwrap();
        prop_assert!((out.yhat - again.yhat).abs() < 1e-12);
    }
}
