use icst_tensor::archive::{read_archive, write_archive};
use icst_tensor::{finite_diff_check, Graph, ParamStore, Result, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduce a tensor to a scalar through fixed pseudo-random weights so every
/// output element receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i as f64) * 0.731 + 0.17).sin());
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let report = finite_diff_check(
        |g, v| {
            let out = f(g, v)?;
            weighted_sum(g, out)
        },
        inputs,
        H,
    )
    .unwrap();
    assert!(
        report.max_rel_error < TOL,
        "max relative error {:.3e} (analytic {}, numeric {})",
        report.max_rel_error,
        report.analytic,
        report.numeric
    );
}

#[test]
fn affine_gradient_matches_central_difference() {
    let mut r = rng(1);
    let x = Tensor::randn(&[3, 2, 4], 1.0, &mut r);
    let w = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5], 1.0, &mut r);
    check(&[x, w, b], |g, v| g.affine(v[0], v[1], v[2]));
}

#[test]
fn linear_function_is_exact() {
    let x = Tensor::new(&[3], vec![0.3, -1.2, 0.8]).unwrap();
    let report = finite_diff_check(
        |g, v| {
            let c = g.constant(Tensor::new(&[3], vec![1.5, -0.5, 2.0]).unwrap());
            let p = g.mul(v[0], c)?;
            Ok(g.sum(p))
        },
        &[x],
        H,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-10, "{}", report.max_rel_error);
}

#[test]
fn bmm_all_transpose_combinations() {
    let mut r = rng(2);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta {
            Tensor::randn(&[2, 4, 3], 1.0, &mut r)
        } else {
            Tensor::randn(&[2, 3, 4], 1.0, &mut r)
        };
        let b = if tb {
            Tensor::randn(&[2, 5, 4], 1.0, &mut r)
        } else {
            Tensor::randn(&[2, 4, 5], 1.0, &mut r)
        };
        check(&[a, b], |g, v| g.bmm(v[0], v[1], ta, tb));
    }
}

#[test]
fn broadcasting_binary_ops() {
    let mut r = rng(3);
    let a = Tensor::randn(&[2, 1, 3], 1.0, &mut r);
    let b = Tensor::randn(&[4, 1], 1.0, &mut r);
    check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(&[a, b], |g, v| g.mul(v[0], v[1]));
}

#[test]
fn activations_and_softmax() {
    let mut r = rng(4);
    let x = Tensor::randn(&[3, 5], 1.0, &mut r);
    check(&[x.clone()], |g, v| Ok(g.relu(v[0])));
    check(&[x.clone()], |g, v| Ok(g.tanh(v[0])));
    check(&[x.clone()], |g, v| Ok(g.sigmoid(v[0])));
    check(&[x], |g, v| g.softmax(v[0]));
}

#[test]
fn structural_ops() {
    let mut r = rng(5);
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[2, 2, 4], 1.0, &mut r);
    check(&[a.clone(), b.clone()], |g, v| g.concat(&[v[0], v[1]], 1));
    check(&[a.clone()], |g, v| g.narrow(v[0], 2, 1, 2));
    check(&[a.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    check(&[a.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    check(&[a.clone(), a.clone()], |g, v| g.stack(&[v[0], v[1], v[0]]));
    check(&[a.clone()], |g, v| g.sum_axis(v[0], 1));
    check(&[a.clone()], |g, v| g.index_add(v[0], 1, &[2, 0, 2], 3));
    check(&[a.clone()], |g, v| Ok(g.mean(v[0])));
    let table = Tensor::randn(&[5, 3], 1.0, &mut r);
    check(&[table], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
}

#[test]
fn pair_mix_gradient() {
    let mut r = rng(6);
    let rep = Tensor::randn(&[3, 2, 2, 4], 1.0, &mut r);
    let a = Tensor::randn(&[3, 2, 2], 1.0, &mut r);
    check(&[rep, a], |g, v| g.pair_mix(v[0], v[1]));
}

#[test]
fn pair_mix_hand_computed() {
    // rows r_m, r_n; A = [[1, 0.5], [0, 1]] -> row n becomes 0.5 r_m + r_n.
    let mut g = Graph::new();
    let r = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap());
    let a = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.5, 0.0, 1.0]).unwrap());
    let out = g.pair_mix(r, a).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 10.5, 21.0]);
}

fn bn_store(features: usize) -> (ParamStore, icst_tensor::BufferId, icst_tensor::BufferId) {
    let mut s = ParamStore::new();
    let m = s.add_buffer("mean", Tensor::zeros(&[features])).unwrap();
    let v = s.add_buffer("var", Tensor::full(&[features], 1.0)).unwrap();
    (s, m, v)
}

#[test]
fn batch_norm_gradient_in_training_mode() {
    let mut r = rng(7);
    let x = Tensor::randn(&[3, 2, 4], 1.0, &mut r);
    let gamma = Tensor::randn(&[4], 1.0, &mut r);
    let beta = Tensor::randn(&[4], 1.0, &mut r);
    let (s, m, v) = bn_store(4);
    check(&[x, gamma, beta], |g, vars| {
        g.batch_norm(&s, vars[0], vars[1], vars[2], m, v)
    });
}

#[test]
fn batch_norm_contracts() {
    let (mut s, m, v) = bn_store(3);
    // two equal items -> zeros before the affine rescale
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap());
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let y = g.batch_norm(&s, x, gamma, beta, m, v).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    // training batch -> per-feature mean ~ 0
    let mut r = rng(8);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[16, 3], 2.0, &mut r));
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let y = g.batch_norm(&s, x, gamma, beta, m, v).unwrap();
    for f in 0..3 {
        let mean: f64 = (0..16).map(|i| g.value(y).at(&[i, f])).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
    }
    s.apply_bn_updates(g.bn_updates(), icst_tensor::BN_MOMENTUM);

    // batch of one is refused in training mode
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    assert!(g.batch_norm(&s, x, gamma, beta, m, v).is_err());

    // inference uses frozen statistics and is repeatable
    let input = Tensor::randn(&[1, 3], 1.0, &mut r);
    let run = || {
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let y = g.batch_norm(&s, x, gamma, beta, m, v).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn softmax_of_equal_scores_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[4], 0.7));
    let y = g.softmax(x).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn activation_definitions() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[3], vec![-3.0, 2.0, 0.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).data()[2], 0.5);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn archive_round_trip_and_truncation() {
    let dir = std::env::temp_dir().join(format!("icst-archive-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("a.bin");
    let t1 = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
    let t2 = Tensor::scalar(std::f64::consts::PI);
    let meta = serde_json::json!({"k": 1});
    write_archive(&path, &meta, &[("a".into(), &t1), ("b".into(), &t2)]).unwrap();
    let (m, entries) = read_archive(&path).unwrap();
    assert_eq!(m, meta);
    assert_eq!(entries[0].1, t1);
    assert_eq!(entries[1].1, t2);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(read_archive(&path).is_err());
    std::fs::remove_dir_all(&dir).ok();
}

proptest! {
    #[test]
    fn softmax_rows_are_probability_vectors(values in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let n = values.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[n], values).unwrap());
        let y = g.softmax(x).unwrap();
        let data = g.value(y).data();
        prop_assert!(data.iter().all(|v| *v >= 0.0));
        prop_assert!((data.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in 0u64..1000) {
        let mut r = rng(seed);
        let t = Tensor::randn(&[2, 3, 4, 2], 1.0, &mut r);
        let p = t.permute(&[3, 1, 0, 2]).unwrap();
        let back = p.permute(&[2, 1, 3, 0]).unwrap();
        prop_assert_eq!(back, t);
    }
}
