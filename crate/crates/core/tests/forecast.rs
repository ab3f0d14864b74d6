mod common;

use common::{finite_difference_check, random_sample, tiny_config, tiny_params};
use evhc::autograd::Tensor;
use evhc::forecast::layers::{
    build_time_invariant_adjacency, build_time_varying_adjacency, chebyshev_conv, combine_adjacency,
    gated_temporal_conv, mahalanobis_distances, normalized_laplacian, second_order_pool, temporal_attention,
};
use evhc::forecast::{
    baseline_ha, evaluate_rmse, forward, forward_raw, grad, loss, train, Batch, FeatureTensor, ForecastModelParams,
    ModelSpec, Sample, TrainConfig, Variant,
};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn matrix_strategy(r: usize, c: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| DMatrix::from_row_slice(r, c, &v))
}

#[test]
fn two_node_laplacian_by_hand() {
    let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let l = normalized_laplacian(&w).unwrap();
    let expected = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
    assert!((l - expected).amax() < 1e-8);
    let scaled = normalized_laplacian(&(w.clone() * 3.5)).unwrap();
    assert!((scaled - normalized_laplacian(&w).unwrap()).amax() < 1e-12);
    assert!(normalized_laplacian(&DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0])).is_err());
}

#[test]
fn mahalanobis_with_identity_is_euclidean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = rand_matrix(4, 5, &mut rng);
    let d = mahalanobis_distances(&p, &DMatrix::identity(5, 5));
    for i in 0..4 {
        for j in 0..4 {
            let e = (p.row(i) - p.row(j)).norm();
            assert!((d[(i, j)] - e).abs() < 1e-12);
        }
    }
}

#[test]
fn combine_keeps_symmetric_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_matrix(3, 3, &mut rng);
    let a = &a + a.transpose();
    let b = rand_matrix(3, 3, &mut rng);
    let b = &b + b.transpose();
    assert!((combine_adjacency(&a, &b).unwrap() - (&a + &b)).amax() < 1e-15);
    let z = DMatrix::zeros(3, 3);
    let c = rand_matrix(3, 3, &mut rng);
    let sym = (&c + c.transpose()) * 0.5;
    assert!((combine_adjacency(&c, &z).unwrap() - sym).amax() < 1e-15);
}

/// Dense polynomial oracle: explicit T_k(L) matrices applied per time step
/// and channel pair.
#[test]
fn chebyshev_matches_dense_polynomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c_in, c_out, n, t, k_s) = (2, 3, 4, 5, 4);
    let w = rand_matrix(n, n, &mut rng).map(|x| x.abs() + 0.1);
    let l = normalized_laplacian(&((&w + w.transpose()) * 0.5)).unwrap();
    let x = Tensor::new(vec![c_in, n, t], (0..c_in * n * t).map(|_| rng.random_range(-1.0..1.0)).collect());
    let theta =
        Tensor::new(vec![k_s, c_in, c_out], (0..k_s * c_in * c_out).map(|_| rng.random_range(-1.0..1.0)).collect());
    let got = chebyshev_conv(&x, &l, &theta).unwrap();
    let mut tk = vec![DMatrix::identity(n, n), l.clone()];
    for k in 2..k_s {
        let next = 2.0 * &l * &tk[k - 1] - &tk[k - 2];
        tk.push(next);
    }
    for co in 0..c_out {
        for ti in 0..t {
            for node in 0..n {
                let mut acc = 0.0;
                for (k, tm) in tk.iter().enumerate() {
                    for ci in 0..c_in {
                        let th = theta.data[(k * c_in + ci) * c_out + co];
                        for m in 0..n {
                            acc += th * tm[(node, m)] * x.data[(ci * n + m) * t + ti];
                        }
                    }
                }
                let g = got.data[(co * n + node) * t + ti];
                assert!((g - acc).abs() < 1e-10, "{g} vs {acc}");
            }
        }
    }
    // L~ = 0 leaves (theta_0 - theta_2) X.
    let x1 = Tensor::new(vec![1, 2, 1], vec![0.3, -0.7]);
    let th = Tensor::new(vec![3, 1, 1], vec![1.5, 9.0, 0.25]);
    let out = chebyshev_conv(&x1, &DMatrix::zeros(2, 2), &th).unwrap();
    assert!((out.data[0] - 1.25 * 0.3).abs() < 1e-15 && (out.data[1] + 1.25 * 0.7).abs() < 1e-15);
}

#[test]
fn gated_conv_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::new(vec![2, 3, 8], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect());
    let kb = Tensor::new(vec![3, 2, 4], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
    let kc = Tensor::new(vec![3, 2, 4], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
    let out = gated_temporal_conv(&x, &kb, &[0.1; 4], &kc, &[0.0; 4]).unwrap();
    assert_eq!(out.shape, vec![4, 3, 6]);
    let zero = gated_temporal_conv(&x, &Tensor::zeros(&[3, 2, 4]), &[0.0; 4], &kc, &[0.0; 4]).unwrap();
    assert!(zero.data.iter().all(|&v| v == 0.0));

    // Saturated gate passes X*B + b through; oracle evaluates the valid convolution directly.
    let sat = gated_temporal_conv(&x, &kb, &[0.1; 4], &Tensor::zeros(&[3, 2, 4]), &[20.0; 4]).unwrap();
    for co in 0..4 {
        for node in 0..3 {
            for to in 0..6 {
                let mut acc = 0.1;
                for k in 0..3 {
                    for ci in 0..2 {
                        acc += kb.data[(k * 2 + ci) * 4 + co] * x.data[(ci * 3 + node) * 8 + to + k];
                    }
                }
                assert!((sat.data[(co * 3 + node) * 6 + to] - acc).abs() < 1e-8);
            }
        }
    }
    let short = Tensor::new(vec![2, 3, 2], vec![0.0; 12]);
    assert!(gated_temporal_conv(&short, &kb, &[0.0; 4], &kc, &[0.0; 4]).is_err());
}

#[test]
fn attention_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, c, d_k) = (6, 3, 4);
    let x = rand_matrix(t, c, &mut rng);
    let wq = rand_matrix(c, d_k, &mut rng);
    let wk = rand_matrix(c, d_k, &mut rng);
    let wv = rand_matrix(c, c, &mut rng);
    let (w, out) = temporal_attention(&x, &wq, &wk, Some(&wv)).unwrap();
    let q = &x * &wq;
    let k = &x * &wk;
    let v = &x * &wv;
    let mut s = &q * k.transpose() / (d_k as f64).sqrt();
    for mut row in s.row_iter_mut() {
        let m = row.max();
        row.apply(|z| *z = (*z - m).exp());
        let total = row.sum();
        row /= total;
    }
    assert!((&w - &s).amax() < 1e-10);
    assert!((out - s * v).amax() < 1e-10);
    for row in w.row_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }

    let one = rand_matrix(1, c, &mut rng);
    let (w1, o1) = temporal_attention(&one, &wq, &wk, None).unwrap();
    assert_eq!(w1[(0, 0)], 1.0);
    assert!((o1 - one).amax() < 1e-15);

    let same_keys = DMatrix::from_fn(t, c, |i, _| i as f64);
    let (wu, ou) = temporal_attention(&same_keys, &wq, &DMatrix::zeros(c, d_k), None).unwrap();
    assert!(wu.iter().all(|&v| (v - 1.0 / t as f64).abs() < 1e-12));
    let mean = same_keys.row_mean();
    for row in ou.row_iter() {
        assert!((row - &mean).amax() < 1e-12);
    }
}

#[test]
fn pooling_examples() {
    let h = second_order_pool(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
    assert_eq!(h, vec![1.0, 0.0, 0.0, 1.0]);
    let z = second_order_pool(&DMatrix::zeros(3, 4), &DMatrix::from_element(4, 2, 0.5)).unwrap();
    assert!(z.iter().all(|&v| v == 0.0));
    assert!(second_order_pool(&DMatrix::zeros(3, 2), &DMatrix::zeros(2, 3)).is_err());
}

#[test]
fn gradient_matches_finite_differences_for_every_variant() {
    for variant in [Variant::Full, Variant::NoWA, Variant::NoTA, Variant::Fc] {
        let (params, samples) = tiny_params(variant, 11);
        let r = finite_difference_check(&params, &samples);
        assert_eq!(
            r.failures,
            0,
            "{}: {} of {} entries off, worst {} at {}",
            variant.name(),
            r.failures,
            r.checked,
            r.worst_rel,
            r.worst_name
        );
        assert_eq!(r.checked, params.parameter_count());
    }
}

#[test]
fn dead_head_predicts_its_bias_and_bias_gradient_by_hand() {
    let (mut params, samples) = tiny_params(Variant::Full, 3);
    for v in params.get_mut("mlp.W2").unwrap().data.iter_mut() {
        *v = 0.0;
    }
    let bias = params.get("mlp.b2").unwrap().data.clone();
    let out = forward_raw(&params, &Batch::from_samples(&[&samples[0]]).unwrap()).unwrap();
    assert_eq!(out, bias);

    // L = mean_s sum_i (b_i - y_si)^2  =>  dL/db_i = 2 (b_i - mean_s y_si).
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs).unwrap();
    let (_, g) = grad(&params, &batch).unwrap();
    let idx = params.tensors.iter().position(|(n, _)| n == "mlp.b2").unwrap();
    for (i, b) in bias.iter().enumerate() {
        let mean_truth = samples.iter().map(|s| s.target[i]).sum::<f64>() / samples.len() as f64;
        let expected = 2.0 * (b - mean_truth);
        assert!((g[idx].data[i] - expected).abs() < 1e-12, "{} vs {expected}", g[idx].data[i]);
    }
}

#[test]
fn loss_normalization() {
    let (params, samples) = tiny_params(Variant::Full, 5);
    let single: Vec<f64> =
        samples.iter().map(|s| loss(&params, &Batch::from_samples(&[s]).unwrap()).unwrap()).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let all = loss(&params, &Batch::from_samples(&refs).unwrap()).unwrap();
    assert!((all - single.iter().sum::<f64>() / 3.0).abs() < 1e-12);

    let mut perfect = samples[0].clone();
    perfect.target = forward_raw(&params, &Batch::from_samples(&[&samples[0]]).unwrap()).unwrap();
    assert_eq!(loss(&params, &Batch::from_samples(&[&perfect]).unwrap()).unwrap(), 0.0);

    let mut off = perfect.clone();
    off.target = perfect.target.iter().enumerate().map(|(i, v)| if i == 0 { v + 0.1 } else { *v }).collect();
    let l = loss(&params, &Batch::from_samples(&[&off]).unwrap()).unwrap();
    assert!((l - 0.01).abs() < 1e-12);

    let dup = Batch::from_samples(&[&samples[0], &samples[0]]).unwrap();
    let (_, g2) = grad(&params, &dup).unwrap();
    let (_, g1) = grad(&params, &Batch::from_samples(&[&samples[0]]).unwrap()).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn bundled_configuration_outputs_twelve_stations() {
    let cfg = TrainConfig::default();
    let spec = ModelSpec::new(&cfg, Variant::Full, 12, 8, 0).unwrap();
    let params = ForecastModelParams::init(spec, 0);
    params.validate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = random_sample(12, 8, &mut rng);
    let a = forward(&params, &s.features).unwrap();
    assert_eq!(a.len(), 12);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a, forward(&params, &s.features).unwrap());
    let wrong = random_sample(11, 8, &mut rng);
    assert!(forward(&params, &wrong.features).is_err());
}

#[test]
fn fc_variant_differs_only_in_the_head() {
    let cfg = TrainConfig::default();
    let full = ModelSpec::new(&cfg, Variant::Full, 12, 8, 0).unwrap().layout();
    let fc = ModelSpec::new(&cfg, Variant::Fc, 12, 8, 0).unwrap().layout();
    let body = |l: &[(String, Vec<usize>)]| -> Vec<(String, Vec<usize>)> {
        l.iter().filter(|(n, _)| !n.starts_with("head.")).cloned().collect()
    };
    assert_eq!(body(&full), body(&fc));
    assert_ne!(full, fc);
}

#[test]
fn no_attention_equals_full_model_on_single_slot() {
    let cfg = TrainConfig { channels: vec![4], k_t: 1, ..tiny_config() };
    let full = ForecastModelParams::init(ModelSpec::new(&cfg, Variant::Full, 3, 1, 0).unwrap(), 9);
    let mut nota = ForecastModelParams::init(ModelSpec::new(&cfg, Variant::NoTA, 3, 1, 0).unwrap(), 9);
    for (name, t) in nota.tensors.iter_mut() {
        *t = full.get(name).unwrap().clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_sample(3, 1, &mut rng);
    assert_eq!(forward(&full, &s.features).unwrap(), forward(&nota, &s.features).unwrap());
}

#[test]
fn zero_block_yields_zero_features() {
    // With all block weights and biases zero the forecast no longer depends
    // on the demand input.
    let (mut params, samples) = tiny_params(Variant::Full, 8);
    for (name, t) in params.tensors.iter_mut() {
        if name.starts_with("block") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut other = samples[0].clone();
    other.features.demand.iter_mut().for_each(|v| *v = 1.0 - *v);
    let a = forward_raw(&params, &Batch::from_samples(&[&samples[0]]).unwrap()).unwrap();
    let b = forward_raw(&params, &Batch::from_samples(&[&other]).unwrap()).unwrap();
    assert_eq!(a, b);
}

fn constant_dataset(n: usize, t: usize, count: usize, value: f64) -> Vec<Sample> {
    (0..count)
        .map(|k| Sample {
            features: FeatureTensor {
                n_stations: n,
                t,
                demand: vec![value; n * t],
                tod: (0..t).map(|i| (k + i) % 96).collect(),
                dow: vec![(k / 96) % 7; t],
                covariates: Vec::new(),
            },
            target: vec![value; n],
        })
        .collect()
}

#[test]
fn training_learns_a_constant_demand() {
    let cfg = TrainConfig {
        channels: vec![4, 4],
        hidden: 8,
        z_prime: 4,
        d_k: 4,
        batch_size: 16,
        epochs: 60,
        learning_rate: 3e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let data = constant_dataset(3, 8, 160, 0.4);
    let (tr, rest) = data.split_at(96);
    let (va, te) = rest.split_at(32);
    let init = ForecastModelParams::init(ModelSpec::new(&cfg, Variant::Full, 3, 8, 0).unwrap(), 1);
    let r = train(init.clone(), &cfg, tr, va, te).unwrap();
    let rmse = evaluate_rmse(&r.params, te).unwrap();
    assert!(rmse < 0.01, "test RMSE {rmse}");
    assert!(r.curve.last().unwrap().train <= r.initial_train_loss);
    assert_eq!(r.curve.len(), 60);

    let short = TrainConfig { epochs: 2, ..cfg.clone() };
    let a = train(init.clone(), &short, tr, va, te).unwrap();
    let b = train(init, &short, tr, va, te).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn training_rejects_empty_split() {
    let cfg = TrainConfig { epochs: 1, ..tiny_config() };
    let (params, samples) = tiny_params(Variant::Full, 1);
    assert!(train(params, &cfg, &samples, &[], &samples).is_err());
}

#[test]
fn historical_average_examples() {
    let w = FeatureTensor {
        n_stations: 2,
        t: 2,
        demand: vec![0.0, 1.0, 0.3, 0.3],
        tod: vec![0, 1],
        dow: vec![0, 0],
        covariates: Vec::new(),
    };
    assert_eq!(baseline_ha(&w), vec![0.5, 0.3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjacencies_are_row_stochastic(
        e in matrix_strategy(5, 3),
        p in matrix_strategy(5, 4),
        m in matrix_strategy(4, 4),
        sigma in 0.05f64..5.0,
    ) {
        let w_ti = build_time_invariant_adjacency(&e);
        let w_tv = build_time_varying_adjacency(&p, &m, sigma);
        for w in [&w_ti, &w_tv] {
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            for row in w.row_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
        for i in 0..5 {
            let max = w_tv.row(i).max();
            prop_assert!(w_tv[(i, i)] >= max - 1e-15);
        }
        let c = combine_adjacency(&w_ti, &w_tv).unwrap();
        prop_assert!((&c - c.transpose()).amax() < 1e-12);
    }

    #[test]
    fn laplacian_spectrum_within_unit_interval(raw in matrix_strategy(6, 6), scale in 0.1f64..10.0) {
        let w = raw.map(|x| x.abs() + 1e-3);
        let w = (&w + w.transpose()) * 0.5;
        let l = normalized_laplacian(&w).unwrap();
        let eig = SymmetricEigen::new(l.clone()).eigenvalues;
        prop_assert!(eig.iter().all(|v| v.abs() <= 1.0 + 1e-6), "{eig:?}");
        let l2 = normalized_laplacian(&(w * scale)).unwrap();
        prop_assert!((l - l2).amax() < 1e-9);
    }

    #[test]
    fn pooled_gram_is_symmetric_psd(x in matrix_strategy(5, 4), z in matrix_strategy(4, 3)) {
        let h = second_order_pool(&x, &z).unwrap();
        let g = DMatrix::from_row_slice(3, 3, &h);
        prop_assert!((&g - g.transpose()).amax() < 1e-12);
        let eig = SymmetricEigen::new(g).eigenvalues;
        prop_assert!(eig.iter().all(|&v| v >= -1e-10));
    }

    #[test]
    fn every_block_shortens_time_by_twice_kernel_minus_one(k_t in 1usize..4, blocks in 1usize..3, extra in 1usize..4) {
        let t = 2 * (k_t - 1) * blocks + extra;
        let cfg = TrainConfig { channels: vec![2; blocks], k_t, ..tiny_config() };
        let spec = ModelSpec::new(&cfg, Variant::Full, 3, t, 0).unwrap();
        prop_assert_eq!(spec.t_out(), extra);
        let params = ForecastModelParams::init(spec, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(k_t as u64);
        let s = random_sample(3, t, &mut rng);
        prop_assert_eq!(forward(&params, &s.features).unwrap().len(), 3);
    }
}
