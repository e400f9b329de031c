use capinstall::nn::{io, param_count_formula, Activation, AdamState, InitScheme, Mlp, MlpGrads, OutputTransform};
use capinstall::rng::RngStream;
use ndarray::Array2;
use proptest::prelude::*;

fn random_net(dims: &[usize], activation: Activation, seed: u64) -> Mlp {
    let mut rng = RngStream::new(seed, 0);
    let mut net = Mlp::init(dims, activation, OutputTransform::Identity, InitScheme::GlorotUniform, &mut rng).unwrap();
    let flat: Vec<f64> = net.params_flat().iter().map(|p| p + 0.1 * rng.standard_normal()).collect();
    net.set_params_flat(&flat).unwrap();
    net
}

fn half_squared(net: &Mlp, x: &Array2<f64>) -> f64 {
    let y = net.forward_batch(x.view()).unwrap();
    y.mapv(|v| 0.5 * v * v).sum() / x.nrows() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_finite_differences(
        inputs in 1usize..=4,
        hidden in 1usize..=8,
        second in 0usize..=8,
        relu in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut dims = vec![inputs, hidden];
        if second > 0 {
            dims.push(second);
        }
        dims.push(1);
        let activation = if relu { Activation::Relu } else { Activation::Tanh };
        let net = random_net(&dims, activation, seed);
        let mut rng = RngStream::new(seed, 1);
        let x = Array2::from_shape_fn((3, inputs), |_| rng.standard_normal());
        let bundle = net.loss_and_grad(x.view(), |_, y| (0.5 * y[0] * y[0], vec![y[0]])).unwrap();
        let analytic = bundle.grads.flat();
        let flat = net.params_flat();
        let h = 1e-6;
        for i in 0..flat.len() {
            let at = |delta: f64| {
                let mut p = flat.clone();
                p[i] += delta;
                let mut n = net.clone();
                n.set_params_flat(&p).unwrap();
                half_squared(&n, &x)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-6);
            prop_assert!((fd - analytic[i]).abs() / scale < 1e-4, "param {}: fd {} vs {}", i, fd, analytic[i]);
        }
    }
}

#[test]
fn batch_equals_rowwise() {
    let net = random_net(&[4, 8, 8, 2], Activation::Tanh, 3);
    let mut rng = RngStream::new(3, 1);
    let x = Array2::from_shape_fn((7, 4), |_| rng.standard_normal());
    let joint = net.forward_batch(x.view()).unwrap();
    for (i, row) in x.rows().into_iter().enumerate() {
        let single = net.forward(row.as_slice().unwrap()).unwrap();
        assert_eq!(single, joint.row(i).to_vec());
    }
}

#[test]
fn parameter_counts() {
    let mut rng = RngStream::new(4, 0);
    for (d0, m, d1) in [(4, 100, 1), (5, 100, 1), (4, 256, 2)] {
        let net = Mlp::init(&[d0, m, m, d1], Activation::Tanh, OutputTransform::Identity, InitScheme::GlorotUniform, &mut rng)
            .unwrap();
        assert_eq!(net.param_count(), param_count_formula(d0, m, 1, d1));
    }
}

#[test]
fn adam_descends_a_quadratic() {
    let mut net = Mlp::zeros(&[1, 3], Activation::Tanh, OutputTransform::Identity).unwrap();
    let ones = vec![1.0; net.param_count()];
    net.set_params_flat(&ones).unwrap();
    let mut adam = AdamState::new(&net, 1e-3);
    for _ in 0..1000 {
        let mut grads = MlpGrads::zeros_like(&net);
        let w = net.params_flat();
        let mut g = grads.flat();
        for (gi, wi) in g.iter_mut().zip(&w) {
            *gi = 2.0 * wi;
        }
        set_flat(&mut grads, &g);
        adam.update(&mut net, &grads);
    }
    let norm: f64 = net.params_flat().iter().map(|w| w * w).sum::<f64>().sqrt();
    assert!(norm < (ones.len() as f64).sqrt());
    assert_eq!(adam.step_count(), 1000);
}

fn set_flat(grads: &mut MlpGrads, flat: &[f64]) {
    let mut k = 0;
    for layer in &mut grads.layers {
        for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
            *v = flat[k];
            k += 1;
        }
    }
}

#[test]
fn saved_networks_reload_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.capnet");
    let net = random_net(&[4, 16, 16, 2], Activation::Relu, 5);
    io::save(&net, &path).unwrap();
    let back = io::load(&path).unwrap();
    assert_eq!(back, net);
    let bytes = std::fs::read(&path).unwrap();
    assert!(io::decode(&bytes[..bytes.len() - 1]).is_err());
}
