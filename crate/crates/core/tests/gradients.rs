//! Finite-difference gradient checks for every tape op, at f64.
//! The acceptance suite reruns these as part of its gradient criterion;
//! this file keeps them close to the substrate for fast iteration.

use clkit_core::tensor::gradcheck::{rand_tensor, rand_tensor_offset, GradCheck};
use clkit_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn weighted_sum(tape: &mut Tape<f64>, v: Var, rng: &mut impl Rng) -> Var {
    // reduce an arbitrary tensor to a scalar with fixed random weights so
    // per-element gradients stay generic
    let shape = tape.value(v).shape().to_vec();
    let w = rand_tensor::<f64>(&shape, -1.0, 1.0, rng);
    let wv = tape.leaf(w);
    let prod = tape.mse(v, wv).unwrap();
    prod
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for &(h, w, k, s, p) in &[(6usize, 6usize, 5usize, 2usize, 2usize), (5, 7, 3, 1, 1)] {
        let x = rand_tensor::<f64>(&[2, 3, h, w], -1.0, 1.0, &mut rng);
        let wt = rand_tensor::<f64>(&[4, 3, k, k], -0.5, 0.5, &mut rng);
        let b = rand_tensor::<f64>(&[4], -0.5, 0.5, &mut rng);
        let wrng = ChaCha8Rng::seed_from_u64(7);
        GradCheck::default().run(
            "conv2d",
            &[x, wt, b],
            &mut rng,
            move |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], s, p).unwrap();
                weighted_sum(tape, y, &mut wrng.clone())
            },
        );
    }
}

#[test]
fn deconv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for target in [(6usize, 6usize), (5, 5)] {
        let x = rand_tensor::<f64>(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);
        let wt = rand_tensor::<f64>(&[4, 3, 5, 5], -0.5, 0.5, &mut rng);
        let b = rand_tensor::<f64>(&[3], -0.5, 0.5, &mut rng);
        let wrng = ChaCha8Rng::seed_from_u64(8);
        GradCheck::default().run(
            "deconv2d",
            &[x, wt, b],
            &mut rng,
            move |tape, vars| {
                let y = tape.deconv2d(vars[0], vars[1], vars[2], 2, 2, target).unwrap();
                weighted_sum(tape, y, &mut wrng.clone())
            },
        );
    }
}

#[test]
fn deconv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, deconv(y)> with shared weights and no bias
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let x = rand_tensor::<f64>(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
    let w = rand_tensor::<f64>(&[5, 3, 5, 5], -0.5, 0.5, &mut rng);
    let y = rand_tensor::<f64>(&[2, 5, 4, 4], -1.0, 1.0, &mut rng);
    let zero_b5 = Tensor::zeros(&[5]);
    let zero_b3 = Tensor::zeros(&[3]);

    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let b5 = tape.leaf(zero_b5);
    let conv = tape.conv2d(xv, wv, b5, 2, 2).unwrap();
    let lhs: f64 = tape
        .value(conv)
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| a * b)
        .sum();

    // deconv weight layout is [Cin_d, Cout_d, K, K] = conv's [Cout, Cin, K, K]
    let mut tape2 = Tape::<f64>::new();
    let yv = tape2.leaf(y);
    let wv2 = tape2.leaf(w);
    let b3 = tape2.leaf(zero_b3);
    let deconv = tape2.deconv2d(yv, wv2, b3, 2, 2, (8, 8)).unwrap();
    let rhs: f64 = tape2
        .value(deconv)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a * b)
        .sum();
    assert!(
        (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0),
        "adjoint identity violated: {lhs} vs {rhs}"
    );
}

#[test]
fn linear_relu_gap_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let x = rand_tensor::<f64>(&[3, 6], -1.0, 1.0, &mut rng);
    let w = rand_tensor::<f64>(&[4, 6], -0.5, 0.5, &mut rng);
    let b = rand_tensor::<f64>(&[4], -0.5, 0.5, &mut rng);
    let wrng = ChaCha8Rng::seed_from_u64(9);
    GradCheck::default().run("linear", &[x, w, b], &mut rng, move |tape, vars| {
        let y = tape.linear(vars[0], vars[1], vars[2]).unwrap();
        weighted_sum(tape, y, &mut wrng.clone())
    });

    let x = rand_tensor_offset::<f64>(&[2, 3, 4, 4], 0.05, &mut rng);
    let wrng = ChaCha8Rng::seed_from_u64(10);
    GradCheck::default().run("relu", &[x], &mut rng, move |tape, vars| {
        let y = tape.relu(vars[0]);
        weighted_sum(tape, y, &mut wrng.clone())
    });

    let x = rand_tensor::<f64>(&[2, 5, 3, 3], -1.0, 1.0, &mut rng);
    let wrng = ChaCha8Rng::seed_from_u64(11);
    GradCheck::default().run("global_avg_pool", &[x], &mut rng, move |tape, vars| {
        let y = tape.global_avg_pool(vars[0]).unwrap();
        weighted_sum(tape, y, &mut wrng.clone())
    });
}

#[test]
fn batchnorm_and_residual_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let x = rand_tensor::<f64>(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
    let gamma = rand_tensor::<f64>(&[3], 0.5, 1.5, &mut rng);
    let beta = rand_tensor::<f64>(&[3], -0.5, 0.5, &mut rng);
    let wrng = ChaCha8Rng::seed_from_u64(12);
    GradCheck {
        step: 1e-5,
        tol: 1e-3,
        max_probes: 30,
    }
    .run("batch_norm", &[x, gamma, beta], &mut rng, move |tape, vars| {
        let (y, _, _) = tape.batch_norm(vars[0], vars[1], vars[2], 1e-5).unwrap();
        weighted_sum(tape, y, &mut wrng.clone())
    });

    let a = rand_tensor::<f64>(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
    let b = rand_tensor::<f64>(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
    let wrng = ChaCha8Rng::seed_from_u64(13);
    GradCheck::default().run("residual_add", &[a, b], &mut rng, move |tape, vars| {
        let y = tape.add(vars[0], vars[1]).unwrap();
        weighted_sum(tape, y, &mut wrng.clone())
    });
}

#[test]
fn softmax_and_losses_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let x = rand_tensor::<f64>(&[3, 5], -2.0, 2.0, &mut rng);
    let wrng = ChaCha8Rng::seed_from_u64(14);
    GradCheck::default().run("softmax", &[x], &mut rng, move |tape, vars| {
        let y = tape.softmax(vars[0]).unwrap();
        weighted_sum(tape, y, &mut wrng.clone())
    });

    let logits = rand_tensor::<f64>(&[4, 6], -2.0, 2.0, &mut rng);
    GradCheck::default().run("cross_entropy", &[logits], &mut rng, |tape, vars| {
        tape.softmax_xent(vars[0], &[0, 3, 5, 2], None).unwrap()
    });

    let logits = rand_tensor::<f64>(&[3, 6], -2.0, 2.0, &mut rng);
    GradCheck::default().run("cross_entropy_masked", &[logits], &mut rng, |tape, vars| {
        tape.softmax_xent(vars[0], &[4, 2, 4], Some(&[2, 4, 5])).unwrap()
    });

    let a = rand_tensor::<f64>(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let b = rand_tensor::<f64>(&[2, 3, 4], -1.0, 1.0, &mut rng);
    GradCheck::default().run("mse", &[a, b], &mut rng, |tape, vars| {
        tape.mse(vars[0], vars[1]).unwrap()
    });
}

#[test]
fn entropy_nll_gradients_wrt_psi_and_z() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    // z kept strictly inside the support so clamping (zero-grad region)
    // does not interfere with the finite-difference probe
    let psi = rand_tensor::<f64>(&[3, 16], -2.0, 2.0, &mut rng);
    let z = rand_tensor::<f64>(&[2, 3, 2, 2], -6.0, 6.0, &mut rng);
    GradCheck {
        step: 1e-6,
        tol: 1e-3,
        max_probes: 48,
    }
    .run("entropy_nll", &[psi, z], &mut rng, |tape, vars| {
        tape.entropy_nll(vars[0], vars[1]).unwrap()
    });
}

#[test]
fn entropy_nll_hand_values() {
    // p = 0.5 for each of 4 elements -> loss = 4 ln 2
    // choose psi so one channel splits mass evenly over two unit bins:
    // z at the shared boundary gives an interval straddling them equally
    let mut tape = Tape::<f64>::new();
    // 2 bins (R = 1): softplus equal -> p of each unit interval = 0.5
    let psi = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.7, 0.7]));
    // z = -0.5 spans [-1, 0]: half of bin 0 [(-1.5,-0.5)] and half of bin 1
    let z = tape.leaf(Tensor::from_vec(&[1, 1, 4], vec![-0.5; 4]));
    let loss = tape.entropy_nll(psi, z).unwrap();
    let expect = 4.0 * (2.0f64).ln();
    assert!(
        (tape.value(loss).item() - expect).abs() < 1e-12,
        "{} vs {}",
        tape.value(loss).item(),
        expect
    );

    // p ~= 1 -> loss ~= 0: all mass in one bin, z centered there
    let mut tape = Tape::<f64>::new();
    let psi = tape.leaf(Tensor::from_vec(&[1, 2], vec![50.0, -50.0]));
    let z = tape.leaf(Tensor::from_vec(&[1, 1, 1], vec![-1.0]));
    let loss = tape.entropy_nll(psi, z).unwrap();
    assert!(tape.value(loss).item() < 1e-9);
}

#[test]
fn noise_is_additive_reparameterization() {
    // gradient of a downstream loss w.r.t. z equals gradient w.r.t. z+u
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let z = rand_tensor::<f64>(&[1, 2, 3], -1.0, 1.0, &mut rng);
    let u = rand_tensor::<f64>(&[1, 2, 3], -0.5, 0.5, &mut rng);
    let target = rand_tensor::<f64>(&[1, 2, 3], -1.0, 1.0, &mut rng);

    let mut tape = Tape::<f64>::new();
    let zv = tape.leaf(z);
    let uv = tape.leaf(u);
    let tv = tape.leaf(target);
    let noisy = tape.add(zv, uv).unwrap();
    let loss = tape.mse(noisy, tv).unwrap();
    tape.backward(loss, &[zv, noisy]).unwrap();
    assert_eq!(tape.grad(zv), tape.grad(noisy));
}
