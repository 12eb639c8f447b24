//! Central finite-difference gradient checking at 64-bit precision.
//!
//! Test support: builds the graph under test twice per probed component
//! and compares (L(x+h) - L(x-h)) / 2h against the tape's analytic
//! gradient.

use super::{Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Relative-error tolerance.
    pub tol: f64,
    /// Components probed per input tensor (sampled without replacement).
    pub max_probes: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tol: 1e-3,
            max_probes: 40,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
}

impl GradCheck {
    /// `build` receives a fresh tape and one leaf var per input tensor and
    /// returns the scalar loss var. Panics with a diagnostic on failure.
    pub fn run(
        &self,
        name: &str,
        inputs: &[Tensor<f64>],
        rng: &mut impl Rng,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) -> GradCheckReport {
        let eval = |tensors: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item()
        };

        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert!(
            tape.value(loss).item().is_finite(),
            "{name}: non-finite loss"
        );
        tape.backward(loss, &vars).expect("backward failed");
        let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

        let mut max_rel = 0.0f64;
        let mut probes = 0usize;
        for (ti, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.truncate(self.max_probes);
            for &j in &idx {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[j] += self.step;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[j] -= self.step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * self.step);
                let an = analytic[ti][j];
                if an.abs() < 1e-9 && fd.abs() < 1e-9 {
                    probes += 1;
                    continue;
                }
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    rel <= self.tol,
                    "{name}: input {ti} component {j}: analytic {an:.8e} vs fd {fd:.8e} (rel {rel:.3e})"
                );
                max_rel = max_rel.max(rel);
                probes += 1;
            }
        }
        GradCheckReport {
            max_rel_err: max_rel,
            probes,
        }
    }
}

/// Uniform random tensor in [lo, hi) for check inputs.
pub fn rand_tensor<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect(),
    )
}

/// Random tensor kept away from zero (for relu kink avoidance).
pub fn rand_tensor_offset<T: Scalar>(
    shape: &[usize],
    margin: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| {
                let mag = rng.gen_range(margin..1.0);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                T::from_f64(sign * mag)
            })
            .collect(),
    )
}
