//! Finite-difference gradient oracles.
//!
//! These helpers are deliberately independent of the tape: they only ever
//! call a black-box `f(x) -> loss` closure, so a test that compares them
//! against `Tape::backward` is comparing two separate derivations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, EncoderWeights, ForwardOptions};
use crate::tensor::{Matrix, Tape};

/// Central differences: g_i ≈ (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// End-to-end oracle for the whole model under the masked L1 loss: builds
/// a d_h=8, 2-layer encoder in 64-bit, backpropagates once, then probes
/// EVERY parameter entry with central differences (each probe re-runs the
/// full forward from mutated weights — no tape involvement). Returns the
/// worst relative error across all parameters; exercises attention,
/// layer norm, GELU, residuals, the loss, and (when `shared`) the gradient
/// accumulation that weight tying relies on.
pub fn masked_reconstruction_grad_error(shared: bool, t: usize, h: f64, seed: u64) -> f64 {
    let cfg = EncoderConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ff_dim: 16,
        input_dim: 6,
        target_dim: 5,
        share_weights: shared,
        dropout_rate: 0.0,
        max_sequence_length: 32,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Matrix::<f64>::from_vec(
        t,
        cfg.input_dim,
        (0..t * cfg.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let target = Matrix::<f64>::from_vec(
        t,
        cfg.target_dim,
        (0..t * cfg.target_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let mask_rows: Vec<usize> = (0..t).step_by(2).collect();

    let loss_of = |w: &EncoderWeights<f64>| -> f64 {
        let mut tape = Tape::new();
        let staged = w.stage(&mut tape, false);
        let out = w
            .forward_on(&mut tape, &staged, &input, &mut ForwardOptions::inference())
            .expect("forward");
        let loss = tape.masked_l1(out.reconstruction, &target, &mask_rows).expect("loss");
        tape.scalar(loss)
    };

    let mut weights = EncoderWeights::<f64>::init(&cfg, seed).expect("init");
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let staged = weights.stage(&mut tape, true);
        let out = weights
            .forward_on(&mut tape, &staged, &input, &mut ForwardOptions::inference())
            .expect("forward");
        let loss = tape.masked_l1(out.reconstruction, &target, &mask_rows).expect("loss");
        tape.backward(loss).expect("backward");
        staged.param_nodes().iter().map(|&id| tape.grad(id).expect("grad").to_vec()).collect()
    };

    let mut worst = 0.0f64;
    let n_params = analytic.len();
    for p in 0..n_params {
        for i in 0..analytic[p].len() {
            let original = {
                let mut entries = weights.param_entries_mut();
                let v = entries[p].1.data_mut();
                let orig = v[i];
                v[i] = orig + h;
                orig
            };
            let up = loss_of(&weights);
            {
                let mut entries = weights.param_entries_mut();
                entries[p].1.data_mut()[i] = original - h;
            }
            let down = loss_of(&weights);
            {
                let mut entries = weights.param_entries_mut();
                entries[p].1.data_mut()[i] = original;
            }
            let fd = (up - down) / (2.0 * h);
            let err = max_rel_err(&[analytic[p][i]], &[fd]);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Largest elementwise relative error, with an absolute floor so that
/// near-zero pairs compare absolutely instead of blowing up.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let mut worst = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let scale = x.abs().max(y.abs()).max(1e-6);
        let err = (x - y).abs() / scale;
        if err > worst {
            worst = err;
        }
    }
    worst
}
