//! AdamW with decoupled weight decay.
//!
//! The decay is applied directly to the parameter (`p ← p − lr·wd·p`),
//! separately from the moment-based step, so with `weight_decay == 0` the
//! update is exactly Adam.

use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Slot<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Optimizer state: step counter plus first/second moment accumulators, one
/// slot per parameter group. Callers must pass the same parameter groups in
/// the same order on every step.
pub struct AdamW<F: Scalar> {
    pub config: AdamWConfig,
    step: u64,
    slots: Vec<Slot<F>>,
}

/// What happened during one step; groups whose gradient contained a
/// non-finite value are skipped (their parameters and moments stay put).
#[derive(Debug, Default)]
pub struct StepReport {
    pub skipped_groups: Vec<usize>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, slots: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `(parameter, gradient)` groups at the configured
    /// learning rate.
    pub fn step(&mut self, groups: &mut [(&mut [F], &[F])]) -> StepReport {
        self.step_at(self.config.learning_rate, groups)
    }

    /// One update at an explicit learning rate (for warmup schedules).
    /// The step counter always advances, even when groups are skipped.
    pub fn step_at(&mut self, lr: f64, groups: &mut [(&mut [F], &[F])]) -> StepReport {
        if self.slots.is_empty() {
            self.slots = groups
                .iter()
                .map(|(p, _)| Slot { m: vec![F::zero(); p.len()], v: vec![F::zero(); p.len()] })
                .collect();
        }
        assert_eq!(self.slots.len(), groups.len(), "parameter group count changed");

        self.step += 1;
        let t = self.step;
        let c = &self.config;
        // all arithmetic in F so that f32 training is textbook f32 Adam
        let b1 = F::of(c.beta1);
        let b2 = F::of(c.beta2);
        let one_m_b1 = F::one() - b1;
        let one_m_b2 = F::one() - b2;
        let bias1 = F::one() - b1.powi(t as i32);
        let bias2 = F::one() - b2.powi(t as i32);
        let lr_f = F::of(lr);
        let eps = F::of(c.epsilon);
        let decay = lr_f * F::of(c.weight_decay);

        let mut report = StepReport::default();
        for (gi, (params, grads)) in groups.iter_mut().enumerate() {
            assert_eq!(params.len(), grads.len(), "group {gi}: param/grad length");
            assert_eq!(self.slots[gi].m.len(), params.len(), "group {gi}: slot length");
            if grads.iter().any(|g| !g.is_finite()) {
                log::warn!("optimizer step {t}: non-finite gradient in group {gi}, skipping it");
                report.skipped_groups.push(gi);
                continue;
            }
            let slot = &mut self.slots[gi];
            for i in 0..params.len() {
                let g = grads[i];
                slot.m[i] = b1 * slot.m[i] + one_m_b1 * g;
                slot.v[i] = b2 * slot.v[i] + one_m_b2 * g * g;
                let m_hat = slot.m[i] / bias1;
                let v_hat = slot.v[i] / bias2;
                params[i] = params[i] - lr_f * m_hat / (v_hat.sqrt() + eps);
                if c.weight_decay != 0.0 {
                    params[i] = params[i] - decay * params[i];
                }
            }
        }
        report
    }

    /// Serializes (step, moments) for the checkpoint sidecar.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"AALBOPTS");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.push(F::WIDTH as u8);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.slots.len() as u32).to_le_bytes());
        for slot in &self.slots {
            out.extend_from_slice(&(slot.m.len() as u64).to_le_bytes());
            for &v in &slot.m {
                v.write_le(&mut out);
            }
            for &v in &slot.v {
                v.write_le(&mut out);
            }
        }
        out
    }
}
