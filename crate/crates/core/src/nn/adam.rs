//! Adam optimizer over an [`MlpNetwork`]'s parameters, with bias-corrected
//! moments kept per layer.

use super::{Gradients, MlpNetwork};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
    /// Used in divergence errors so the failing block can be named.
    label: String,
}

impl Adam {
    pub fn new(net: &MlpNetwork, config: AdamConfig, label: &str) -> Self {
        let moments = net
            .layers
            .iter()
            .map(|l| Moments {
                m_w: vec![0.0; l.weight.len()],
                v_w: vec![0.0; l.weight.len()],
                m_b: vec![0.0; l.bias.len()],
                v_b: vec![0.0; l.bias.len()],
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
            label: label.to_string(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Gradients must mirror the network layout; parameters are
    /// checked for finiteness afterwards and a [`Error::Divergence`] names
    /// the offending block.
    pub fn step(&mut self, net: &mut MlpNetwork, grads: &Gradients) -> Result<()> {
        assert_eq!(
            grads.layers.len(),
            net.layers.len(),
            "gradient layout must mirror the network"
        );
        self.step += 1;
        let t = self.step as f64;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (l, (layer, gl)) in net.layers.iter_mut().zip(&grads.layers).enumerate() {
            let mom = &mut self.moments[l];
            update_block(
                &mut layer.weight,
                &gl.weight,
                &mut mom.m_w,
                &mut mom.v_w,
                c,
                bc1,
                bc2,
            );
            update_block(
                &mut layer.bias,
                &gl.bias,
                &mut mom.m_b,
                &mut mom.v_b,
                c,
                bc1,
                bc2,
            );
            if let Some(bad) = layer.weight.iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "{}: layer {} weight[{}] is non-finite after step {}",
                    self.label, l, bad, self.step
                )));
            }
            if let Some(bad) = layer.bias.iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "{}: layer {} bias[{}] is non-finite after step {}",
                    self.label, l, bad, self.step
                )));
            }
        }
        Ok(())
    }
}

fn update_block(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    c: AdamConfig,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}
