use std::collections::BTreeMap;

use super::params::ParameterSet;
use super::tape::Gradients;
use crate::error::Result;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every unfrozen entry that has a gradient. Frozen entries are
    /// never touched, even if a gradient for them is present.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            if params.is_frozen(&name) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get_mut(&name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn minimizes_a_quadratic_and_skips_frozen() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::full(&[2], 3.0)).unwrap();
        p.insert("y", Tensor::full(&[1], 5.0)).unwrap();
        p.freeze("y").unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..300 {
            let tape = Tape::new();
            let b = p.bind(&tape).unwrap();
            let loss = b
                .get("x")
                .unwrap()
                .square()
                .unwrap()
                .sum()
                .unwrap()
                .add(b.get("y").unwrap().sum().unwrap())
                .unwrap();
            let g = tape.backward(loss).unwrap();
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(p.get("y").unwrap().data(), &[5.0]);
    }
}
