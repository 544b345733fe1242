use serde::{Deserialize, Serialize};

use crate::backbone::ParameterStore;
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64, c1: f64, c2: f64) {
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
    }
}

/// Adam moments for the entity table and θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    entity: Moments,
    theta: Moments,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore) -> Self {
        Self {
            step: 0,
            entity: Moments::zeros(store.entity.len()),
            theta: Moments::zeros(store.theta.len()),
        }
    }

    pub fn check_shapes(&self, store: &ParameterStore) -> Result<()> {
        let ok = [&self.entity, &self.theta]
            .iter()
            .zip([store.entity.len(), store.theta.len()])
            .all(|(m, n)| m.m.len() == n && m.v.len() == n);
        if ok {
            Ok(())
        } else {
            Err(Error::Data("optimizer moments do not match the parameters".into()))
        }
    }

    pub fn update(&mut self, store: &mut ParameterStore, entity_grad: &[f64], theta_grad: &[f64], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        self.entity.apply(&mut store.entity, entity_grad, lr, c1, c2);
        self.theta.apply(&mut store.theta, theta_grad, lr, c1, c2);
    }
}
