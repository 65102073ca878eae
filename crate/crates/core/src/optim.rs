//! Parameter update rules for the encoders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Mlp, MlpGrad};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_net(net: &Mlp<T>) -> Self {
        let shapes: Vec<usize> = net
            .layers()
            .iter()
            .flat_map(|l| [l.weight.as_slice().len(), l.bias.len()])
            .collect();
        Self {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }
}

fn check_grad_shapes<T: Scalar>(params: &[&mut [T]], grads: &[&[T]]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::invalid("gradient does not match parameter shapes"));
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(net: &mut Mlp<T>, grad: &MlpGrad<T>, lr: T, state: &mut AdamState<T>) -> Result<()> {
    let mut params = net.param_slices_mut();
    let grads = grad.slices();
    check_grad_shapes(&params, &grads)?;
    if state.m.len() != params.len() || state.m.iter().zip(&params).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::invalid("Adam moments do not match parameter shapes"));
    }
    state.step += 1;
    let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(ADAM_EPS));
    let c1 = T::one() - b1.powi(state.step);
    let c2 = T::one() - b2.powi(state.step);
    for (((p, g), m), v) in params.iter_mut().zip(&grads).zip(&mut state.m).zip(&mut state.v) {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (T::one() - b1) * g[k];
            v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent.
pub fn sgd_step<T: Scalar>(net: &mut Mlp<T>, grad: &MlpGrad<T>, lr: T) -> Result<()> {
    let mut params = net.param_slices_mut();
    let grads = grad.slices();
    check_grad_shapes(&params, &grads)?;
    for (p, g) in params.iter_mut().zip(&grads) {
        for (pk, &gk) in p.iter_mut().zip(g.iter()) {
            *pk -= lr * gk;
        }
    }
    Ok(())
}

/// Optimizer bound to one network.
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Adam(AdamState<T>),
    Sgd,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, net: &Mlp<T>) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::for_net(net)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn step(&mut self, net: &mut Mlp<T>, grad: &MlpGrad<T>, lr: T) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(net, grad, lr, state),
            Optimizer::Sgd => sgd_step(net, grad, lr),
        }
    }
}
