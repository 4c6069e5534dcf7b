use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

/// One Adam update in place. `names` is only used for error messages.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], names: &[String], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::Shape(format!(
                "adam: parameter `{}` has shape {:?}, gradient {:?}",
                name_of(names, i),
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter `{}`",
                name_of(names, i)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for k in 0..pd.len() {
            let gk = g.data()[k];
            md[k] = b1 * md[k] + (1.0 - b1) * gk;
            vd[k] = b2 * vd[k] + (1.0 - b2) * gk * gk;
            let mhat = md[k] / bc1;
            let vhat = vd[k] / bc2;
            pd[k] -= state.lr * (mhat / (vhat.sqrt() + state.eps) + state.weight_decay * pd[k]);
        }
    }
    Ok(())
}

fn name_of(names: &[String], i: usize) -> String {
    names.get(i).cloned().unwrap_or_else(|| format!("#{i}"))
}
