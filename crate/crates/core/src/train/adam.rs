use crate::model::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &Params) -> Self {
        let mut m = Params::new();
        for (name, p) in params.iter() {
            m.insert(name, Tensor::zeros(p.shape().to_vec()));
        }
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        assert_eq!(p.shape(), g.shape(), "gradient shape for {name}");
        let m = state.m.get_mut(name).expect("moment for every parameter");
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_mut(name).expect("moment for every parameter");
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (state.m.get(name).unwrap(), state.v.get(name).unwrap());
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            *pi -= cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        }
    }
}
