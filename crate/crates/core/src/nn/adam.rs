//! Adam with bias correction.

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 4e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers, one pair per parameter slot.
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = (0..store.len()).map(|s| Tensor::zeros(store.by_slot(s).shape())).collect();
        let v = (0..store.len()).map(|s| Tensor::zeros(store.by_slot(s).shape())).collect();
        Self { step: 0, m, v }
    }
}

/// Rescales the gradients so their joint L2 norm does not exceed `max_norm`
/// and returns the norm before clipping. Rare loss spikes (a lone matched
/// proposal with a large residual) otherwise inflate the second moments and
/// destabilize the shared trunk.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// One update over every slot. `grads[slot] == None` means a zero gradient
/// for that slot this step (the moments still decay).
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
    grads: &[Option<Tensor>],
) {
    assert_eq!(grads.len(), store.len(), "one gradient entry per parameter slot");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for slot in 0..store.len() {
        let p = store.by_slot_mut(slot);
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        let zero = [];
        let g: &[f64] = grads[slot].as_ref().map_or(&zero, |t| t.data());
        for i in 0..p.len() {
            let gi = g.get(i).copied().unwrap_or(0.0);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p.data_mut()[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_from_fresh_state_changes_nothing() {
        let mut store = one_param_store(&[1.0, -2.0, 3.5]);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &AdamConfig::default(), &[None]);
        assert_eq!(store.get("p").unwrap().data(), &[1.0, -2.0, 3.5]);
        let zeros = Some(Tensor::zeros(&[3]));
        adam_step(&mut store, &mut state, &AdamConfig::default(), &[zeros]);
        assert_eq!(store.get("p").unwrap().data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction the very first update is lr * g/|g| (up to eps).
        let mut store = one_param_store(&[0.0, 0.0]);
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let g = Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap();
        adam_step(&mut store, &mut state, &cfg, &[Some(g)]);
        let p = store.get("p").unwrap().data();
        assert!((p[0] + 0.1).abs() < 1e-6, "{}", p[0]);
        assert!((p[1] - 0.1).abs() < 1e-6, "{}", p[1]);
    }

    #[test]
    fn clip_scales_only_above_the_threshold() {
        // Joint norm of [3, 4] is 5: clipping at 2.5 halves every entry.
        let mut grads = vec![
            Some(Tensor::from_vec(&[1], vec![3.0]).unwrap()),
            None,
            Some(Tensor::from_vec(&[1], vec![4.0]).unwrap()),
        ];
        let norm = clip_grad_norm(&mut grads, 2.5);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads[0].as_ref().unwrap().data()[0] - 1.5).abs() < 1e-12);
        assert!((grads[2].as_ref().unwrap().data()[0] - 2.0).abs() < 1e-12);

        let norm = clip_grad_norm(&mut grads, 10.0);
        assert!((norm - 2.5).abs() < 1e-12);
        assert!((grads[0].as_ref().unwrap().data()[0] - 1.5).abs() < 1e-12, "below max: untouched");
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = one_param_store(&[5.0]);
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        for _ in 0..2000 {
            let x = store.get("p").unwrap().data()[0];
            let g = Tensor::from_vec(&[1], vec![2.0 * (x - 1.5)]).unwrap();
            adam_step(&mut store, &mut state, &cfg, &[Some(g)]);
        }
        let x = store.get("p").unwrap().data()[0];
        assert!((x - 1.5).abs() < 1e-3, "converged to {x}");
    }
}
