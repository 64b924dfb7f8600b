use ndarray::Array2;

/// Adam hyperparameters. No weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            step: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn for_arrays<'a>(arrays: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let shapes: Vec<_> = arrays.into_iter().map(|a| a.dim()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update. Arrays whose gradient is `None` are
/// frozen: neither they nor their moments change.
pub fn adam_step(
    params: &mut [&mut Array2<f64>],
    grads: &[Option<Array2<f64>>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
    assert_eq!(params.len(), state.m.len(), "optimizer state out of sync");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        assert_eq!(p.dim(), g.dim(), "gradient shape mismatch");
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        ndarray::Zip::from(&mut **p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = array![[1.0, -2.0]];
        let mut state = AdamState::new(&[(1, 2)]);
        state.m[0] = array![[0.5, 0.5]];
        state.v[0] = array![[0.25, 0.25]];
        let before = p.clone();
        adam_step(
            &mut [&mut p],
            &[Some(Array2::zeros((1, 2)))],
            &mut state,
            0.1,
            &AdamConfig::default(),
        );
        // Moments shrink by their β; the step is non-zero only through them.
        assert_eq!(state.m[0], array![[0.45, 0.45]]);
        assert!((state.v[0][[0, 0]] - 0.24975).abs() < 1e-15);
        let mut q = before.clone();
        let mut fresh = AdamState::new(&[(1, 2)]);
        adam_step(
            &mut [&mut q],
            &[Some(Array2::zeros((1, 2)))],
            &mut fresh,
            0.1,
            &AdamConfig::default(),
        );
        assert_eq!(q, before);
        assert_ne!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g|+ε).
        let g = 0.37;
        let lr = 0.01;
        let mut p = array![[2.0]];
        let mut state = AdamState::new(&[(1, 1)]);
        adam_step(&mut [&mut p], &[Some(array![[g]])], &mut state, lr, &AdamConfig::default());
        let expected = 2.0 - lr * g / (g + 1e-8);
        assert!((p[[0, 0]] - expected).abs() < 1e-15);
        assert!(((2.0 - p[[0, 0]]) - lr).abs() < 1e-9);
    }

    #[test]
    fn frozen_slots_are_untouched() {
        let mut a = array![[1.0]];
        let mut b = array![[1.0]];
        let mut state = AdamState::new(&[(1, 1), (1, 1)]);
        adam_step(
            &mut [&mut a, &mut b],
            &[None, Some(array![[1.0]])],
            &mut state,
            0.1,
            &AdamConfig::default(),
        );
        assert_eq!(a, array![[1.0]]);
        assert_eq!(state.m[0], array![[0.0]]);
        assert!(b[[0, 0]] < 1.0);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = array![[0.3, 0.4]];
        let mut state = AdamState::new(&[(1, 2)]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Some(array![[1.0, -3.0]])], &mut state, 0.0, &AdamConfig::default());
        }
        assert_eq!(p, array![[0.3, 0.4]]);
    }
}
