use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Moment estimates and hyperparameters of the Adam optimizer.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// Zero moments shaped like `shapes`, with the usual defaults
    /// (beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8).
    pub fn new<'a>(lr: f64, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<S>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<S>] {
        &self.v
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[&Tensor<S>],
    state: &mut AdamState<S>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(format!(
                "adam: parameter {i} shape {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(state.beta1), S::of(state.beta2));
    let c1 = S::one() - S::of(state.beta1.powi(t));
    let c2 = S::one() - S::of(state.beta2.powi(t));
    let lr = S::of(state.lr);
    let eps = S::of(state.epsilon);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (S::one() - b1) * gi;
            *vi = b2 * *vi + (S::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.check_finite("adam_step")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::filled(&[3], 0.5);
        let g = Tensor::<f64>::filled(&[3], 1.0);
        let mut state = AdamState::new(1e-4, [p.shape()]);
        adam_step(&mut [&mut p], &[&g], &mut state).unwrap();
        for &w in p.data() {
            assert!((0.5 - w - 1e-4).abs() < 1e-9, "{w}");
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::<f32>::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.25]).unwrap();
        let before = p.clone();
        let g = Tensor::<f32>::zeros(&[2, 2]);
        let mut state = AdamState::new(1e-2, [p.shape()]);
        for _ in 0..25 {
            adam_step(&mut [&mut p], &[&g], &mut state).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 25);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::<f64>::zeros(&[3]);
        let mut state = AdamState::new(1e-3, [p.shape()]);
        assert!(matches!(
            adam_step(&mut [&mut p], &[&g], &mut state),
            Err(Error::Dimension(_))
        ));
    }

    /// Scalar-at-a-time Adam written from the textbook recurrence.
    fn reference_adam(theta0: &[f64], target: &[f64], steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let mut theta = theta0.to_vec();
        let mut m = vec![0.0; theta.len()];
        let mut v = vec![0.0; theta.len()];
        for t in 1..=steps {
            for i in 0..theta.len() {
                let g = 2.0 * (theta[i] - target[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / (1.0 - b1.powi(t as i32));
                let vh = v[i] / (1.0 - b2.powi(t as i32));
                theta[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        theta
    }

    #[test]
    fn quadratic_trajectory_matches_reference_loop() {
        let theta0 = [1.5, -0.3, 2.0, 0.0];
        let target = [0.0, 1.0, -1.0, 0.5];
        let lr = 0.05;
        let expected = reference_adam(&theta0, &target, 10, lr);

        let mut p = Tensor::<f64>::from_f64(&[4], &theta0).unwrap();
        let mut state = AdamState::new(lr, [p.shape()]);
        for _ in 0..10 {
            let g: Vec<f64> = p
                .data()
                .iter()
                .zip(&target)
                .map(|(w, t)| 2.0 * (w - t))
                .collect();
            let g = Tensor::<f64>::from_f64(&[4], &g).unwrap();
            adam_step(&mut [&mut p], &[&g], &mut state).unwrap();
        }
        for (a, b) in p.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
