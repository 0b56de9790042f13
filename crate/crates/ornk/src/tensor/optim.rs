use crate::{Error, Result};

/// Bias-corrected Adam. Moment buffers are aligned, by index, with the
/// parameter list the caller passes to every `adam_update`.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_sizes: &[usize], learning_rate: f64) -> Self {
        AdamState {
            first_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One optimizer step over `(values, gradient)` pairs, in the order the
/// state was built with.
pub fn adam_update(state: &mut AdamState, params: &mut [(&mut [f64], &[f64])]) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "adam state tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (pi, (values, grads)) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[pi];
        let v = &mut state.second_moment[pi];
        if values.len() != m.len() || grads.len() != m.len() {
            return Err(Error::Shape(format!(
                "parameter {pi} has {} values and {} gradients, state expects {}",
                values.len(),
                grads.len(),
                m.len()
            )));
        }
        for i in 0..values.len() {
            let g = grads[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            values[i] -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Reduce-on-plateau: multiply the rate by `factor` after `patience`
/// consecutive epochs without strict improvement of the best seen
/// validation loss. The counter resets on improvement and on reduction.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub learning_rate: f64,
    pub patience: usize,
    pub factor: f64,
    best_loss: f64,
    epochs_since_improvement: usize,
}

impl PlateauSchedule {
    pub fn new(learning_rate: f64, patience: usize, factor: f64) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("plateau patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&factor) || factor == 0.0 {
            return Err(Error::Config(format!("plateau factor must be in (0,1), got {factor}")));
        }
        Ok(PlateauSchedule {
            learning_rate,
            patience,
            factor,
            best_loss: f64::INFINITY,
            epochs_since_improvement: 0,
        })
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

/// Called once per epoch with that epoch's validation loss; returns the
/// learning rate to use next.
pub fn plateau_step(schedule: &mut PlateauSchedule, validation_loss: f64) -> f64 {
    if validation_loss < schedule.best_loss {
        schedule.best_loss = validation_loss;
        schedule.epochs_since_improvement = 0;
    } else {
        schedule.epochs_since_improvement += 1;
        if schedule.epochs_since_improvement >= schedule.patience {
            schedule.learning_rate *= schedule.factor;
            schedule.epochs_since_improvement = 0;
        }
    }
    schedule.learning_rate
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_noop() {
        let mut state = AdamState::new(&[3], 0.1);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        let before = p.clone();
        adam_update(&mut state, &mut [(&mut p, &g)]).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_about_lr_against_gradient() {
        // Bias correction makes the first step magnitude ~ lr regardless
        // of gradient scale.
        for g in [0.01, 1.0, 250.0] {
            let mut state = AdamState::new(&[1], 0.1);
            let mut p = vec![0.0];
            let grads = vec![g];
            adam_update(&mut state, &mut [(&mut p, &grads)]).unwrap();
            assert!((p[0] + 0.1).abs() < 1e-6, "g={g} moved to {}", p[0]);
        }
        let mut state = AdamState::new(&[1], 0.1);
        let mut p = vec![0.0];
        adam_update(&mut state, &mut [(&mut p, &[-3.0][..])]).unwrap();
        assert!((p[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_a_parabola() {
        let mut state = AdamState::new(&[1], 0.1);
        let mut x = vec![1.0];
        for _ in 0..200 {
            let g = vec![2.0 * x[0]];
            adam_update(&mut state, &mut [(&mut x, &g)]).unwrap();
        }
        assert!(x[0].abs() < 0.05, "ended at {}", x[0]);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut state = AdamState::new(&[2], 0.1);
        let mut p = vec![0.0; 3];
        let g = vec![0.0; 3];
        assert!(adam_update(&mut state, &mut [(&mut p, &g)]).is_err());
    }

    #[test]
    fn plateau_keeps_rate_while_improving() {
        let mut s = PlateauSchedule::new(1.0, 10, 0.5).unwrap();
        for e in 0..30 {
            let lr = plateau_step(&mut s, 1.0 / (e + 1) as f64);
            assert_eq!(lr, 1.0);
        }
    }

    #[test]
    fn plateau_halves_after_patience_constant_epochs() {
        let mut s = PlateauSchedule::new(1.0, 10, 0.5).unwrap();
        let mut rates = Vec::new();
        for _ in 0..11 {
            rates.push(plateau_step(&mut s, 0.7));
        }
        // First call improves over +inf; the next ten stall; the halving
        // lands exactly on the 11th call.
        assert!(rates[..10].iter().all(|&r| r == 1.0));
        assert_eq!(rates[10], 0.5);
    }

    #[test]
    fn plateau_two_halvings_over_21_constant_epochs() {
        let mut s = PlateauSchedule::new(1.0, 10, 0.5).unwrap();
        let mut rates = vec![plateau_step(&mut s, 0.7)];
        for _ in 0..21 {
            rates.push(plateau_step(&mut s, 0.7));
        }
        assert_eq!(rates[10], 0.5);
        assert_eq!(rates[20], 0.25);
        assert_eq!(rates.iter().filter(|&&r| r == 0.5).count(), 10);
    }

    #[test]
    fn plateau_counter_resets_on_improvement() {
        let mut s = PlateauSchedule::new(1.0, 3, 0.5).unwrap();
        plateau_step(&mut s, 1.0);
        plateau_step(&mut s, 1.0);
        plateau_step(&mut s, 1.0);
        // Improvement just before the patience boundary.
        assert_eq!(plateau_step(&mut s, 0.5), 1.0);
        plateau_step(&mut s, 0.5);
        plateau_step(&mut s, 0.5);
        assert_eq!(plateau_step(&mut s, 0.5), 0.5);
    }
}
