//! Adam with an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelState};
use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { warmup_steps: 400, peak_lr: 3e-3 }
    }
}

impl Schedule {
    /// Linear warmup to `peak_lr`, then inverse-square-root decay.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

/// Per-parameter first/second moments plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: u64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &ModelState<T>, schedule: Schedule) -> Self {
        let zeros =
            |p: &Matrix<T>| Matrix::zeros(p.rows(), p.cols());
        OptimizerState {
            m: model.params().iter().map(zeros).collect(),
            v: model.params().iter().map(zeros).collect(),
            step: 0,
            schedule,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Matrix<T>], &[Matrix<T>]) {
        (&self.m, &self.v)
    }

    /// Restores persisted moments + step (shapes must match the model).
    pub fn restore(&mut self, m: Vec<Matrix<T>>, v: Vec<Matrix<T>>, step: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::ShapeMismatch("moment count".into()));
        }
        for (a, b) in m.iter().zip(self.m.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch("moment shape".into()));
            }
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }

    /// Grows moment arrays alongside an embedding-grown model; new rows
    /// start at zero.
    pub fn expand_to(&mut self, model: &ModelState<T>) -> Result<()> {
        if model.params().len() != self.m.len() {
            return Err(Error::ShapeMismatch("parameter count changed".into()));
        }
        for moment_set in [&mut self.m, &mut self.v] {
            for (mom, p) in moment_set.iter_mut().zip(model.params()) {
                if mom.shape() == p.shape() {
                    continue;
                }
                if mom.cols() != p.cols() || mom.rows() > p.rows() {
                    return Err(Error::ShapeMismatch(format!(
                        "moment {:?} cannot grow to {:?}",
                        mom.shape(),
                        p.shape()
                    )));
                }
                let mut grown = Matrix::zeros(p.rows(), p.cols());
                for r in 0..mom.rows() {
                    grown.row_mut(r).copy_from_slice(mom.row(r));
                }
                *mom = grown;
            }
        }
        Ok(())
    }

    /// One Adam step with bias correction at the scheduled learning rate.
    pub fn apply_update(&mut self, model: &mut ModelState<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch("gradient count".into()));
        }
        for (g, p) in grads.iter().zip(model.params()) {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let lr = T::from_f64(self.schedule.lr(self.step));
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        for ((p, g), (m, v)) in model
            .params_mut()
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pm = p.as_mut_slice();
            let gm = g.as_slice();
            let mm = m.as_mut_slice();
            let vm = v.as_mut_slice();
            for i in 0..pm.len() {
                let gi = gm[i];
                mm[i] = b1 * mm[i] + (one - b1) * gi;
                vm[i] = b2 * vm[i] + (one - b2) * gi * gi;
                let m_hat = mm[i] / bc1;
                let v_hat = vm[i] / bc2;
                pm[i] = pm[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Batch, ModelConfig};

    fn small_model(seed: u64) -> ModelState<f64> {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            dropout: 0.0,
            max_len: 16,
            src_vocab_size: 10,
            tgt_vocab_size: 10,
            seed,
            shared_src_tgt_embeddings: false,
            label_smoothing: 0.1,
        };
        ModelState::init(cfg).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule { warmup_steps: 100, peak_lr: 1e-3 };
        assert!(s.lr(1) < s.lr(50));
        assert!((s.lr(100) - 1e-3).abs() < 1e-12);
        assert!(s.lr(400) < s.lr(100));
        assert!((s.lr(400) - 1e-3 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut model = small_model(3);
        let before: Vec<Vec<f64>> =
            model.params().iter().map(|p| p.as_slice().to_vec()).collect();
        let zeros: Gradients<f64> =
            model.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let mut opt = OptimizerState::new(&model, Schedule::default());
        opt.apply_update(&mut model, &zeros).unwrap();
        assert_eq!(opt.step(), 1);
        for (p, b) in model.params().iter().zip(before.iter()) {
            assert_eq!(p.as_slice(), b.as_slice());
        }
    }

    #[test]
    fn one_step_matches_hand_adam() {
        // single scalar parameter: run the update and check against the
        // hand-derived formula with bias correction.
        let mut model = small_model(4);
        let g0 = 0.25f64;
        let grads: Gradients<f64> = model
            .params()
            .iter()
            .map(|p| {
                let mut m = Matrix::zeros(p.rows(), p.cols());
                m.as_mut_slice().iter_mut().for_each(|x| *x = g0);
                m
            })
            .collect();
        let schedule = Schedule { warmup_steps: 10, peak_lr: 1e-2 };
        let mut opt = OptimizerState::new(&model, schedule);
        let theta0 = model.params()[0].get(1, 0);
        opt.apply_update(&mut model, &grads).unwrap();

        let lr = 1e-2 * (1.0f64 / 10.0); // step 1 of 10 warmup
        let m1 = 0.1 * g0;
        let v1 = 0.02 * g0 * g0;
        let m_hat = m1 / (1.0 - 0.9);
        let v_hat = v1 / (1.0 - 0.98);
        let expected = theta0 - lr * m_hat / (v_hat.sqrt() + 1e-9);
        let got = model.params()[0].get(1, 0);
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut model = small_model(5);
        let mut opt = OptimizerState::new(&model, Schedule::default());
        let bad: Gradients<f64> = vec![Matrix::zeros(1, 1)];
        assert!(matches!(opt.apply_update(&mut model, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn toy_training_loss_decreases() {
        // tiny copy task: target equals source
        let mut model = small_model(6);
        let mut opt = OptimizerState::new(&model, Schedule { warmup_steps: 40, peak_lr: 5e-3 });
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..50)
            .map(|i| {
                let a = 4 + (i % 6);
                let b = 4 + ((i * 3 + 1) % 6);
                (vec![a, b], vec![a, b])
            })
            .collect();
        let batch = Batch {
            src: pairs.iter().map(|(s, _)| s.clone()).collect(),
            tgt: pairs.iter().map(|(_, t)| t.clone()).collect(),
            weights: vec![1.0; pairs.len()],
        };
        let (first, _) = model.loss_and_grads(&batch, None).unwrap();
        let mut last = first.loss;
        for _ in 0..200 {
            let (info, grads) = model.loss_and_grads(&batch, None).unwrap();
            opt.apply_update(&mut model, &grads).unwrap();
            last = info.loss;
        }
        assert!(
            last < first.loss * 0.5,
            "loss should drop: first {} last {last}",
            first.loss
        );
        assert!(model.all_finite());
    }
}
