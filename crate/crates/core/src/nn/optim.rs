use ndarray::ArrayD;

use super::{cast, Param, Scalar};

/// Adam with decoupled weight decay.
///
/// Moment buffers are matched to parameters by position, so callers must
/// pass parameters in the same order on every step.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(ArrayD<T>, ArrayD<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param<T>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2): (T, T) = (cast(self.beta1), cast(self.beta2));
        let decay: T = cast(1.0 - lr * self.weight_decay);
        let step_size: T = cast(lr / bc1);
        let bc2_sqrt: T = cast(bc2.sqrt());
        let eps: T = cast(self.eps);
        for (i, p) in params.into_iter().filter(|p| p.trainable).enumerate() {
            if i == self.moments.len() {
                self.moments
                    .push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut self.moments[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *w *= decay;
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let denom = v.sqrt() / bc2_sqrt + eps;
                    *w -= step_size * *m / denom;
                });
        }
    }
}
