use crate::model::Params;
use crate::numerics::Real;

/// Linear warmup: `base_lr * min(1, (step + 1) / warmup_iters)`.
pub fn warmup_lr(step: usize, base_lr: f64, warmup_iters: usize) -> f64 {
    if warmup_iters == 0 {
        return base_lr;
    }
    base_lr * ((step + 1) as f64 / warmup_iters as f64).min(1.0)
}

/// Per-parameter moment buffers for AdamW.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &Params<T>, (beta1, beta2): (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        AdamW { beta1, beta2, eps, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One decoupled-weight-decay update. `lr(i)` is the rate for tensor `i`.
    ///
    /// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`
    pub fn step(&mut self, params: &mut Params<T>, grads: &[Vec<T>], lr: impl Fn(usize) -> f64) {
        assert_eq!(grads.len(), params.tensors.len(), "one gradient per parameter tensor");
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(self.t));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t));
        let eps = T::of(self.eps);
        let wd = T::of(self.weight_decay);
        for (i, ((_, p), g)) in params.tensors.iter_mut().zip(grads).enumerate() {
            let rate = T::of(lr(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - rate * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
    }
}
