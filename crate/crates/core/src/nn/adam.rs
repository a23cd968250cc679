use super::{GradStore, Tensor, WeightStore};

/// Adam optimizer. Moment buffers are allocated per trainable weight tensor;
/// frozen tensors get no state and are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    slots: Vec<Option<Moments>>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

impl Adam {
    pub fn new(store: &WeightStore, lr: f64) -> Self {
        let slots = store
            .entries()
            .iter()
            .map(|e| {
                e.trainable.then(|| Moments {
                    m: Tensor::zeros(e.tensor.shape()),
                    v: Tensor::zeros(e.tensor.shape()),
                })
            })
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots,
        }
    }

    /// Apply one update. Weights without a gradient entry are left untouched.
    pub fn apply(&mut self, store: &mut WeightStore, grads: &GradStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, grad) in grads.iter_present() {
            let Some(moments) = self.slots[idx].as_mut() else {
                continue;
            };
            let w = store.tensor_mut(idx).data_mut();
            let m = moments.m.data_mut();
            let v = moments.v.data_mut();
            let g = grad.data();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
