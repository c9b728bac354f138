//! Adam optimizer with bias-corrected moment estimates.

use super::tape::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Optimizer for every parameter currently registered in `store`.
    /// Moment tensors are allocated with the exact parameter shapes.
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        let m = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        let v = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Only parameters that appear in `grads` are touched;
    /// their moments decay and the parameter moves by
    /// `lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let idx = id_index(store, *id, g)?;
            if !g.all_finite() {
                return Err(Error::Diverged {
                    op: "Adam::step",
                    step: self.step as usize,
                    detail: format!("non-finite gradient for {}", store.name(*id)),
                });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = store.get_mut(*id);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / b1t;
                let v_hat = vi / b2t;
                p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Validate the (id, grad) pair against the store and return the moment slot.
fn id_index(store: &ParamStore, id: ParamId, g: &Tensor) -> Result<usize> {
    // ParamStore ids are dense indices in registration order; Adam allocates
    // moments in the same order, so the id doubles as the slot. Guard the
    // shape so a mismatched store is caught instead of silently corrupting.
    let idx = store
        .ids()
        .position(|x| x == id)
        .ok_or_else(|| Error::contract("Adam::step", "gradient for unknown parameter"))?;
    if store.get(id).shape() != g.shape() {
        return Err(Error::shape(
            "Adam::step",
            format!(
                "gradient shape {:?} vs parameter {:?} for {}",
                g.shape(),
                store.get(id).shape(),
                store.name(id)
            ),
        ));
    }
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("x", Tensor::new([2], vec![5.0, -3.0]).unwrap());
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_direction() {
        // With fresh moments, bias correction makes the first update exactly
        // lr * sign(g) (up to eps).
        let (mut store, id) = quad_store();
        let mut opt = Adam::new(&store, 0.1);
        let g = Tensor::new([2], vec![2.0, -4.0]).unwrap();
        opt.step(&mut store, &[(id, g)]).unwrap();
        let p = store.get(id);
        assert!((p.data()[0] - (5.0 - 0.1)).abs() < 1e-5);
        assert!((p.data()[1] - (-3.0 + 0.1)).abs() < 1e-5);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_from_rest_leaves_parameters_fixed() {
        let (mut store, id) = quad_store();
        let before = store.get(id).clone();
        let mut opt = Adam::new(&store, 0.1);
        opt.step(&mut store, &[(id, Tensor::zeros([2]))]).unwrap();
        assert_eq!(store.get(id), &before);
    }

    #[test]
    fn zero_gradient_after_motion_decays_moments() {
        let (mut store, id) = quad_store();
        let mut opt = Adam::new(&store, 0.1);
        opt.step(&mut store, &[(id, Tensor::full([2], 1.0))]).unwrap();
        let m_before = opt.m[0].data()[0];
        opt.step(&mut store, &[(id, Tensor::zeros([2]))]).unwrap();
        assert!(opt.m[0].data()[0].abs() < m_before.abs());
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize f(x) = x^2 from x = 5; gradient is 2x.
        let (mut store, id) = quad_store();
        let mut opt = Adam::new(&store, 0.3);
        for _ in 0..400 {
            let g = store.get(id).scale(2.0);
            opt.step(&mut store, &[(id, g)]).unwrap();
        }
        assert!(store.get(id).data()[0].abs() < 0.05);
        assert!(store.get(id).data()[1].abs() < 0.05);
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let (mut store, id) = quad_store();
        let mut opt = Adam::new(&store, 0.1);
        assert!(opt.step(&mut store, &[(id, Tensor::zeros([3]))]).is_err());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (mut store, id) = quad_store();
        let mut opt = Adam::new(&store, 0.1);
        let g = Tensor::new([2], vec![f32::NAN, 0.0]).unwrap();
        assert!(opt.step(&mut store, &[(id, g)]).is_err());
    }
}
