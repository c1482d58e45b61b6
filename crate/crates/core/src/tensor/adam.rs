use super::{ParamId, ParamStore, Real};
use crate::error::{Result, SdError};

/// Bias-corrected Adam over a subset of a [`ParamStore`]. Two instances with
/// different learning rates can drive disjoint subsets of the same store.
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    step: u64,
    slots: Vec<Slot<F>>,
}

#[derive(Debug, Clone)]
struct Slot<F> {
    id: ParamId,
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Real> Adam<F> {
    /// Defaults β₁ = 0.9, β₂ = 0.999, eps = 1e-8.
    pub fn new(store: &ParamStore<F>, ids: &[ParamId], lr: f64) -> Self {
        Self::with_betas(store, ids, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(
        store: &ParamStore<F>,
        ids: &[ParamId],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        let slots = ids
            .iter()
            .map(|&id| {
                let n = store.get(id).numel();
                Slot { id, m: vec![F::ZERO; n], v: vec![F::ZERO; n] }
            })
            .collect();
        Adam {
            lr: F::from_f64(lr),
            beta1: F::from_f64(beta1),
            beta2: F::from_f64(beta2),
            eps: F::from_f64(eps),
            step: 0,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = F::from_f64(lr);
    }

    /// One update over all managed parameters. `grads` is indexed by raw
    /// `ParamId`; a managed parameter without a gradient is a contract error.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Vec<F>>]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::ONE - pow(self.beta1, t);
        let bc2 = F::ONE - pow(self.beta2, t);
        for slot in &mut self.slots {
            let g = grads
                .get(slot.id.0)
                .and_then(|g| g.as_ref())
                .ok_or_else(|| {
                    SdError::Contract(format!(
                        "missing gradient for parameter {:?}",
                        store.name(slot.id)
                    ))
                })?;
            let p = store.get_mut(slot.id);
            debug_assert_eq!(g.len(), p.numel());
            let one = F::ONE;
            for ((w, &gv), (m, v)) in
                p.data_mut().iter_mut().zip(g).zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                *m = self.beta1 * *m + (one - self.beta1) * gv;
                *v = self.beta2 * *v + (one - self.beta2) * gv * gv;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w = *w - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn pow<F: Real>(base: F, exp: i32) -> F {
    let mut acc = F::ONE;
    for _ in 0..exp {
        acc = acc * base;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::scalar(v));
        (ps, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut ps, id) = store_with(0.7);
        let mut opt = Adam::with_betas(&ps, &[id], 1e-3, 0.9, 0.999, 1e-8);
        let grads = vec![Some(vec![0.0])];
        for _ in 0..10 {
            opt.step(&mut ps, &grads).unwrap();
        }
        assert_eq!(ps.get(id).data()[0], 0.7);
    }

    #[test]
    fn constant_gradient_descends_against_sign() {
        let (mut ps, id) = store_with(0.0);
        let mut opt = Adam::new(&ps, &[id], 1e-3);
        let grads = vec![Some(vec![1.0])];
        for _ in 0..200 {
            opt.step(&mut ps, &grads).unwrap();
        }
        assert!(ps.get(id).data()[0] < -0.1, "parameter should move opposite to the gradient");
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // g = 1, defaults: delta = -lr * 1 / (1 + eps)
        let (mut ps, id) = store_with(0.0);
        let mut opt = Adam::new(&ps, &[id], 1e-3);
        opt.step(&mut ps, &vec![Some(vec![1.0])]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((ps.get(id).data()[0] - expected).abs() < 1e-12);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn hundred_step_trajectories_are_bit_identical() {
        // same seed, same data: the parameter trajectory must match exactly
        let run = || {
            let mut ps = ParamStore::<f32>::new();
            let mut rng = crate::rng::stream(42, 0);
            let w = ps.add("w", crate::tensor::Tensor::randn(vec![4, 4], 1.0, &mut rng));
            let mut opt = Adam::new(&ps, &[w], 1e-3);
            let mut trace = Vec::new();
            for step in 0..100 {
                // deterministic pseudo-gradient derived from the current weights
                let g: Vec<f32> = ps
                    .get(w)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * 0.1 + (step as f32 + i as f32) * 1e-3)
                    .collect();
                let grads = vec![Some(g)];
                opt.step(&mut ps, &grads).unwrap();
                trace.extend_from_slice(ps.get(w).data());
            }
            trace
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let (mut ps, id) = store_with(0.0);
        let mut opt = Adam::new(&ps, &[id], 1e-3);
        let err = opt.step(&mut ps, &vec![None]).unwrap_err();
        assert!(matches!(err, SdError::Contract(_)));
    }
}
