//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub step: u64,
    /// First and second moments, indexed like the parameter store.
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
    /// Learning-rate multipliers for parameters whose name starts with the prefix.
    pub prefix_scales: Vec<(String, f64)>,
}

impl<T: Float> AdamW<T> {
    pub fn new(num_params: usize) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
            prefix_scales: Vec::new(),
        }
    }

    fn lr_scale(&self, name: &str) -> f64 {
        self.prefix_scales
            .iter()
            .find(|(prefix, _)| name.starts_with(prefix.as_str()))
            .map_or(1.0, |&(_, s)| s)
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Non-finite gradients abort before anything is modified.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads
            .iter()
            .flatten()
            .any(|g| g.data().iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NumericFailure {
                step: self.step as usize,
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            if !store.is_trainable(id) {
                continue;
            }
            let lr = lr * self.lr_scale(&store.get(id).name);
            let decay = if store.get(id).kind.decays() {
                lr * weight_decay
            } else {
                0.0
            };
            let shape = g.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(shape));
            let p = store.value_mut(id).data_mut();
            for (((p, &g), m), v) in p
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let (pf, gf) = (p.to_f64().unwrap(), g.to_f64().unwrap());
                let pf = pf - decay * pf;
                let mf = b1 * m.to_f64().unwrap() + (1.0 - b1) * gf;
                let vf = b2 * v.to_f64().unwrap() + (1.0 - b2) * gf * gf;
                *m = T::of(mf);
                *v = T::of(vf);
                *p = T::of(pf - lr * (mf / bc1) / ((vf / bc2).sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Float>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.to_f64().unwrap();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales the gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Float>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    fn scalar_store(w: f64, kind: ParamKind) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::scalar(w), kind).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(1.0, ParamKind::Weight);
        let mut opt = AdamW::new(1);
        opt.update(&mut store, &[Some(Tensor::scalar(1.0))], 0.1, 0.0)
            .unwrap();
        let w = store.value(store.find("w").unwrap()).data()[0];
        assert!((w - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut store = scalar_store(0.3, ParamKind::Weight);
        let mut opt = AdamW::new(1);
        for _ in 0..3 {
            opt.update(&mut store, &[Some(Tensor::scalar(0.0))], 0.1, 0.0)
                .unwrap();
        }
        assert_eq!(store.value(store.find("w").unwrap()).data()[0], 0.3);
    }

    #[test]
    fn prefix_scale_shrinks_the_step() {
        let mut store = scalar_store(1.0, ParamKind::Weight);
        let mut opt = AdamW::new(1);
        opt.prefix_scales = vec![("w".into(), 0.5)];
        opt.update(&mut store, &[Some(Tensor::scalar(1.0))], 0.1, 0.0)
            .unwrap();
        let w = store.value(store.find("w").unwrap()).data()[0];
        assert!((w - 0.95).abs() < 1e-6);
    }

    #[test]
    fn decay_skips_norm_parameters() {
        let mut store = scalar_store(2.0, ParamKind::Norm);
        let mut opt = AdamW::new(1);
        opt.update(&mut store, &[Some(Tensor::scalar(0.0))], 0.1, 0.5)
            .unwrap();
        assert_eq!(store.value(store.find("w").unwrap()).data()[0], 2.0);
        let mut store = scalar_store(2.0, ParamKind::Weight);
        let mut opt = AdamW::new(1);
        opt.update(&mut store, &[Some(Tensor::scalar(0.0))], 0.1, 0.5)
            .unwrap();
        assert!((store.value(store.find("w").unwrap()).data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = scalar_store(1.25, ParamKind::Weight);
        let id = store.find("w").unwrap();
        store.set_trainable(id, false);
        let mut opt = AdamW::new(1);
        opt.update(&mut store, &[Some(Tensor::scalar(5.0))], 0.1, 0.05)
            .unwrap();
        assert_eq!(store.value(id).data()[0].to_bits(), 1.25f64.to_bits());
    }

    #[test]
    fn nan_gradient_reports_step() {
        let mut store = scalar_store(1.0, ParamKind::Weight);
        let mut opt = AdamW::new(1);
        opt.update(&mut store, &[Some(Tensor::scalar(1.0))], 0.1, 0.0)
            .unwrap();
        let err = opt
            .update(&mut store, &[Some(Tensor::scalar(f64::NAN))], 0.1, 0.0)
            .unwrap_err();
        assert!(matches!(err, Error::NumericFailure { step: 1 }));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Some(Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap()), None];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
