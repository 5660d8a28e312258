use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{no_decay, Checkpoint, ModelParams};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn pretrain() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }

    pub fn finetune() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Adam moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub hyper: AdamW,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(hyper: AdamW) -> Self {
        OptimState {
            hyper,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    /// One AdamW update. `lr_scale` gives a per-parameter multiplier of `lr`
    /// (layer-wise decay). Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        lr_scale: &dyn Fn(&str) -> f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for (name, g) in grads {
            let p = params.tensors.get_mut(name).expect("checked above");
            let shape = p.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let lr_p = lr * lr_scale(name);
            let decay = if no_decay(name) { 0.0 } else { h.weight_decay };
            let (b1, b2) = (T::from_f64(h.beta1), T::from_f64(h.beta2));
            let (ob1, ob2) = (T::from_f64(1.0 - h.beta1), T::from_f64(1.0 - h.beta2));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                let mhat = mv.as_f64() / bc1;
                let vhat = vv.as_f64() / bc2;
                let x = pv.as_f64();
                let x = x - lr_p * decay * x - lr_p * mhat / (vhat.sqrt() + h.eps);
                *pv = T::from_f64(x);
            }
        }
        Ok(())
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        for (k, t) in &self.m {
            ckpt.insert(format!("optim.m.{k}"), t);
        }
        for (k, t) in &self.v {
            ckpt.insert(format!("optim.v.{k}"), t);
        }
        ckpt.insert("optim.step", &Tensor::<f64>::scalar(self.step as f64));
    }

    pub fn load_from(ckpt: &Checkpoint, hyper: AdamW) -> Result<Self> {
        let step = ckpt
            .get("optim.step")
            .ok_or_else(|| Error::Checkpoint {
                name: "optim.step".into(),
                msg: "missing; not a resumable checkpoint".into(),
            })?
            .to::<f64>()
            .item() as u64;
        Ok(OptimState {
            hyper,
            m: ckpt.params::<T>("optim.m.").tensors,
            v: ckpt.params::<T>("optim.v.").tensors,
            step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ModelParams<f64> {
        let mut tensors = BTreeMap::new();
        tensors.insert("w.weight".to_string(), Tensor::scalar(v));
        ModelParams { tensors }
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut g = BTreeMap::new();
        g.insert("w.weight".to_string(), Tensor::scalar(v));
        g
    }

    fn hyper(wd: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = single(1.0);
        let mut s = OptimState::new(hyper(0.0));
        s.step(&mut p, &grad(0.5), 0.1, &|_| 1.0).unwrap();
        let want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.get("w.weight").unwrap().item() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient() {
        let mut p = single(1.0);
        let mut s = OptimState::new(hyper(0.0));
        s.step(&mut p, &grad(0.0), 0.1, &|_| 1.0).unwrap();
        assert_eq!(p.get("w.weight").unwrap().item(), 1.0);
        let mut s = OptimState::new(hyper(0.5));
        s.step(&mut p, &grad(0.0), 0.1, &|_| 1.0).unwrap();
        assert!((p.get("w.weight").unwrap().item() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn biases_are_not_decayed() {
        let mut tensors = BTreeMap::new();
        tensors.insert("w.bias".to_string(), Tensor::scalar(1.0));
        let mut p = ModelParams { tensors };
        let mut g = BTreeMap::new();
        g.insert("w.bias".to_string(), Tensor::scalar(0.0));
        OptimState::new(hyper(0.5)).step(&mut p, &g, 0.1, &|_| 1.0).unwrap();
        assert_eq!(p.get("w.bias").unwrap().item(), 1.0);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = single(1.0);
        let mut s = OptimState::new(hyper(0.0));
        match s.step(&mut p, &grad(f64::NAN), 0.1, &|_| 1.0) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "w.weight"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.step, 0);
    }

    #[test]
    fn quadratic_bowl_descends() {
        let a = [1.0, 3.0, 0.2];
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "w.weight".to_string(),
            Tensor::from_f64(&[3], &[5.0, -4.0, 6.0]).unwrap(),
        );
        let mut p = ModelParams { tensors };
        let mut s = OptimState::new(hyper(0.0));
        let loss = |p: &ModelParams<f64>| {
            let w = p.get("w.weight").unwrap().data();
            (0..3).map(|i| a[i] * w[i] * w[i]).sum::<f64>()
        };
        let mut prev = loss(&p);
        for _ in 0..100 {
            let w = p.get("w.weight").unwrap().data().to_vec();
            let mut g = BTreeMap::new();
            g.insert(
                "w.weight".to_string(),
                Tensor::new(&[3], (0..3).map(|i| 2.0 * a[i] * w[i]).collect()).unwrap(),
            );
            s.step(&mut p, &g, 0.01, &|_| 1.0).unwrap();
            let l = loss(&p);
            assert!(l <= prev, "{l} > {prev}");
            prev = l;
        }
    }
}
