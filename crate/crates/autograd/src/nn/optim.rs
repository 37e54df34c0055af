//! First-order optimizers. Each instance owns its parameter group; training
//! loops that alternate phases hold one instance per group so stepping one
//! group cannot disturb another.

use ndarray::ArrayD;

use super::Param;

/// SGD with classical momentum: v = mu*v + g; p -= lr*v.
pub struct SgdMomentum {
    params: Vec<Param>,
    vel: Vec<ArrayD<f64>>,
    pub lr: f64,
    pub momentum: f64,
}

impl SgdMomentum {
    pub fn new(params: Vec<Param>, lr: f64, momentum: f64) -> Self {
        let vel = params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect();
        SgdMomentum { params, vel, lr, momentum }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Apply one update. `grads[i]` pairs with `params[i]`; `None` leaves the
    /// parameter and its momentum untouched.
    pub fn step(&mut self, grads: &[Option<ArrayD<f64>>]) {
        assert_eq!(grads.len(), self.params.len(), "grad/param count mismatch");
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let v = &mut self.vel[i];
            v.zip_mut_with(g, |v, &g| *v = *v * self.momentum + g);
            let mut p = self.params[i].to_owned_array();
            p.zip_mut_with(v, |p, &v| *p -= self.lr * v);
            self.params[i].set_value(p);
        }
    }

    /// State tensors for checkpointing, in parameter order.
    pub fn state(&self, prefix: &str) -> Vec<(String, ArrayD<f64>)> {
        self.vel
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("{}.vel.{}", prefix, i), v.clone()))
            .collect()
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &dyn Fn(&str) -> Option<ArrayD<f64>>) -> Result<(), String> {
        for i in 0..self.vel.len() {
            let name = format!("{}.vel.{}", prefix, i);
            let v = tensors(&name).ok_or_else(|| format!("missing optimizer state {}", name))?;
            if v.shape() != self.vel[i].shape() {
                return Err(format!("optimizer state {} shape mismatch", name));
            }
            self.vel[i] = v;
        }
        Ok(())
    }
}

/// Adam with bias correction (beta powers tracked via the step counter).
pub struct Adam {
    params: Vec<Param>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: Vec<Param>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect();
        let v = params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect();
        Adam { params, m, v, t: 0, lr, beta1, beta2, eps: 1e-8 }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn step(&mut self, grads: &[Option<ArrayD<f64>>]) {
        assert_eq!(grads.len(), self.params.len(), "grad/param count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut p = self.params[i].to_owned_array();
            ndarray::Zip::from(&mut p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m / bc1;
                let vh = v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            });
            self.params[i].set_value(p);
        }
    }

    pub fn state(&self, prefix: &str) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        // The bias-correction step counter is part of the state: resuming
        // without it changes every subsequent update.
        out.push((
            format!("{}.t", prefix),
            ArrayD::from_elem(ndarray::IxDyn(&[1]), self.t as f64),
        ));
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("{}.m.{}", prefix, i), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("{}.v.{}", prefix, i), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &dyn Fn(&str) -> Option<ArrayD<f64>>) -> Result<(), String> {
        let name = format!("{}.t", prefix);
        let t = tensors(&name).ok_or_else(|| format!("missing optimizer state {}", name))?;
        if t.len() != 1 {
            return Err(format!("optimizer state {} must hold one value", name));
        }
        self.t = t[[0]] as u64;
        for i in 0..self.m.len() {
            let name = format!("{}.m.{}", prefix, i);
            let m = tensors(&name).ok_or_else(|| format!("missing optimizer state {}", name))?;
            if m.shape() != self.m[i].shape() {
                return Err(format!("optimizer state {} shape mismatch", name));
            }
            self.m[i] = m;
            let name = format!("{}.v.{}", prefix, i);
            let v = tensors(&name).ok_or_else(|| format!("missing optimizer state {}", name))?;
            if v.shape() != self.v[i].shape() {
                return Err(format!("optimizer state {} shape mismatch", name));
            }
            self.v[i] = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn p(vals: &[f64]) -> Param {
        Param::new(ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap())
    }

    #[test]
    fn sgd_momentum_matches_hand_rolled_two_steps() {
        let param = p(&[1.0]);
        let mut opt = SgdMomentum::new(vec![param.clone()], 0.1, 0.9);
        let g = ArrayD::from_elem(IxDyn(&[1]), 2.0);
        opt.step(&[Some(g.clone())]);
        // v = 2, p = 1 - 0.2 = 0.8
        assert!((param.to_owned_array()[0] - 0.8).abs() < 1e-15);
        opt.step(&[Some(g)]);
        // v = 0.9*2 + 2 = 3.8, p = 0.8 - 0.38 = 0.42
        assert!((param.to_owned_array()[0] - 0.42).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction, the first Adam step is ~lr * sign(g).
        let param = p(&[0.0]);
        let mut opt = Adam::new(vec![param.clone()], 0.01, 0.0, 0.999);
        let g = ArrayD::from_elem(IxDyn(&[1]), 3.0);
        opt.step(&[Some(g)]);
        let got = param.to_owned_array()[0];
        assert!((got + 0.01).abs() < 1e-6, "got {}", got);
    }

    #[test]
    fn none_grad_skips_param_and_momentum() {
        let a = p(&[1.0]);
        let b = p(&[1.0]);
        let mut opt = SgdMomentum::new(vec![a.clone(), b.clone()], 0.1, 0.9);
        opt.step(&[Some(ArrayD::from_elem(IxDyn(&[1]), 1.0)), None]);
        assert!(a.to_owned_array()[0] != 1.0);
        assert_eq!(b.to_owned_array()[0], 1.0);
    }

    #[test]
    fn state_roundtrip_restores_velocity() {
        let a = p(&[1.0]);
        let mut opt = SgdMomentum::new(vec![a.clone()], 0.1, 0.9);
        opt.step(&[Some(ArrayD::from_elem(IxDyn(&[1]), 1.0))]);
        let saved = opt.state("sgd");
        let mut opt2 = SgdMomentum::new(vec![a], 0.1, 0.9);
        opt2.load_state("sgd", &|name| {
            saved.iter().find(|(n, _)| n == name).map(|(_, v)| v.clone())
        })
        .unwrap();
        assert_eq!(opt2.vel[0], opt.vel[0]);
    }
}
