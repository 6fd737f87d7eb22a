use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Adam with bias correction and decoupled weight decay.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model<Tensor>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.leaves().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { beta1, beta2, eps, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Returns the updated parameters; `grads` must have the layout of
    /// `model`.
    pub fn step(&mut self, model: &Model<Tensor>, grads: &Model<Tensor>, lr: f64) -> Result<Model<Tensor>> {
        let params = model.leaves();
        let grads = grads.leaves();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid("adam", "gradient layout differs from the parameters"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut next = (*p).clone();
            for (j, (w, &gj)) in next.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
            out.push(next);
        }
        model.with_leaves(out)
    }
}

pub fn global_norm(grads: &Model<Tensor>) -> f64 {
    grads.leaves().iter().flat_map(|t| t.data().iter()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`; a
/// non-positive `max_norm` leaves them unchanged. Returns the norm before
/// clipping.
pub fn clip_global_norm(grads: &Model<Tensor>, max_norm: f64) -> Result<(Model<Tensor>, f64)> {
    let norm = global_norm(grads);
    if max_norm <= 0.0 || norm <= max_norm {
        return Ok((grads.try_map(&mut |t| Ok(t.clone()))?, norm));
    }
    let s = max_norm / norm;
    Ok((grads.try_map(&mut |t| Ok(t.scale(s)))?, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsm::Instance;
    use crate::model::{build_model, ModelConfig};
    use crate::rng::Rng;

    fn tiny() -> Model<Tensor> {
        let cfg = ModelConfig::preset("tiny", Instance::Bla).unwrap();
        build_model(&cfg, &mut Rng::seed(0)).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let model = tiny();
        let grads = model.try_map(&mut |t| Ok(t.map(|x| if x >= 0.0 { 0.3 } else { -2.0 }))).unwrap();
        let mut adam = Adam::new(&model, 0.9, 0.95, 0.0, 0.0);
        let next = adam.step(&model, &grads, 0.01).unwrap();
        for ((p, g), n) in model.leaves().iter().zip(grads.leaves()).zip(next.leaves()) {
            for ((a, b), c) in p.data().iter().zip(g.data()).zip(n.data()) {
                assert!((c - (a - 0.01 * b.signum())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let grads = tiny().try_map(&mut |t| Ok(Tensor::ones(t.shape()))).unwrap();
        let n = global_norm(&grads);
        let (clipped, before) = clip_global_norm(&grads, 1.0).unwrap();
        assert_eq!(before, n);
        assert!((global_norm(&clipped) - 1.0).abs() < 1e-12);
        let (same, _) = clip_global_norm(&grads, 0.0).unwrap();
        assert_eq!(global_norm(&same), n);
    }
}
