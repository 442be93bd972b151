use super::TrainConfig;
use crate::model::ModelParams;

/// Adam with bias correction. A non-zero weight decay is applied decoupled,
/// and only to matrices (embeddings and projections), not to biases or norms.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    t: i32,
    decay: Vec<bool>,
    m: ModelParams<f32>,
    v: ModelParams<f32>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ModelParams<f32>) -> Self {
        let zeros = ModelParams::zeros(&params.config).expect("params carry a valid config");
        Adam {
            lr: cfg.learning_rate as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.epsilon as f32,
            weight_decay: cfg.weight_decay as f32,
            t: 0,
            decay: params.tensors().iter().map(|(_, shape, _)| shape.len() >= 2).collect(),
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let grads = grads.tensors();
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(&self.decay);
        for (((((_, p), (_, _, g)), (_, m)), (_, v)), &decay) in tensors {
            let wd = if decay { self.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = ModelConfig {
            d_model: 4,
            context_len: 4,
            ..ModelConfig::default()
        };
        let mut p = ModelParams::<f32>::zeros(&cfg).unwrap();
        let mut g = ModelParams::<f32>::zeros(&cfg).unwrap();
        g.tok_emb[[0, 0]] = 0.5;
        g.tok_emb[[0, 1]] = -2.0;
        let mut adam = Adam::new(&TrainConfig::default(), &p);
        adam.step(&mut p, &g);
        // bias-corrected first step is lr * sign(g)
        assert!((p.tok_emb[[0, 0]] + 1e-3).abs() < 1e-7);
        assert!((p.tok_emb[[0, 1]] - 1e-3).abs() < 1e-7);
        assert_eq!(p.tok_emb[[1, 0]], 0.0);
        assert_eq!(adam.steps(), 1);
    }
}
