use super::mlp::{Layer, Mlp, MlpGrads};

/// Bias-corrected Adam moments for one network.
#[derive(Clone, Debug)]
pub struct AdamState {
    first: Vec<Layer>,
    second: Vec<Layer>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        let zeros = || MlpGrads::zeros_like(net).layers;
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, net: &mut Mlp, grads: &MlpGrads) {
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.learning_rate);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, grad), m), v) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            ndarray::Zip::from(&mut layer.w)
                .and(&grad.w)
                .and(&mut m.w)
                .and(&mut v.w)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
            ndarray::Zip::from(&mut layer.b)
                .and(&grad.b)
                .and(&mut m.b)
                .and(&mut v.b)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
        }
    }
}
