use super::param::ParamStore;

pub trait Optimizer {
    /// Applies one update from the grads accumulated in `store`.
    fn step(&mut self, store: &mut ParamStore);

    fn set_learning_rate(&mut self, lr: f64);
}

/// SGD with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) {
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        }
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else { continue };
            for ((w, v), g) in p.tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else { continue };
            for (((w, m), v), g) in p.tensor.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&grad) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}
