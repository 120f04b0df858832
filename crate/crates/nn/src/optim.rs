use crate::param::Module;

/// Stochastic gradient descent with classical momentum:
/// `v <- mu * v + g; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) {
        let (lr, mu, wd) = (
            self.lr as f32,
            self.momentum as f32,
            self.weight_decay as f32,
        );
        let mut slot = 0;
        let velocity = &mut self.velocity;
        model.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            if velocity.len() <= slot {
                velocity.push(vec![0.0; p.numel()]);
            }
            let v = &mut velocity[slot];
            for ((w, g), vi) in p.value.iter_mut().zip(p.grad.iter_mut()).zip(v.iter_mut()) {
                let grad = *g + wd * *w;
                *vi = mu * *vi + grad;
                *w -= lr * *vi;
                *g = 0.0;
            }
            slot += 1;
        });
    }
}

/// Adam with bias correction; weight decay is added to the gradient (L2).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let (eps, wd) = (self.eps as f32, self.weight_decay as f32);
        let mut slot = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            if ms.len() <= slot {
                ms.push(vec![0.0; p.numel()]);
                vs.push(vec![0.0; p.numel()]);
            }
            let (m, v) = (&mut ms[slot], &mut vs[slot]);
            for i in 0..p.value.len() {
                let g = p.grad[i] + wd * p.value[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= step * m[i] / (v[i].sqrt() + eps);
                p.grad[i] = 0.0;
            }
            slot += 1;
        });
    }
}

/// Either optimiser behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd(o) => o.lr,
            Optimizer::Adam(o) => o.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) {
        match self {
            Optimizer::Sgd(o) => o.step(model),
            Optimizer::Adam(o) => o.step(model),
        }
    }
}
