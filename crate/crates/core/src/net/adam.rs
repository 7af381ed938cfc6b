//! First-order adaptive-moment optimizer.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use super::{ConsistencyNetwork, NetGrads};

pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    bc1: f32,
    bc2: f32,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            bc1: 1.0,
            bc2: 1.0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f32 {
        self.lr
    }

    /// Advances the timestep; call once per batch before `update`.
    pub fn begin_step(&mut self) {
        self.t += 1;
        self.bc1 = 1.0 - self.beta1.powi(self.t);
        self.bc2 = 1.0 - self.beta2.powi(self.t);
    }

    /// Updates one parameter tensor. `slot` identifies the tensor; moments
    /// are allocated lazily per slot.
    pub fn update(&mut self, slot: usize, mut param: ArrayViewMutD<'_, f32>, grad: ArrayViewD<'_, f32>) {
        while self.m.len() <= slot {
            self.m.push(ArrayD::zeros(ndarray::IxDyn(&[0])));
            self.v.push(ArrayD::zeros(ndarray::IxDyn(&[0])));
        }
        if self.m[slot].len() != grad.len() {
            self.m[slot] = ArrayD::zeros(grad.raw_dim());
            self.v[slot] = ArrayD::zeros(grad.raw_dim());
        }
        let (beta1, beta2, lr, eps, bc1, bc2) =
            (self.beta1, self.beta2, self.lr, self.eps, self.bc1, self.bc2);
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        ndarray::Zip::from(&mut *m).and(&grad).for_each(|m, &g| {
            *m = beta1 * *m + (1.0 - beta1) * g;
        });
        ndarray::Zip::from(&mut *v).and(&grad).for_each(|v, &g| {
            *v = beta2 * *v + (1.0 - beta2) * g * g;
        });
        ndarray::Zip::from(&mut param)
            .and(&*m)
            .and(&*v)
            .for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
    }

    /// One optimizer step over every network parameter.
    pub fn step_net(&mut self, net: &mut ConsistencyNetwork<f32>, grads: &NetGrads<f32>) {
        self.begin_step();
        let views: Vec<_> = grads.tensors().into_iter().map(|v| v.to_owned()).collect();
        for (i, g) in views.iter().enumerate() {
            net.with_tensor_mut(i, |p| self.update(i, p, g.view()));
        }
    }
}
