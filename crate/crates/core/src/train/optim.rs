use crate::model::{ModelParams, ParamGroup};
use crate::tensor::Tensor;

use super::config::OptimizerKind;

/// SGD with one learning rate per parameter group and optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr_prompt: f64,
    pub lr_head: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    /// Plain SGD without momentum when `momentum` is zero.
    pub fn new(momentum: f64, lr_prompt: f64, lr_head: f64, params: &ModelParams) -> Self {
        Sgd { lr_prompt, lr_head, momentum, velocity: vec![None; params.params().len()] }
    }

    fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Prompt => self.lr_prompt,
            ParamGroup::Head => self.lr_head,
            ParamGroup::Backbone => 0.0,
        }
    }

    /// `p ← p − lr·v`, `v ← μ·v + g`, then rounds to checkpoint precision.
    /// Backbone gradients are ignored once the backbone is frozen.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[(usize, Tensor)]) {
        let frozen = params.is_backbone_frozen();
        for (idx, g) in grads {
            let group = params.params()[*idx].group;
            if frozen && group == ParamGroup::Backbone {
                continue;
            }
            let lr = self.lr(group);
            let v = self.velocity[*idx].get_or_insert_with(|| vec![0.0; g.len()]);
            let p = params.params_mut()[*idx].value.data_mut();
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *v = self.momentum * *v + g;
                *p = (*p - lr * *v) as f32 as f64;
            }
        }
    }
}

/// Adam with one step size per parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    /// Step size of the backbone, soft prompt and head.
    pub lrs: [f64; 3],
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    /// One step size for every group.
    pub fn new(lr: f64, params: &ModelParams) -> Self {
        Self::per_group([lr; 3], params)
    }

    pub fn per_group(lrs: [f64; 3], params: &ModelParams) -> Self {
        Adam { lrs, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: vec![None; params.params().len()] }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[(usize, Tensor)]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let frozen = params.is_backbone_frozen();
        for (idx, g) in grads {
            let group = params.params()[*idx].group;
            if frozen && group == ParamGroup::Backbone {
                continue;
            }
            let lr = self.lrs[group_index(group)];
            let (m, v) = self.moments[*idx].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = params.params_mut()[*idx].value.data_mut();
            for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p = (*p - update) as f32 as f64;
            }
        }
    }
}

fn group_index(g: ParamGroup) -> usize {
    match g {
        ParamGroup::Backbone => 0,
        ParamGroup::Prompt => 1,
        ParamGroup::Head => 2,
    }
}

/// The optimiser of the bottleneck stage, chosen by [`OptimizerKind`].
#[derive(Clone, Debug)]
pub enum StageOptimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl StageOptimizer {
    pub fn new(kind: OptimizerKind, lr_prompt: f64, lr_head: f64, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Sgd => StageOptimizer::Sgd(Sgd::new(0.0, lr_prompt, lr_head, params)),
            OptimizerKind::SgdMomentum => StageOptimizer::Sgd(Sgd::new(0.9, lr_prompt, lr_head, params)),
            OptimizerKind::Adam => StageOptimizer::Adam(Adam::per_group([0.0, lr_prompt, lr_head], params)),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[(usize, Tensor)]) {
        match self {
            StageOptimizer::Sgd(o) => o.step(params, grads),
            StageOptimizer::Adam(o) => o.step(params, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Graph, ModelConfig};

    #[test]
    fn sgd_step_on_quadratic_is_exact() {
        let mut p = ModelParams::init(&ModelConfig::tiny(), 0, 1).unwrap();
        p.freeze_backbone();
        let before = p.clone();
        let mut g = Graph::new(&before, &[ParamGroup::Prompt, ParamGroup::Head]);
        let prompt = g.p(before.layout.prompt);
        let sq = g.tape.mul(prompt, prompt).unwrap();
        let loss = g.tape.sum(sq).unwrap();
        g.tape.backward(loss).unwrap();
        let grads = g.grads(ParamGroup::Prompt);
        let mut opt = Sgd::new(0.0, 0.1, 5e-3, &p);
        opt.step(&mut p, &grads);
        for (a, b) in p.soft_prompt().data().iter().zip(before.soft_prompt().data()) {
            assert_eq!(*a, (b - 0.1 * 2.0 * b) as f32 as f64);
        }
        assert_eq!(p.head_weight(), before.head_weight());
    }

    #[test]
    fn zero_rates_leave_bits_unchanged() {
        let mut p = ModelParams::init(&ModelConfig::tiny(), 0, 2).unwrap();
        p.freeze_backbone();
        let before = p.clone();
        let grads: Vec<(usize, Tensor)> =
            p.params().iter().enumerate().map(|(i, np)| (i, Tensor::full(np.value.shape(), 3.0))).collect();
        for kind in [OptimizerKind::Sgd, OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
            let mut opt = StageOptimizer::new(kind, 0.0, 0.0, &p);
            opt.step(&mut p, &grads);
            opt.step(&mut p, &grads);
            for (a, b) in p.params().iter().zip(before.params()) {
                assert_eq!(a.value, b.value, "{kind:?} {}", a.name);
            }
        }
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = ModelParams::init(&ModelConfig::tiny(), 0, 3).unwrap();
        p.freeze_backbone();
        let idx = p.params().iter().position(|np| np.name == "head.b").unwrap();
        let grads = vec![(idx, Tensor::full(&[16], 1.0))];
        let mut opt = Sgd::new(0.9, 0.1, 0.5, &p);
        opt.step(&mut p, &grads);
        opt.step(&mut p, &grads);
        // -0.5·1 then -0.5·1.9
        assert!(p.head_bias().data().iter().all(|&b| (b + 1.45).abs() < 1e-6));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ModelParams::init(&ModelConfig::tiny(), 0, 4).unwrap();
        let idx = p.params().iter().position(|np| np.name == "head.b").unwrap();
        let mut opt = Adam::new(0.01, &p);
        opt.step(&mut p, &[(idx, Tensor::full(&[16], -4.0))]);
        assert!(p.head_bias().data().iter().all(|&b| (b - 0.01).abs() < 1e-7));
    }

    #[test]
    fn adam_uses_group_rates_and_skips_a_frozen_backbone() {
        let mut p = ModelParams::init(&ModelConfig::tiny(), 0, 5).unwrap();
        p.freeze_backbone();
        let before = p.clone();
        let grads: Vec<(usize, Tensor)> =
            p.params().iter().enumerate().map(|(i, np)| (i, Tensor::full(np.value.shape(), 1.0))).collect();
        let mut opt = StageOptimizer::new(OptimizerKind::Adam, 0.1, 0.005, &p);
        opt.step(&mut p, &grads);
        assert_eq!(p.group_bytes(ParamGroup::Backbone), before.group_bytes(ParamGroup::Backbone));
        for (a, b) in p.soft_prompt().data().iter().zip(before.soft_prompt().data()) {
            assert!((b - a - 0.1).abs() < 1e-6);
        }
        for (a, b) in p.head_bias().data().iter().zip(before.head_bias().data()) {
            assert!((b - a - 0.005).abs() < 1e-6);
        }
    }
}
