//! Adaptive-moment optimizer over the per-primitive parameter groups.

use serde::{Deserialize, Serialize};

use crate::gaussian::GaussianSet;
use crate::splat::GradientSet;

/// Parameters per primitive: position 3, rotation 4, log-scale 3,
/// opacity logit 1, color 3.
pub const PARAMS_PER_PRIMITIVE: usize = 14;
const POS: usize = 0;
const ROT: usize = 3;
const SCALE: usize = 7;
const OPACITY: usize = 10;
const COLOR: usize = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 0.0002,
            opacity: 0.003,
            scale: 0.06,
            rotation: 0.005,
            color: 0.002,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            position: 0.0,
            opacity: 0.0,
            scale: 0.0,
            rotation: 0.0,
            color: 0.0,
        }
    }

    fn for_slot(&self, k: usize) -> f64 {
        match k {
            POS..ROT => self.position,
            ROT..SCALE => self.rotation,
            SCALE..OPACITY => self.scale,
            OPACITY => self.opacity,
            _ => self.color,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<[f64; PARAMS_PER_PRIMITIVE]>,
    v: Vec<[f64; PARAMS_PER_PRIMITIVE]>,
}

fn flatten(grads: &GradientSet, i: usize) -> [f64; PARAMS_PER_PRIMITIVE] {
    let mut g = [0.0; PARAMS_PER_PRIMITIVE];
    g[POS..ROT].copy_from_slice(grads.position[i].as_slice());
    g[ROT..SCALE].copy_from_slice(grads.rotation[i].as_slice());
    g[SCALE..OPACITY].copy_from_slice(grads.log_scale[i].as_slice());
    g[OPACITY] = grads.opacity_logit[i];
    g[COLOR..].copy_from_slice(grads.color[i].as_slice());
    g
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            step: 0,
            m: vec![[0.0; PARAMS_PER_PRIMITIVE]; n],
            v: vec![[0.0; PARAMS_PER_PRIMITIVE]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Carry moments over to a rebuilt set; primitives without an origin
    /// start from zero.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        let pick = |src: &[[f64; PARAMS_PER_PRIMITIVE]]| {
            origin
                .iter()
                .map(|o| o.map_or([0.0; PARAMS_PER_PRIMITIVE], |i| src[i]))
                .collect::<Vec<_>>()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    /// Forget opacity moments (after the opacities were overwritten).
    pub fn reset_opacity(&mut self) {
        for (m, v) in self.m.iter_mut().zip(&mut self.v) {
            m[OPACITY] = 0.0;
            v[OPACITY] = 0.0;
        }
    }

    /// One update of every parameter of `set`. Rotations are renormalized
    /// after the step.
    pub fn step(&mut self, set: &mut GaussianSet, grads: &GradientSet, lr: &LearningRates) {
        assert_eq!(set.len(), self.len(), "optimizer state out of sync with the set");
        assert_eq!(grads.len(), set.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, prim) in set.primitives.iter_mut().enumerate() {
            let g = flatten(grads, i);
            let mut delta = [0.0; PARAMS_PER_PRIMITIVE];
            for k in 0..PARAMS_PER_PRIMITIVE {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[k];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[k] * g[k];
                let rate = lr.for_slot(k);
                if rate != 0.0 {
                    delta[k] = rate * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                }
            }
            for k in 0..3 {
                prim.position[k] -= delta[POS + k];
                prim.log_scale[k] -= delta[SCALE + k];
                prim.color[k] -= delta[COLOR + k];
            }
            if delta[ROT..SCALE].iter().any(|&d| d != 0.0) {
                for k in 0..4 {
                    prim.rotation[k] -= delta[ROT + k];
                }
                prim.normalize_rotation();
            }
            if delta[OPACITY] != 0.0 {
                prim.set_opacity_logit(prim.opacity_logit() - delta[OPACITY]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::GaussianPrimitive;
    use nalgebra::Vector3;

    fn set() -> GaussianSet {
        GaussianSet::new(vec![
            GaussianPrimitive::isotropic(Vector3::new(0.1, 0.2, 0.3), 0.2, 0.3, Vector3::new(0.4, 0.5, 0.6)),
            GaussianPrimitive::isotropic(Vector3::new(-1.0, 0.0, 2.0), 0.05, 0.8, Vector3::new(0.9, 0.1, 0.2)),
        ])
    }

    fn grads(n: usize, v: f64) -> GradientSet {
        let mut g = GradientSet::zeros(n);
        for i in 0..n {
            g.position[i] = Vector3::repeat(v);
            g.rotation[i] = nalgebra::Vector4::repeat(-v);
            g.log_scale[i] = Vector3::repeat(v);
            g.opacity_logit[i] = v;
            g.color[i] = Vector3::repeat(-v);
        }
        g
    }

    #[test]
    fn zero_rates_leave_parameters_unchanged() {
        let mut s = set();
        let before = s.clone();
        let mut adam = Adam::new(2);
        for _ in 0..5 {
            adam.step(&mut s, &grads(2, 0.7), &LearningRates::zero());
        }
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_each_parameter_by_its_rate() {
        let mut s = set();
        let before = s.clone();
        let mut adam = Adam::new(2);
        let lr = LearningRates::default();
        adam.step(&mut s, &grads(2, 0.3), &lr);
        // Bias-corrected first step is lr·sign(g).
        let d = before.primitives[0].position - s.primitives[0].position;
        assert!(d.iter().all(|&x| (x - lr.position).abs() < 1e-12));
        let c = s.primitives[0].color - before.primitives[0].color;
        assert!(c.iter().all(|&x| (x - lr.color).abs() < 1e-12));
        let o = before.primitives[1].opacity_logit() - s.primitives[1].opacity_logit();
        assert!((o - lr.opacity).abs() < 1e-9);
        assert!((s.primitives[0].rotation.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn remap_keeps_and_zeroes_moments() {
        let mut s = set();
        let mut adam = Adam::new(2);
        adam.step(&mut s, &grads(2, 1.0), &LearningRates::default());
        let kept = adam.m[1];
        adam.remap(&[Some(1), None, Some(1)]);
        assert_eq!(adam.len(), 3);
        assert_eq!(adam.m[0], kept);
        assert_eq!(adam.m[1], [0.0; PARAMS_PER_PRIMITIVE]);
        adam.reset_opacity();
        assert_eq!(adam.m[0][OPACITY], 0.0);
    }
}
