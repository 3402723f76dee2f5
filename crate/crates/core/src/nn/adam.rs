use super::{Module, Real};

/// Adam with bias correction. Moment buffers are laid out in parameter visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    /// Applies one update using the gradients currently held by `module`.
    pub fn step<F: Real, M: Module<F> + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_params_mut(&mut |p| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for ((w, g), (mi, vi)) in p
                .value
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g.as_f64();
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w = F::lit(w.as_f64() - update);
            }
            idx += 1;
        });
    }

    /// Flattened moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn from_moments(step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Self {
            step,
            m,
            v,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Quad(Param<f64>);
    impl Module<f64> for Quad {
        fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut q = Quad(Param::new("w", vec![2], vec![1.0, -1.0]));
        q.0.grad = vec![3.0, -0.5];
        let mut opt = Adam::default();
        opt.step(&mut q, 0.1);
        assert!((q.0.value[0] - 0.9).abs() < 1e-7);
        assert!((q.0.value[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad(Param::new("w", vec![1], vec![5.0]));
        let mut opt = Adam::default();
        for _ in 0..2000 {
            q.0.grad[0] = 2.0 * (q.0.value[0] - 2.0);
            opt.step(&mut q, 0.05);
        }
        assert!((q.0.value[0] - 2.0).abs() < 1e-3);
    }
}
