use std::collections::BTreeMap;

use super::params::{GradMap, ParamStore};

/// Adam with bias correction. Frozen parameters are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (path, g) in grads {
            if store.is_frozen(path) {
                continue;
            }
            let Some(p) = store.get_mut(path) else { continue };
            let m = self.first.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.values_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// `acc += scale * g`, path by path.
pub fn accumulate(acc: &mut GradMap, g: GradMap, scale: f64) {
    for (path, v) in g {
        match acc.get_mut(&path) {
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&v) {
                    *x += scale * y;
                }
            }
            None => {
                acc.insert(path, v.into_iter().map(|x| x * scale).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn adam_moves_against_gradient_and_skips_frozen() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        s.insert("b", Tensor::scalar(1.0)).unwrap();
        s.freeze("b");
        let mut g = GradMap::new();
        g.insert("a".into(), vec![2.0]);
        g.insert("b".into(), vec![2.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut s, &g);
        // first bias-corrected Adam step has magnitude lr
        assert!((s.get("a").unwrap().values()[0] - 0.9).abs() < 1e-7);
        assert_eq!(s.get("b").unwrap().values()[0], 1.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = GradMap::new();
        g.insert("x".into(), vec![3.0, 4.0]);
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
