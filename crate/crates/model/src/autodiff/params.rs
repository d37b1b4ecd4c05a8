use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter tensors. Names are dotted paths whose first segment is
/// the parameter group (`backbone`, `text`, `adapter`, `heads`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Uniform `±sqrt(6 / (fan_in + fan_out))` for a `[fan_in, fan_out]` matrix.
    Xavier,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| T::of(d.sample(rng))).collect()
            }
            Init::Xavier => {
                let fan_in = shape[0] as f64;
                let fan_out = *shape.last().expect("non-empty shape") as f64;
                let bound = (6.0 / (fan_in + fan_out)).sqrt();
                (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
            }
        };
        self.params.push(Param {
            name,
            value: Tensor::new(shape, data),
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Marks every parameter of `group` trainable or frozen.
    pub fn set_trainable(&mut self, group: &str, trainable: bool) {
        for p in &mut self.params {
            if group_of(&p.name) == group {
                p.trainable = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = false);
    }

    /// Scalar count over parameters whose group is in `groups`.
    pub fn count(&self, groups: &[&str]) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(&group_of(&p.name)))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of one group.
    pub fn group_hash(&self, group: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| group_of(&p.name) == group) {
            h.update(p.name.as_bytes());
            for d in &p.value.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.value.data {
                h.update(v.f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    /// First and second moments keyed by parameter name.
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update from `(param, grad)` pairs and returns the
    /// pre-clip global gradient norm. Frozen parameters are skipped.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Vec<f32>)]) -> f64 {
        let norm = grads
            .iter()
            .filter(|(id, _)| store.get(*id).trainable)
            .flat_map(|(_, g)| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        } as f32;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = (self.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for (id, g) in grads {
            let param = store.get(*id);
            if !param.trainable {
                continue;
            }
            let name = param.name.clone();
            let slot = match self.moments.iter().position(|m| m.0 == name) {
                Some(i) => i,
                None => {
                    self.moments
                        .push((name, vec![0.0; g.len()], vec![0.0; g.len()]));
                    self.moments.len() - 1
                }
            };
            let (_, m, v) = &mut self.moments[slot];
            let value = &mut store.value_mut(*id).data;
            for i in 0..g.len() {
                let gi = g[i] * factor;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                value[i] -= step_size * m[i] / (v[i].sqrt() + eps * (bc2.sqrt() as f32));
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_and_counts() {
        let mut rng = c2r_core::seeded_rng(0, 0);
        let mut s = ParamStore::<f32>::new();
        s.add("backbone.w", vec![3, 4], Init::Xavier, &mut rng);
        s.add("adapter.w", vec![2], Init::Zeros, &mut rng);
        assert_eq!(s.count(&["backbone"]), 12);
        assert_eq!(s.count(&["backbone", "adapter"]), 14);
        s.set_trainable("backbone", false);
        assert_eq!(s.trainable_count(), 2);
    }

    #[test]
    fn adam_skips_frozen_and_clips() {
        let mut rng = c2r_core::seeded_rng(0, 0);
        let mut s = ParamStore::<f32>::new();
        let a = s.add("backbone.a", vec![2], Init::Zeros, &mut rng);
        let b = s.add("adapter.b", vec![2], Init::Zeros, &mut rng);
        s.set_trainable("backbone", false);
        let mut opt = Adam::new(0.1, Some(1.0));
        let norm = opt.update(&mut s, &[(a, vec![1.0, 1.0]), (b, vec![30.0, 40.0])]);
        assert!((norm - 50.0).abs() < 1e-9);
        assert_eq!(s.value(a).data, vec![0.0, 0.0]);
        // the first Adam step moves each coordinate by about lr against the gradient sign
        assert!((s.value(b).data[0] + 0.1).abs() < 1e-4);
    }
}
