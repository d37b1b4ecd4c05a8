//! Finite-difference check of the analytic gradients of the flow-matching
//! loss, in 64-bit arithmetic on a reduced model.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use c2r_core::seeded_rng;

use crate::autodiff::{group_of, Graph, ParamId, ParamStore, Tensor};
use crate::control::HeadMode;
use crate::model::{C2rModel, Control, ModelConfig, ModelError, GROUPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
    pub max_rel_error: f64,
}

struct Fixture {
    model: C2rModel,
    z_t: Tensor<f64>,
    t: Vec<f64>,
    target: Rc<Vec<f64>>,
    features: Tensor<f64>,
}

impl Fixture {
    fn loss(&self, store: &ParamStore<f64>) -> (Graph<f64>, crate::autodiff::Var) {
        let mut g = Graph::new();
        let z = g.constant(self.z_t.clone());
        let f = g.constant(self.features.clone());
        let text = self.model.tokenize(&[
            "a red circle moving right on a striped background",
            "a blue square standing still on a plain background",
        ]);
        let out = self.model.velocity(&mut g, store, z, &self.t, &text, Control::Features(f));
        let loss = g.mse(out.velocity, self.target.clone());
        (g, loss)
    }
}

fn normal_tensor<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// Compares analytic and central-difference gradients of the loss for
/// `probes` randomly chosen scalars, drawn evenly from the backbone, text,
/// adapter and per-block head groups among those the loss depends on (unused
/// vocabulary rows are skipped). Every parameter is perturbed away from its
/// initial value first so that zero-initialised layers pass gradient
/// everywhere.
pub fn gradient_check(seed: u64, probes: usize) -> Result<GradCheckReport, ModelError> {
    let mut config = ModelConfig::tiny();
    config.policy.heads = HeadMode::PerBlock;
    let mut model = C2rModel::new(config, seed)?;
    model.perturb(0.1, seed);
    let store: ParamStore<f64> = model.params.cast();
    let mut rng = seeded_rng(seed, 0x4752_4144);
    let lat = model.latent();
    let b = 2;
    let mut zshape = vec![b];
    zshape.extend(lat.dims());
    let fshape = vec![b, lat.frames, lat.height, lat.width, model.config.feature_channels];
    let fixture = Fixture {
        z_t: normal_tensor(zshape.clone(), &mut rng),
        t: vec![0.3, 0.8],
        target: Rc::new(normal_tensor(zshape, &mut rng).data),
        features: normal_tensor(fshape, &mut rng),
        model,
    };

    let (g, loss) = fixture.loss(&store);
    let grads = g.backward(loss);
    let analytic: Vec<(ParamId, Vec<f64>)> = grads.params();

    let grad_at = |id: ParamId, k: usize| {
        analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map_or(0.0, |(_, g)| g[k])
    };
    let mut picks: Vec<(ParamId, usize)> = Vec::with_capacity(probes);
    for (gi, group) in GROUPS.iter().enumerate() {
        let quota = probes / GROUPS.len() + usize::from(gi < probes % GROUPS.len());
        let members: Vec<(ParamId, usize)> = store
            .iter()
            .filter(|(_, p)| group_of(&p.name) == *group)
            .map(|(id, p)| (id, p.value.len()))
            .collect();
        let total: usize = members.iter().map(|m| m.1).sum();
        let target = picks.len() + quota.min(total);
        while picks.len() < target {
            let mut k = rng.random_range(0..total);
            for &(id, len) in &members {
                if k < len {
                    if grad_at(id, k) != 0.0 && !picks.contains(&(id, k)) {
                        picks.push((id, k));
                    }
                    break;
                }
                k -= len;
            }
        }
    }

    let h = 1e-6;
    let mut out = Vec::with_capacity(probes);
    for (id, k) in picks {
        let a = grad_at(id, k);
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.value_mut(id).data[k] += delta;
            let (g, l) = fixture.loss(&s);
            g.value(l).data[0]
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        out.push(GradProbe {
            param: store.get(id).name.clone(),
            index: k,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = out.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes: out,
        max_rel_error,
    })
}
