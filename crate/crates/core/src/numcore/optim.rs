use std::collections::HashMap;

use crate::error::{Error, Result};

use super::param::{ParamId, ParamStore};
use super::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub weight_decay: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            weight_decay: 1e-4,
            momentum: 0.9,
            clip_norm: None,
        }
    }
}

/// SGD with weight decay and heavy-ball momentum:
/// `d = g + wd·p; buf = m·buf + d; p -= lr·buf`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: HashMap<ParamId, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update to every non-frozen parameter that has a gradient,
    /// then clears gradients. Fails before mutating anything if a gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid("sgd_step", format!("learning rate {lr} < 0")));
        }
        let mut sq_norm = 0.0f64;
        for p in store.params().iter().filter(|p| !p.frozen) {
            if let Some(g) = &p.grad {
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
                sq_norm += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        }
        let clip = match self.config.clip_norm {
            Some(max) if sq_norm.sqrt() > max => max / sq_norm.sqrt(),
            _ => 1.0,
        };
        let (lr_t, wd, mom, clip) = (
            T::of(lr),
            T::of(self.config.weight_decay),
            T::of(self.config.momentum),
            T::of(clip),
        );
        let ids: Vec<ParamId> = store.param_ids().collect();
        for id in ids {
            let p = store.param_mut(id);
            if p.frozen {
                p.grad = None;
                continue;
            }
            let Some(g) = p.grad.take() else { continue };
            let n = g.data().len();
            let buf = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![T::zero(); n]);
            for ((w, gv), b) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let d = *gv * clip + wd * *w;
                *b = mom * *b + d;
                *w -= lr_t * *b;
            }
        }
        Ok(())
    }
}
