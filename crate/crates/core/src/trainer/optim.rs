use std::collections::BTreeMap;

use crate::ndgrad::{Real, Tensor};
use crate::trainer::OptimizerConfig;
use crate::{Error, Result};

/// Linear warmup to `peak` over `warmup` steps, then inverse square-root decay.
pub fn lr_at(step: usize, warmup: usize, peak: f64) -> f64 {
    let (s, w) = (step as f64, warmup.max(1) as f64);
    if step <= warmup {
        peak * s / w
    } else {
        peak * (w / s).sqrt()
    }
}

/// First and second moments per parameter, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &BTreeMap<String, Tensor<T>>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm<T: Real>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update, after scaling the gradients down to a
/// global norm of at most `cfg.clip_norm`. Returns the pre-clipping norm.
pub fn adam_step<T: Real>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<f64> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient("global norm".into()));
    }
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            let gk = gk.as_f64() * clip;
            let mk = b1 * md[k].as_f64() + (1.0 - b1) * gk;
            let vk = b2 * vd[k].as_f64() + (1.0 - b2) * gk * gk;
            md[k] = T::from_f64_lossy(mk);
            vd[k] = T::from_f64_lossy(vk);
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
            pd[k] = T::from_f64_lossy(pd[k].as_f64() - update);
        }
    }
    Ok(norm)
}
