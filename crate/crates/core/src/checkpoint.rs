//! Score-net and optimizer state in the tensor container.
//!
//! Tensor names: `param.<name>` for network weights, `adam.m.<name>` and
//! `adam.v.<name>` for the moments, `adam.step` as a one-element f64.

use crate::container::{AnyTensor, Container};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::scorenet::ScoreNet;
use crate::training::Adam;

pub const PARAM_PREFIX: &str = "param.";
pub const ADAM_M_PREFIX: &str = "adam.m.";
pub const ADAM_V_PREFIX: &str = "adam.v.";
pub const ADAM_STEP: &str = "adam.step";

pub fn capture<T: Scalar>(config_text: &str, net: &ScoreNet<T>, opt: &Adam<T>) -> Container {
    let mut c = Container::new(config_text);
    let names = net.params().names();
    for (name, t) in net.params().iter() {
        c.push(format!("{PARAM_PREFIX}{name}"), AnyTensor::from_scalar(t));
    }
    for (name, t) in names.iter().zip(opt.first_moments()) {
        c.push(format!("{ADAM_M_PREFIX}{name}"), AnyTensor::from_scalar(t));
    }
    for (name, t) in names.iter().zip(opt.second_moments()) {
        c.push(format!("{ADAM_V_PREFIX}{name}"), AnyTensor::from_scalar(t));
    }
    let step = Tensor::new(vec![1], vec![opt.step_count() as f64]).expect("one element");
    c.push(ADAM_STEP, AnyTensor::F64(step));
    c
}

/// Copies every `param.*` tensor into `net`; all parameters must be present.
pub fn restore_params<T: Scalar>(c: &Container, net: &mut ScoreNet<T>) -> Result<()> {
    let names: Vec<String> = net.params().names().to_vec();
    for name in &names {
        let t = c.require(&format!("{PARAM_PREFIX}{name}"))?.to::<T>();
        net.params_mut()
            .set(name, t)
            .map_err(|e| Error::format("checkpoint", format!("parameter {name}: {e}")))?;
    }
    let extra = c
        .tensors
        .iter()
        .filter_map(|(n, _)| n.strip_prefix(PARAM_PREFIX))
        .find(|n| net.params().id(n).is_none());
    if let Some(n) = extra {
        return Err(Error::format("checkpoint", format!("unknown parameter {n}")));
    }
    Ok(())
}

/// Optimizer state saved next to `net`'s parameters. Checkpoints without
/// optimizer tensors give a fresh optimizer.
pub fn restore_optimizer<T: Scalar>(c: &Container, net: &ScoreNet<T>, lr: f64) -> Result<Adam<T>> {
    let Some(step) = c.get(ADAM_STEP) else {
        return Ok(Adam::new(net.params(), lr));
    };
    let step = step.to::<f64>().data().first().copied().unwrap_or(0.0);
    if !(step >= 0.0 && step.fract() == 0.0) {
        return Err(Error::format("checkpoint", format!("bad optimizer step {step}")));
    }
    let names = net.params().names();
    let load = |prefix: &str| -> Result<Vec<Tensor<T>>> {
        names
            .iter()
            .map(|n| Ok(c.require(&format!("{prefix}{n}"))?.to::<T>()))
            .collect()
    };
    Adam::from_state(
        net.params(),
        lr,
        step as u64,
        load(ADAM_M_PREFIX)?,
        load(ADAM_V_PREFIX)?,
    )
}
