use super::{EncoderModel, ParamRole};
use crate::tuning::{PolicyBase, TuningPolicy};
use crate::{Error, Result};
use serde::Serialize;

/// The output head being trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Head {
    Classifier,
    MaskedLm,
}

/// Trainable/frozen split produced by [`apply_tuning_policy`].
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Partition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

/// Sets every parameter's frozen flag according to `policy` and installs
/// the policy's Mixout settings.
///
/// Under adapter tuning only adapters, layer norms and the parameters of
/// the active `head` stay trainable.
pub fn apply_tuning_policy(
    model: &mut EncoderModel,
    policy: &TuningPolicy,
    head: Head,
) -> Result<Partition> {
    policy.validate()?;
    match (&policy.base, model.adapter_config()) {
        (PolicyBase::AdapterTuning(_), None) => {
            return Err(Error::Config(
                "adapter tuning requires a model built with adapters".into(),
            ))
        }
        (PolicyBase::AdapterTuning(want), Some(have)) if want != have => {
            return Err(Error::Config(format!(
                "policy adapter config {want:?} does not match the model's {have:?}"
            )))
        }
        (PolicyBase::FullFineTune, Some(_)) => {
            return Err(Error::Config(
                "full fine-tuning expects a model without adapters".into(),
            ))
        }
        _ => {}
    }
    let head_role = match head {
        Head::Classifier => ParamRole::ClassifierHead,
        Head::MaskedLm => ParamRole::MlmHead,
    };
    let adapter_policy = matches!(policy.base, PolicyBase::AdapterTuning(_));
    let roles = model.roles.clone();
    let mut partition = Partition::default();
    for (p, role) in model.store.iter_mut().zip(roles) {
        let trainable = !adapter_policy
            || matches!(role, ParamRole::Adapter | ParamRole::Norm)
            || role == head_role;
        p.frozen = !trainable;
        if trainable {
            partition.trainable.push(p.name().to_string());
        } else {
            partition.frozen.push(p.name().to_string());
        }
    }
    model.set_mixout(policy.mixout.clone());
    Ok(partition)
}
