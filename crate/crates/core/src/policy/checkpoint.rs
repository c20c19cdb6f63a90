use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PolicyModel, TabularConfig, TabularStoppingPolicy, TinyConfig, TinySequenceModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchitectureDescriptor {
    Tiny(TinyConfig),
    Tabular(TabularConfig),
}

/// JSON container: `{format_version, architecture, params}`. Parameters are stored as
/// decimal f64, which round-trips f64 exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format_version: u32,
    pub architecture: ArchitectureDescriptor,
    pub params: Vec<f64>,
}

/// Either reference policy, for code that loads checkpoints of unknown kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyPolicy<F> {
    Tiny(TinySequenceModel<F>),
    Tabular(TabularStoppingPolicy<F>),
}

pub trait Describe {
    fn descriptor(&self) -> ArchitectureDescriptor;
}

impl<F: Scalar> Describe for TinySequenceModel<F> {
    fn descriptor(&self) -> ArchitectureDescriptor {
        ArchitectureDescriptor::Tiny(self.config())
    }
}

impl<F: Scalar> Describe for TabularStoppingPolicy<F> {
    fn descriptor(&self) -> ArchitectureDescriptor {
        ArchitectureDescriptor::Tabular(self.config())
    }
}

impl PolicyCheckpoint {
    pub fn of<F: Scalar, P: PolicyModel<F> + Describe>(policy: &P) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture: policy.descriptor(),
            params: policy.params().iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn check_version(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        Ok(())
    }

    pub fn into_policy<F: Scalar>(self) -> Result<AnyPolicy<F>> {
        self.check_version()?;
        let params: Vec<F> = self.params.iter().map(|&x| F::lit(x)).collect();
        Ok(match self.architecture {
            ArchitectureDescriptor::Tiny(cfg) => AnyPolicy::Tiny(TinySequenceModel::from_params(cfg, params)?),
            ArchitectureDescriptor::Tabular(cfg) => AnyPolicy::Tabular(TabularStoppingPolicy::from_params(cfg, params)?),
        })
    }

    pub fn into_tiny<F: Scalar>(self) -> Result<TinySequenceModel<F>> {
        match self.into_policy()? {
            AnyPolicy::Tiny(m) => Ok(m),
            AnyPolicy::Tabular(_) => Err(Error::Unsupported("checkpoint holds a tabular policy".into())),
        }
    }
}

pub fn save_checkpoint<F: Scalar, P: PolicyModel<F> + Describe>(policy: &P, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(&PolicyCheckpoint::of(policy))?)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<AnyPolicy<F>> {
    let ck: PolicyCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    ck.into_policy()
}
