//! Plant model of the hydro power valley.

pub mod params;
pub mod plant;
pub mod power;
pub mod reduce;
pub mod topology;

pub use params::HpvParams;
pub use plant::{discretize_zoh, synthesize_linear_model, HpvModel, InputChannel, ReducedModel, StateSpace, SubsystemModel};
pub use power::{augment_virtual_flows, linearize_power, nonlinear_power, DuctChannels, PowerMap};
pub use reduce::{balanced_truncate, reduce_model, step_response_errors, Order};
pub use topology::{build_topology, default_topology, HpvTopology};

use crate::error::Result;

/// A plant ready for control: discretized, reduced, split into virtual
/// flows, with its linearized power map.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub model: HpvModel,
    pub ducts: Vec<DuctChannels>,
    pub power: PowerMap,
}

pub fn build_pipeline(topology: &HpvTopology, params: &HpvParams, orders: Option<&[Order]>) -> Result<Pipeline> {
    let model = synthesize_linear_model(topology, params)?;
    let model = discretize_zoh(&model, params.sampling_time)?;
    let model = reduce_model(&model, orders)?;
    let (model, ducts) = augment_virtual_flows(&model)?;
    let power = linearize_power(&model)?;
    Ok(Pipeline { model, ducts, power })
}

pub fn default_pipeline() -> Result<Pipeline> {
    build_pipeline(&default_topology(), &HpvParams::default(), None)
}
