//! GFlowNet training objectives and hierarchical variational inference
//! objectives on pointed DAGs, with exact-enumeration checks of their
//! gradient relationships.

pub mod dag;
pub mod env;
pub mod error;
pub mod exact;
pub mod export;
pub mod hypergrid;
pub mod math;
pub mod nn;
pub mod objectives;
pub mod policy;
pub mod trainer;
pub mod verify;

pub use dag::{DagSpec, PointedDag, StateId};
pub use env::{Env, EnvSpec, RewardTable};
pub use error::{DagError, Error, Result};
pub use hypergrid::HypergridSpec;
pub use policy::{
    BackwardKind, BehaviorConfig, Direction, PolicyCache, PolicyGrad, PolicySet, Trajectory,
};
