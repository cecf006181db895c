//! Small feedforward networks and their first-order tangent model.

mod model;
mod params;
mod pool;
mod spec;

pub use model::{forward, leaky_relu, Evaluator, Network, TangentModel, Trace};
pub use params::{layout_for, LayoutRecord, ParamVector};
pub(crate) use params::ByteReader;
pub use pool::{
    bilinear_pool_forward, bilinear_pool_tangent, covariance, PooledCovariance, SqrtTangentMode,
    TangentOptions, CLAMP_TOL, TANGENT_FLOOR,
};
pub use spec::{Layer, NetworkSpec, DEFAULT_LEAKY_SLOPE};
