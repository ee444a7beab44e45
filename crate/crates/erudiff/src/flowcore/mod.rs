//! Conditional rectified-flow engine: velocity network, timestep schedule,
//! Euler sampling with gradient truncation, and checkpoint persistence.

pub mod checkpoint;
pub mod net;
pub mod ops;
pub mod schedule;

pub use checkpoint::{load_checkpoint, params_from_bytes, params_to_bytes, save_checkpoint};
pub use net::{init_params, Activation, Cache, Hyper, ModelParams, TIME_FEATURES};
pub use ops::{
    euler_step, euler_update, fm_loss, fm_loss_grad, forward_diffuse, predict_velocity,
    predicted_clean, renoise, rollout_truncated, sample_truncated, velocity_to_score, LatentPoint,
    Rollout,
};
pub use schedule::Schedule;
