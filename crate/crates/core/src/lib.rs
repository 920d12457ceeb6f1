//! Reinforcement fine-tuning toolkit for action-token policies.
//!
//! * [`codec`]: action chunks to token streams and back,
//! * [`reward`]: token-, trajectory- and format-level process rewards,
//! * [`grpo`]: group-relative advantages and the clipped objective,
//! * [`policy`]: a small autoregressive token policy with SFT and RFT updates,
//! * [`tasks`]: synthetic manipulation tasks and demonstrations,
//! * [`continual`]: base + lifelong training protocol and transfer metrics,
//! * [`train`]: supervised and RFT training loops,
//! * [`config`], [`experiment`]: experiment settings and end-to-end runs,
//! * [`dataio`]: JSON-Lines demos, configs, reports and checkpoints.

pub mod codec;
pub mod config;
pub mod continual;
pub mod dataio;
pub mod experiment;
pub mod grpo;
pub mod policy;
pub mod reward;
pub mod tasks;
pub mod train;
