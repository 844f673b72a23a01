// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runtime-side hooks: passive Q/K probes, active steering, the flag-file gate
//! and the `qk_<run_id>.qkc` / run-id file protocol.

mod hook_worker;
mod qkc;
mod run_id;
mod steering;

pub use hook_worker::{HookWorker, ProbeHandle, WorkerRun};
pub use qkc::{cache_path, flush_capture, load_qk_cache, QkCapture, QkEntry, QKC_MAGIC};
pub use run_id::{begin_run, read_run_id, RunId};
pub use steering::{SteeringPlan, SteeringPositions};
