// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `HookLlm` facade and the worker/analyzer registry.

mod hook_llm;
mod registry;

pub use hook_llm::{HookLlm, Mode};
pub use registry::{
    AnalysisContext, Analyzer, AttnTrackerAnalyzer, CorerAnalyzer, Registry, WorkerContext,
    WorkerInstaller, ANALYZER_ATTNTRACKER, ANALYZER_CORER, WORKER_ACTSTEER, WORKER_PROBE_QK,
};
