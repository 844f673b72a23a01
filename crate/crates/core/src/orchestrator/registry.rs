// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Value};

use crate::analyzers::{
    analyze_injection, attn2score, compute_attention_from_qk, load_qk_cache, rerank,
    AnalyzerSpec, FocusResult,
};
use crate::config::LayerHeads;
use crate::error::{Error, Result};
use crate::worker::{HookWorker, ProbeHandle, RunId, SteeringPlan};

pub const WORKER_PROBE_QK: &str = "probe_qk";
pub const WORKER_ACTSTEER: &str = "actsteer";
pub const ANALYZER_ATTNTRACKER: &str = "attntracker";
pub const ANALYZER_CORER: &str = "corer";

/// What a worker installer may draw on.
#[derive(Debug, Clone, Default)]
pub struct WorkerContext {
    pub layer_heads: LayerHeads,
    pub plan: Option<SteeringPlan>,
}

/// Installs a worker behavior's hooks and returns their handles.
pub type WorkerInstaller =
    Arc<dyn Fn(&mut HookWorker, &WorkerContext) -> Result<Vec<ProbeHandle>> + Send + Sync>;

/// Where a run's captured states live.
#[derive(Debug, Clone, Copy)]
pub struct AnalysisContext<'a> {
    pub hook_dir: &'a Path,
    pub run_id: &'a RunId,
}

/// Post-hoc analysis reading only the file protocol.
pub trait Analyzer: Send + Sync {
    fn analyze(&self, ctx: &AnalysisContext<'_>, spec: &AnalyzerSpec, params: &Value) -> Result<Value>;
}

/// Named worker installers and analyzers. Unknown names are errors.
#[derive(Clone, Default)]
pub struct Registry {
    workers: BTreeMap<String, WorkerInstaller>,
    analyzers: BTreeMap<String, Arc<dyn Analyzer>>,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("workers", &self.workers.keys().collect::<Vec<_>>())
            .field("analyzers", &self.analyzers.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry with `probe_qk` and `actsteer` workers and the
    /// `attntracker` and `corer` analyzers.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register_worker(WORKER_PROBE_QK, Arc::new(install_probe_qk))
            .expect("fresh registry");
        r.register_worker(WORKER_ACTSTEER, Arc::new(install_actsteer))
            .expect("fresh registry");
        r.register_analyzer(ANALYZER_ATTNTRACKER, Arc::new(AttnTrackerAnalyzer))
            .expect("fresh registry");
        r.register_analyzer(ANALYZER_CORER, Arc::new(CorerAnalyzer))
            .expect("fresh registry");
        r
    }

    pub fn register_worker(&mut self, name: &str, installer: WorkerInstaller) -> Result<()> {
        insert_unique(&mut self.workers, "worker", name, installer)
    }

    pub fn register_analyzer(&mut self, name: &str, analyzer: Arc<dyn Analyzer>) -> Result<()> {
        insert_unique(&mut self.analyzers, "analyzer", name, analyzer)
    }

    pub fn worker(&self, name: &str) -> Result<WorkerInstaller> {
        lookup(&self.workers, "worker", name)
    }

    pub fn analyzer(&self, name: &str) -> Result<Arc<dyn Analyzer>> {
        lookup(&self.analyzers, "analyzer", name)
    }

    pub fn worker_names(&self) -> Vec<String> {
        self.workers.keys().cloned().collect()
    }

    pub fn analyzer_names(&self) -> Vec<String> {
        self.analyzers.keys().cloned().collect()
    }
}

fn insert_unique<T>(
    map: &mut BTreeMap<String, T>,
    kind: &'static str,
    name: &str,
    value: T,
) -> Result<()> {
    if map.contains_key(name) {
        return Err(Error::DuplicateName {
            kind,
            name: name.to_string(),
        });
    }
    map.insert(name.to_string(), value);
    Ok(())
}

fn lookup<T: Clone>(map: &BTreeMap<String, T>, kind: &'static str, name: &str) -> Result<T> {
    map.get(name).cloned().ok_or_else(|| Error::UnknownName {
        kind,
        name: name.to_string(),
        available: map.keys().cloned().collect(),
    })
}

fn install_probe_qk(worker: &mut HookWorker, ctx: &WorkerContext) -> Result<Vec<ProbeHandle>> {
    if ctx.layer_heads.is_empty() {
        return Ok(Vec::new());
    }
    Ok(vec![worker.install_probes(&ctx.layer_heads)?])
}

fn install_actsteer(worker: &mut HookWorker, ctx: &WorkerContext) -> Result<Vec<ProbeHandle>> {
    let plan = ctx
        .plan
        .clone()
        .ok_or_else(|| Error::Mode("actsteer worker needs a steering plan".into()))?;
    Ok(vec![worker.install_steering(plan)?])
}

/// Focus-score analyzer. `params.threshold`, when given, adds a verdict.
///
/// A single-prompt run yields `{"score": s, "per_head_scores": {..}}`; runs
/// over several prompts add `"batch"` with one entry per prompt and report
/// their mean as `"score"`.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnTrackerAnalyzer;

impl Analyzer for AttnTrackerAnalyzer {
    fn analyze(&self, ctx: &AnalysisContext<'_>, spec: &AnalyzerSpec, params: &Value) -> Result<Value> {
        let threshold = match params.get("threshold") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_f64().ok_or_else(|| {
                Error::InvalidInput(format!("threshold {v} is not a number"))
            })?),
        };
        let items: Vec<Value> = match threshold {
            Some(tau) => analyze_injection(ctx.run_id, ctx.hook_dir, spec, tau)?
                .iter()
                .map(FocusResult::to_json)
                .collect(),
            None => {
                let capture = load_qk_cache(ctx.run_id, ctx.hook_dir)?;
                let attention = compute_attention_from_qk(&capture, &spec.head_profile)?;
                if attention.len() != spec.input_range.len() {
                    return Err(Error::InvalidInput(format!(
                        "capture holds {} prompts but {} input ranges were given",
                        attention.len(),
                        spec.input_range.len()
                    )));
                }
                attention
                    .iter()
                    .zip(&spec.input_range)
                    .map(|(a, s)| {
                        let f = attn2score(a, s, spec.attn_func)?;
                        Ok(json!({
                            "score": f.score,
                            "per_head_scores": crate::analyzers::attntracker_per_head_json(&f.per_head),
                        }))
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(match items.as_slice() {
            [single] => single.clone(),
            many => {
                let mean = many.iter().filter_map(|v| v["score"].as_f64()).sum::<f64>()
                    / many.len() as f64;
                json!({ "score": mean, "batch": many })
            }
        })
    }
}

/// Reranking analyzer over a run with one prompt per document.
/// Requires `params.doc_spans` as `[[start, end], ..]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CorerAnalyzer;

impl Analyzer for CorerAnalyzer {
    fn analyze(&self, ctx: &AnalysisContext<'_>, spec: &AnalyzerSpec, params: &Value) -> Result<Value> {
        let spans: Vec<[usize; 2]> = params
            .get("doc_spans")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| Error::InvalidInput(format!("doc_spans: {e}")))?
            .ok_or_else(|| Error::InvalidInput("corer needs params.doc_spans".into()))?;
        let spans: Vec<Range<usize>> = spans.iter().map(|[a, b]| *a..*b).collect();
        let capture = load_qk_cache(ctx.run_id, ctx.hook_dir)?;
        let attention = compute_attention_from_qk(&capture, &spec.head_profile)?;
        let result = rerank(&attention, &spans)?;
        Ok(json!({ "scores": result.scores, "ranking": result.ranking }))
    }
}
