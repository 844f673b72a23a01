// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use serde_json::Value;

use super::registry::{AnalysisContext, Registry, WorkerContext, WORKER_ACTSTEER, WORKER_PROBE_QK};
use crate::analyzers::{AnalyzerSpec, AttnFunc, SpanPair};
use crate::config::{EnvSettings, HeadRef, HookConfig};
use crate::error::{Error, Result};
use crate::runtime::{tokenize, ModelHandle};
use crate::worker::{cache_path, HookWorker, ProbeHandle, RunId, SteeringPlan, WorkerRun};

/// Passive runs only observe; active runs steer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Passive,
    Active,
}

/// A model wrapped with the hooks its config asks for.
///
/// Mode is fixed at construction. Passive mode installs Q/K probes on the
/// layers of the effective head profile; active mode installs the steering
/// plan. [`HookLlm::generate`] writes a fresh run id every call and
/// [`HookLlm::analyze`] reads back the cache of the latest one.
#[derive(Debug)]
pub struct HookLlm {
    worker: HookWorker,
    config: HookConfig,
    mode: Mode,
    registry: Registry,
    handles: Vec<ProbeHandle>,
    last_run: Option<RunId>,
}

impl HookLlm {
    pub fn new(
        model: Arc<ModelHandle>,
        config: HookConfig,
        env: EnvSettings,
        mode: Mode,
        plan: Option<SteeringPlan>,
    ) -> Result<Self> {
        let worker_name = match mode {
            Mode::Passive => WORKER_PROBE_QK,
            Mode::Active => WORKER_ACTSTEER,
        };
        Self::with_registry(model, config, env, mode, plan, Registry::with_builtins(), worker_name)
    }

    pub fn with_registry(
        model: Arc<ModelHandle>,
        config: HookConfig,
        env: EnvSettings,
        mode: Mode,
        plan: Option<SteeringPlan>,
        registry: Registry,
        worker_name: &str,
    ) -> Result<Self> {
        match (mode, &plan) {
            (Mode::Passive, Some(_)) => {
                return Err(Error::Mode("passive mode does not take a steering plan".into()))
            }
            (Mode::Active, None) => {
                return Err(Error::Mode("active mode requires a steering plan".into()))
            }
            _ => {}
        }
        let violations = config.validate(model.spec());
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::Config(list.join("; ")));
        }
        env.check_hook_dir()?;

        let layer_heads = env.effective_layer_heads(&config);
        let mode_q = env.effective_hookq_mode(&config);
        let mut worker = HookWorker::new(model, env, mode_q).with_decode_capture(config.capture_decode_steps);
        let install = registry.worker(worker_name)?;
        let handles = install(&mut worker, &WorkerContext { layer_heads, plan })?;
        Ok(Self {
            worker,
            config,
            mode,
            registry,
            handles,
            last_run: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &HookConfig {
        &self.config
    }

    pub fn env(&self) -> &EnvSettings {
        self.worker.env()
    }

    pub fn worker(&self) -> &HookWorker {
        &self.worker
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn last_run(&self) -> Option<&RunId> {
        self.last_run.as_ref()
    }

    /// Heads used by analyzers: env layer-heads if set, else the config's.
    pub fn head_profile(&self) -> Vec<HeadRef> {
        self.env().effective_heads(&self.config)
    }

    /// An [`AnalyzerSpec`] over this model's head profile.
    pub fn analyzer_spec(&self, input_range: Vec<SpanPair>) -> AnalyzerSpec {
        AnalyzerSpec {
            input_range,
            attn_func: AttnFunc::SumNormalize,
            head_profile: self.head_profile(),
        }
    }

    pub fn generate(&mut self, prompts: &[&str], max_new_tokens: usize) -> Result<WorkerRun> {
        let tokens: Vec<Vec<u32>> = prompts.iter().map(tokenize).collect();
        self.generate_tokens(&tokens, max_new_tokens)
    }

    pub fn generate_tokens(&mut self, prompts: &[Vec<u32>], max_new_tokens: usize) -> Result<WorkerRun> {
        let run = self.worker.generate(prompts, max_new_tokens)?;
        self.last_run = Some(run.run_id.clone());
        Ok(run)
    }

    /// Runs the named analyzer on the latest run's cache.
    pub fn analyze(&self, analyzer_name: &str, spec: &AnalyzerSpec, params: &Value) -> Result<Value> {
        let analyzer = self.registry.analyzer(analyzer_name)?;
        let hook_dir = &self.env().hook_dir;
        let run_id = self.last_run.as_ref().ok_or_else(|| Error::CacheNotFound {
            path: cache_path(hook_dir, &RunId::new("<run_id>")),
        })?;
        analyzer.analyze(&AnalysisContext { hook_dir, run_id }, spec, params)
    }

    /// Detaches everything this instance installed.
    pub fn detach_all(&mut self) {
        for h in self.handles.drain(..) {
            self.worker.detach(&h);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HookqMode;
    use crate::runtime::{generate_greedy, HookTap, ModelSpec};
    use serde_json::json;
    use std::fs;

    struct Fixture {
        dir: tempfile::TempDir,
        model: Arc<ModelHandle>,
        config: HookConfig,
    }

    fn fixture() -> Fixture {
        Fixture {
            dir: tempfile::tempdir().unwrap(),
            model: Arc::new(ModelHandle::seeded(ModelSpec::toy(), 7).unwrap()),
            config: HookConfig::new(
                "toy",
                vec![HeadRef::new(0, 1), HeadRef::new(1, 2)],
                HookqMode::LastToken,
            ),
        }
    }

    impl Fixture {
        fn env(&self) -> EnvSettings {
            EnvSettings::in_dir(self.dir.path())
        }

        fn passive(&self) -> HookLlm {
            HookLlm::new(self.model.clone(), self.config.clone(), self.env(), Mode::Passive, None).unwrap()
        }
    }

    #[test]
    fn mode_plan_combinations() {
        let f = fixture();
        let plan = SteeringPlan::new(1, vec![0.1; 32], 1.0);
        assert!(HookLlm::new(f.model.clone(), f.config.clone(), f.env(), Mode::Passive, Some(plan.clone())).is_err());
        assert!(HookLlm::new(f.model.clone(), f.config.clone(), f.env(), Mode::Active, None).is_err());
        let llm = HookLlm::new(f.model.clone(), f.config.clone(), f.env(), Mode::Active, Some(plan)).unwrap();
        assert!(llm.worker().steering_plan().is_some());
    }

    #[test]
    fn invalid_config_rejected() {
        let f = fixture();
        let bad = HookConfig::new("toy", vec![HeadRef::new(19, 1)], HookqMode::LastToken);
        let err = HookLlm::new(f.model.clone(), bad, f.env(), Mode::Passive, None).unwrap_err();
        assert!(err.to_string().contains("layer 19 out of range"), "{err}");
    }

    #[test]
    fn passive_matches_bare_runtime_and_gates_on_flag() {
        let f = fixture();
        let mut llm = f.passive();
        let bare = generate_greedy(&f.model, &tokenize("hello world"), 5, &mut HookTap::none()).unwrap();

        let run = llm.generate(&["hello world"], 5).unwrap();
        assert_eq!(run.results[0], bare);
        assert!(run.cache_path.is_none());

        fs::write(&f.env().hook_flag_path, "").unwrap();
        let run = llm.generate(&["hello world"], 5).unwrap();
        assert_eq!(run.results[0], bare);
        assert!(run.cache_path.unwrap().exists());
    }

    #[test]
    fn analyze_flow() {
        let f = fixture();
        let mut llm = f.passive();
        let spec = llm.analyzer_spec(vec![SpanPair::new(0..5, 6..11)]);
        let err = llm.analyze("attntracker", &spec, &json!({})).unwrap_err();
        assert!(err.to_string().contains("qk_<run_id>.qkc"), "{err}");

        fs::write(&f.env().hook_flag_path, "").unwrap();
        llm.generate(&["hello world"], 2).unwrap();
        let out = llm.analyze("attntracker", &spec, &json!({})).unwrap();
        let s = out["score"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&s));
        let again = llm.analyze("attntracker", &spec, &json!({"threshold": 0.5})).unwrap();
        assert_eq!(again["score"], out["score"]);
        assert!(again["verdict"].is_string());

        let err = llm.analyze("foo", &spec, &json!({})).unwrap_err();
        assert!(err.to_string().contains("attntracker"));
    }

    #[test]
    fn active_zero_alpha_matches_bare() {
        let f = fixture();
        let plan = SteeringPlan::new(0, vec![0.7; 32], 0.0);
        let mut llm = HookLlm::new(f.model.clone(), f.config.clone(), f.env(), Mode::Active, Some(plan)).unwrap();
        let bare = generate_greedy(&f.model, &tokenize("steady"), 6, &mut HookTap::none()).unwrap();
        assert_eq!(llm.generate(&["steady"], 6).unwrap().results[0], bare);
    }
}
