// SPDX-License-Identifier: MIT OR Apache-2.0

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use super::qkc::{flush_capture, QkCapture, QkEntry};
use super::run_id::{begin_run, RunId};
use super::steering::SteeringPlan;
use crate::config::{EnvSettings, HookqMode, LayerHeads};
use crate::error::{Error, Result};
use crate::runtime::{attn_module_name, generate_greedy, GenerationResult, HookTap, ModelHandle, QkEvent};
use crate::tensor::Tensor3;

/// Token returned by an install call; pass it to [`HookWorker::detach`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeHandle {
    id: u64,
}

/// Output of one [`HookWorker::generate`] call.
#[derive(Debug, Clone)]
pub struct WorkerRun {
    pub run_id: RunId,
    pub results: Vec<GenerationResult>,
    /// Set when the flag file was present and something was captured.
    pub cache_path: Option<PathBuf>,
}

#[derive(Debug)]
struct Probes {
    handle: u64,
    layer_heads: LayerHeads,
}

#[derive(Debug)]
struct Steering {
    handle: u64,
    plan: SteeringPlan,
}

/// Holds the probes and steering installed on a model and runs generation
/// through them.
#[derive(Debug)]
pub struct HookWorker {
    model: Arc<ModelHandle>,
    env: EnvSettings,
    hookq_mode: HookqMode,
    capture_decode_steps: bool,
    probes: Option<Probes>,
    steering: Option<Steering>,
    next_handle: u64,
}

impl HookWorker {
    pub fn new(model: Arc<ModelHandle>, env: EnvSettings, hookq_mode: HookqMode) -> Self {
        Self {
            model,
            env,
            hookq_mode,
            capture_decode_steps: false,
            probes: None,
            steering: None,
            next_handle: 1,
        }
    }

    /// Also capture the query rows of decode steps, not just the prefill pass.
    pub fn with_decode_capture(mut self, enabled: bool) -> Self {
        self.capture_decode_steps = enabled;
        self
    }

    pub fn model(&self) -> &Arc<ModelHandle> {
        &self.model
    }

    pub fn env(&self) -> &EnvSettings {
        &self.env
    }

    pub fn hookq_mode(&self) -> HookqMode {
        self.hookq_mode
    }

    fn next_handle(&mut self) -> u64 {
        let id = self.next_handle;
        self.next_handle += 1;
        id
    }

    /// Installs Q/K probes on the attention modules of every layer in
    /// `layer_heads`. Whole-module tensors are kept; heads are selected later
    /// by the analyzers.
    pub fn install_probes(&mut self, layer_heads: &LayerHeads) -> Result<ProbeHandle> {
        if self.probes.is_some() {
            return Err(Error::ProbesInstalled);
        }
        if layer_heads.is_empty() {
            return Err(Error::InvalidInput("no layers to probe".into()));
        }
        let n_layers = self.model.spec().n_layers;
        if let Some(&layer) = layer_heads.keys().find(|&&l| l >= n_layers) {
            return Err(Error::UnknownLayer { layer, n_layers });
        }
        let id = self.next_handle();
        self.probes = Some(Probes {
            handle: id,
            layer_heads: layer_heads.clone(),
        });
        Ok(ProbeHandle { id })
    }

    /// Names of the hooked attention modules, in layer order.
    pub fn hooked_modules(&self) -> Vec<String> {
        let wanted = |name: &String| {
            self.probes.as_ref().is_some_and(|p| {
                p.layer_heads
                    .keys()
                    .any(|&l| *name == attn_module_name(l))
            })
        };
        self.model
            .module_names()
            .iter()
            .filter(|n| n.ends_with(".self_attn.attn") && wanted(n))
            .cloned()
            .collect()
    }

    pub fn install_steering(&mut self, plan: SteeringPlan) -> Result<ProbeHandle> {
        if self.steering.is_some() {
            return Err(Error::ProbesInstalled);
        }
        plan.validate(self.model.spec())?;
        let id = self.next_handle();
        self.steering = Some(Steering { handle: id, plan });
        Ok(ProbeHandle { id })
    }

    pub fn steering_plan(&self) -> Option<&SteeringPlan> {
        self.steering.as_ref().map(|s| &s.plan)
    }

    /// Removes whatever `handle` installed. Returns false (and warns) when it
    /// was already detached.
    pub fn detach(&mut self, handle: &ProbeHandle) -> bool {
        if self.probes.as_ref().is_some_and(|p| p.handle == handle.id) {
            self.probes = None;
            return true;
        }
        if self.steering.as_ref().is_some_and(|s| s.handle == handle.id) {
            self.steering = None;
            return true;
        }
        tracing::warn!(handle = handle.id, "detach on a handle that is not installed");
        false
    }

    /// Greedy generation for every prompt under one run id.
    ///
    /// The flag file is checked once, before the first forward pass. When it
    /// exists and probes are installed, the captures of all prompts are
    /// merged into a single `qk_<run_id>.qkc`.
    pub fn generate(&self, prompts: &[Vec<u32>], max_new_tokens: usize) -> Result<WorkerRun> {
        if prompts.is_empty() {
            return Err(Error::InvalidInput("no prompts".into()));
        }
        let run_id = begin_run(&self.env)?;
        let capturing = self.probes.is_some() && self.env.flag_active();
        let mut capture = QkCapture {
            run_id: run_id.to_string(),
            entries: Vec::new(),
        };
        let mut results = Vec::with_capacity(prompts.len());
        for prompt in prompts {
            let per_prompt = RefCell::new(BTreeMap::<usize, QkEntry>::new());
            let mut tap = self.build_tap(capturing.then_some(&per_prompt));
            results.push(generate_greedy(&self.model, prompt, max_new_tokens, &mut tap)?);
            drop(tap);
            capture.entries.extend(per_prompt.into_inner().into_values());
        }
        let cache_path = if capturing && !capture.is_empty() {
            Some(flush_capture(&capture, &run_id, &self.env)?)
        } else {
            None
        };
        Ok(WorkerRun {
            run_id,
            results,
            cache_path,
        })
    }

    /// The tap for one prompt: steering first, then Q/K capture into `sink`.
    pub fn build_tap<'a>(
        &'a self,
        sink: Option<&'a RefCell<BTreeMap<usize, QkEntry>>>,
    ) -> HookTap<'a> {
        let mut tap = HookTap::none();
        if let Some(steering) = &self.steering {
            let plan = &steering.plan;
            tap = tap.on_residual(move |site, hidden| {
                if site.layer == plan.layer {
                    plan.apply(site.n_new, hidden);
                }
            });
        }
        if let (Some(probes), Some(sink)) = (&self.probes, sink) {
            let mode = self.hookq_mode;
            let decode = self.capture_decode_steps;
            tap = tap.on_qk(move |event| {
                if probes.layer_heads.contains_key(&event.layer) {
                    record(&mut sink.borrow_mut(), event, mode, decode);
                }
            });
        }
        tap
    }
}

fn record(sink: &mut BTreeMap<usize, QkEntry>, event: &QkEvent<'_>, mode: HookqMode, decode: bool) {
    let (nh, dh) = (event.n_heads, event.d_head);
    let row = nh * dh;
    let n_new = event.n_new();
    let k_all = Tensor3::new([event.total(), nh, dh], event.k_all.to_vec());
    match sink.get_mut(&event.layer) {
        None => {
            let first = match mode {
                HookqMode::AllTokens => 0,
                HookqMode::LastToken => n_new - 1,
            };
            let q = Tensor3::new([n_new - first, nh, dh], event.q[first * row..].to_vec());
            sink.insert(
                event.layer,
                QkEntry {
                    module_name: event.module_name.to_string(),
                    layer_num: event.layer,
                    q,
                    k_all,
                },
            );
        }
        Some(entry) if decode => {
            entry
                .q
                .append_rows(&Tensor3::new([n_new, nh, dh], event.q.to_vec()));
            entry.k_all = k_all;
        }
        Some(_) => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{tokenize, ModelSpec};
    use std::fs;

    fn setup(mode: HookqMode) -> (tempfile::TempDir, HookWorker) {
        let dir = tempfile::tempdir().unwrap();
        let model = Arc::new(ModelHandle::seeded(ModelSpec::toy(), 7).unwrap());
        let worker = HookWorker::new(model, EnvSettings::in_dir(dir.path()), mode);
        (dir, worker)
    }

    fn flag_on(w: &HookWorker) {
        fs::write(&w.env().hook_flag_path, b"").unwrap();
    }

    #[test]
    fn hooks_only_requested_layers() {
        let (_d, mut w) = setup(HookqMode::AllTokens);
        w.install_probes(&LayerHeads::from([(0, vec![1])])).unwrap();
        assert_eq!(w.hooked_modules(), vec!["model.layers.0.self_attn.attn"]);
    }

    #[test]
    fn install_errors() {
        let (_d, mut w) = setup(HookqMode::AllTokens);
        assert!(matches!(
            w.install_probes(&LayerHeads::from([(5, vec![0])])),
            Err(Error::UnknownLayer { layer: 5, .. })
        ));
        assert!(w.install_probes(&LayerHeads::new()).is_err());
        w.install_probes(&LayerHeads::from([(1, vec![0])])).unwrap();
        assert!(matches!(
            w.install_probes(&LayerHeads::from([(1, vec![0])])),
            Err(Error::ProbesInstalled)
        ));
    }

    #[test]
    fn flag_gates_capture() {
        let (dir, mut w) = setup(HookqMode::LastToken);
        w.install_probes(&LayerHeads::from([(0, vec![1]), (1, vec![2])])).unwrap();
        let prompt = vec![tokenize("gate me")];
        let run = w.generate(&prompt, 3).unwrap();
        assert!(run.cache_path.is_none());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1); // run id file only

        flag_on(&w);
        let run = w.generate(&prompt, 3).unwrap();
        let path = run.cache_path.unwrap();
        assert!(path.ends_with(format!("qk_{}.qkc", run.run_id)));
        let cap = crate::worker::load_qk_cache(&run.run_id, dir.path()).unwrap();
        assert_eq!(cap.entries.len(), 2);
        for e in &cap.entries {
            assert_eq!(e.q.rows(), 1);
            assert_eq!(e.k_all.rows(), 7);
        }
    }

    #[test]
    fn all_tokens_keeps_every_prompt_row() {
        let (dir, mut w) = setup(HookqMode::AllTokens);
        w.install_probes(&LayerHeads::from([(1, vec![0])])).unwrap();
        flag_on(&w);
        let run = w.generate(&[tokenize("abcde"), tokenize("xy")], 4).unwrap();
        let cap = crate::worker::load_qk_cache(&run.run_id, dir.path()).unwrap();
        assert_eq!(cap.batch_count(), 2);
        assert_eq!(cap.batch(0)[0].q.rows(), 5);
        assert_eq!(cap.batch(1)[0].q.rows(), 2);
        assert_eq!(cap.batch(1)[0].k_all.rows(), 2);
    }

    #[test]
    fn decode_capture_extends_rows() {
        let (dir, mut w) = setup(HookqMode::LastToken);
        w = w.with_decode_capture(true);
        w.install_probes(&LayerHeads::from([(0, vec![0])])).unwrap();
        flag_on(&w);
        let run = w.generate(&[tokenize("abc")], 4).unwrap();
        let n_gen = run.results[0].generated_tokens.len();
        let cap = crate::worker::load_qk_cache(&run.run_id, dir.path()).unwrap();
        let e = &cap.entries[0];
        // prefill row + one row per forwarded decode token
        assert_eq!(e.q.rows(), n_gen);
        assert_eq!(e.k_all.rows(), 3 + n_gen - 1);
        assert_eq!(e.query_position(0), 2);
    }

    #[test]
    fn detach_is_idempotent_and_stops_capture() {
        let (dir, mut w) = setup(HookqMode::LastToken);
        let h = w.install_probes(&LayerHeads::from([(0, vec![0])])).unwrap();
        flag_on(&w);
        let prompt = vec![tokenize("detach")];
        assert!(w.generate(&prompt, 2).unwrap().cache_path.is_some());
        assert!(w.detach(&h));
        assert!(!w.detach(&h));
        let run = w.generate(&prompt, 2).unwrap();
        assert!(run.cache_path.is_none());
        assert!(!crate::worker::cache_path(dir.path(), &run.run_id).exists());
    }

    #[test]
    fn zero_steering_matches_baseline() {
        let (_d, mut w) = setup(HookqMode::AllTokens);
        let prompt = vec![tokenize("steer")];
        let base = w.generate(&prompt, 6).unwrap().results;
        let h = w.install_steering(SteeringPlan::new(1, vec![0.0; 32], 3.0)).unwrap();
        assert_eq!(w.generate(&prompt, 6).unwrap().results, base);
        w.detach(&h);
        w.install_steering(SteeringPlan::new(1, vec![1.0; 32], 0.0)).unwrap();
        assert_eq!(w.generate(&prompt, 6).unwrap().results, base);
    }
}
