// SPDX-License-Identifier: MIT OR Apache-2.0

//! `hookllm` command-line tool.
//!
//! Every subcommand prints one line of JSON on stdout. Exit codes: 0 success
//! or benign, 1 operational error, 2 usage error, 3 suspicious verdict.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hookllm::analyzers::{
    build_steering_vector, load_qk_cache, rerank_prompt, AnalyzerSpec, AttnFunc, SpanPair,
    SteeringVector,
};
use hookllm::config::{
    parse_config, parse_layer_heads, EnvSettings, HookConfig, HookqMode,
    LayerHeads, ENV_HOOK_DIR,
};
use hookllm::orchestrator::{AnalysisContext, HookLlm, Mode, Registry, ANALYZER_ATTNTRACKER, ANALYZER_CORER};
use hookllm::runtime::{detokenize, tokenize, ModelHandle, ModelSpec, ModelWeights};
use hookllm::worker::{read_run_id, RunId, SteeringPlan};
use serde_json::{json, Value};

const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Parser)]
#[command(name = "hookllm", version, about = "Probe, analyze and steer a toy decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Passive,
    Active,
}

/// Hook settings; each `VLLM_HOOK_*` variable, when set, wins over its flag.
#[derive(clap::Args, Clone, Default)]
struct HookArgs {
    /// Directory for run ids and Q/K caches (VLLM_HOOK_DIR).
    #[arg(long)]
    hook_dir: Option<PathBuf>,
    /// Capture flag file (VLLM_HOOK_FLAG); default `<hook-dir>/hook.flag`.
    #[arg(long)]
    hook_flag: Option<PathBuf>,
    /// Run-id file (VLLM_RUN_ID); default `<hook-dir>/run_id`.
    #[arg(long)]
    run_id_file: Option<PathBuf>,
    /// last_token or all_tokens (VLLM_HOOKQ_MODE).
    #[arg(long)]
    hookq_mode: Option<HookqMode>,
    /// Heads to probe as "L:h,h;L:h" (VLLM_HOOK_LAYER_HEADS).
    #[arg(long)]
    layer_heads: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded weight file and print its checksum.
    InitModel {
        /// Model spec JSON; the built-in toy spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy generation with probes (passive) or steering (active).
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Repeat for a batch.
        #[arg(long, required = true)]
        prompt: Vec<String>,
        #[arg(long, value_enum, default_value = "passive")]
        mode: CliMode,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[command(flatten)]
        steer: SteerArgs,
        #[command(flatten)]
        hooks: HookArgs,
    },
    /// Score a captured run.
    Analyze {
        /// Supplies the head profile unless VLLM_HOOK_LAYER_HEADS is set.
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the id in the run-id file.
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long, default_value = ANALYZER_ATTNTRACKER)]
        analyzer: String,
        /// "is,ie:qs,qe" token ranges; one per prompt of the run.
        #[arg(long)]
        input_range: Vec<SpanPair>,
        /// Document span "s,e" per prompt, for the corer analyzer.
        #[arg(long, value_parser = parse_span)]
        doc_span: Vec<(usize, usize)>,
        #[arg(long, default_value = "sum_normalize")]
        attn_func: AttnFunc,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[command(flatten)]
        hooks: HookArgs,
    },
    /// Rank documents by the attention a query pays them.
    Rerank {
        /// Supplies heads unless --heads is given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        query: String,
        /// One document per line.
        #[arg(long)]
        docs: PathBuf,
        /// "L:h,h;L:h"
        #[arg(long)]
        heads: Option<String>,
        #[command(flatten)]
        hooks: HookArgs,
    },
    /// Generate with and without a steering vector.
    Steer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[command(flatten)]
        steer: SteerArgs,
        #[command(flatten)]
        hooks: HookArgs,
    },
    /// Mean-difference steering vector from two prompt files.
    BuildSteerVector {
        #[arg(long)]
        model: PathBuf,
        /// One prompt per line.
        #[arg(long)]
        pos: PathBuf,
        #[arg(long)]
        neg: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a Q/K cache file.
    InspectCache {
        /// Defaults to the id in the run-id file.
        #[arg(long)]
        run_id: Option<String>,
        #[command(flatten)]
        hooks: HookArgs,
    },
}

#[derive(clap::Args, Clone, Default)]
struct SteerArgs {
    /// STV1 file from build-steer-vector.
    #[arg(long)]
    steer_vector: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f32,
    /// Injection layer; the vector's own layer by default.
    #[arg(long)]
    layer: Option<usize>,
}

/// Misuse of flags; exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_span(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected \"start,end\", got '{s}'"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("'{a}': {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("'{b}': {e}"))?;
    if a >= b {
        return Err(format!("empty span {a},{b}"));
    }
    Ok((a, b))
}

enum Outcome {
    Ok,
    Suspicious,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Suspicious) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<Usage>()
            || matches!(
                c.downcast_ref::<hookllm::Error>(),
                Some(
                    hookllm::Error::UnknownName { .. }
                        | hookllm::Error::UnknownAttnFunc(_)
                        | hookllm::Error::Mode(_)
                )
            )
    })
}

fn emit(v: &Value) {
    println!("{v}");
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::InitModel { spec, seed, out } => init_model(spec.as_deref(), seed, &out),
        Command::Generate {
            config,
            model,
            prompt,
            mode,
            max_new,
            steer,
            hooks,
        } => generate(&config, &model, &prompt, mode, max_new, &steer, &hooks),
        Command::Analyze {
            config,
            run_id,
            analyzer,
            input_range,
            doc_span,
            attn_func,
            threshold,
            hooks,
        } => analyze(&config, run_id, &analyzer, input_range, &doc_span, attn_func, threshold, &hooks),
        Command::Rerank {
            config,
            model,
            query,
            docs,
            heads,
            hooks,
        } => rerank(config.as_deref(), &model, &query, &docs, heads.as_deref(), &hooks),
        Command::Steer {
            model,
            prompt,
            max_new,
            steer,
            hooks,
        } => steer_demo(&model, &prompt, max_new, &steer, &hooks),
        Command::BuildSteerVector {
            model,
            pos,
            neg,
            layer,
            out,
        } => build_vector(&model, &pos, &neg, layer, &out),
        Command::InspectCache { run_id, hooks } => inspect_cache(run_id, &hooks),
    }
}

fn init_model(spec: Option<&Path>, seed: u64, out: &Path) -> Result<Outcome> {
    let spec = match spec {
        None => ModelSpec::toy(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ModelSpec::from_json(&text).map_err(|e| usage(format!("invalid spec {}: {e}", p.display())))?
        }
    };
    let weights = ModelWeights::seeded(&spec, seed);
    weights.save(&spec, out)?;
    emit(&json!({
        "path": out.display().to_string(),
        "checksum": weights.checksum(),
        "seed": seed,
        "spec": spec,
    }));
    Ok(Outcome::Ok)
}

/// Flags first, then any `VLLM_HOOK_*` variables on top.
fn env_settings(hooks: &HookArgs, fallback_dir: Option<&Path>) -> Result<EnvSettings> {
    let dir = match (std::env::var_os(ENV_HOOK_DIR), &hooks.hook_dir, fallback_dir) {
        (Some(d), _, _) if !d.is_empty() => PathBuf::from(d),
        (_, Some(d), _) => d.clone(),
        (_, None, Some(d)) => d.to_path_buf(),
        _ => return Err(usage(format!("a hook directory is required: --hook-dir or {ENV_HOOK_DIR}"))),
    };
    let mut env = EnvSettings::in_dir(dir);
    if let Some(p) = &hooks.hook_flag {
        env.hook_flag_path = p.clone();
    }
    if let Some(p) = &hooks.run_id_file {
        env.run_id_file = p.clone();
    }
    env.hookq_mode = hooks.hookq_mode;
    env.layer_heads = hooks
        .layer_heads
        .as_deref()
        .map(parse_layer_heads)
        .transpose()
        .map_err(|e| usage(e.to_string()))?;
    Ok(env.overlay_env()?)
}

fn load_config(path: &Path) -> Result<HookConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_config(&text)?)
}

fn load_model(path: &Path) -> Result<Arc<ModelHandle>> {
    Ok(Arc::new(ModelHandle::load(path)?))
}

fn steering_plan(steer: &SteerArgs, model: &ModelHandle) -> Result<Option<SteeringPlan>> {
    let Some(path) = &steer.steer_vector else {
        return Ok(None);
    };
    let v = SteeringVector::load(path)?;
    let plan = SteeringPlan::new(steer.layer.unwrap_or(v.layer), v.vector, steer.alpha);
    plan.validate(model.spec())?;
    Ok(Some(plan))
}

fn texts(run: &hookllm::worker::WorkerRun, model: &ModelHandle) -> Result<Vec<String>> {
    let vocab = model.spec().vocab_size;
    Ok(run
        .results
        .iter()
        .map(|r| detokenize(&r.generated_tokens, vocab))
        .collect::<hookllm::Result<_>>()?)
}

fn generate(
    config: &Path,
    model: &Path,
    prompts: &[String],
    mode: CliMode,
    max_new: usize,
    steer: &SteerArgs,
    hooks: &HookArgs,
) -> Result<Outcome> {
    if matches!(mode, CliMode::Active) && steer.steer_vector.is_none() {
        return Err(usage("--mode active requires --steer-vector"));
    }
    if matches!(mode, CliMode::Passive) && steer.steer_vector.is_some() {
        return Err(usage("--steer-vector needs --mode active"));
    }
    let env = env_settings(hooks, None)?;
    let config = load_config(config)?;
    let model = load_model(model)?;
    let plan = steering_plan(steer, &model)?;
    let mode = match mode {
        CliMode::Passive => Mode::Passive,
        CliMode::Active => Mode::Active,
    };
    let mut llm = HookLlm::new(model.clone(), config, env, mode, plan)?;
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let run = llm.generate(&refs, max_new)?;
    let texts = texts(&run, &model)?;
    let text = match texts.as_slice() {
        [single] => json!(single),
        many => json!(many),
    };
    emit(&json!({
        "text": text,
        "run_id": run.run_id,
        "cache": run.cache_path.map(|p| p.display().to_string()),
    }));
    Ok(Outcome::Ok)
}

fn resolve_run_id(explicit: Option<String>, env: &EnvSettings) -> Result<RunId> {
    match explicit {
        Some(id) => Ok(RunId::new(id)),
        None => Ok(read_run_id(&env.run_id_file)?),
    }
}

#[allow(clippy::too_many_arguments)]
fn analyze(
    config: &Path,
    run_id: Option<String>,
    analyzer_name: &str,
    input_range: Vec<SpanPair>,
    doc_spans: &[(usize, usize)],
    attn_func: AttnFunc,
    threshold: f64,
    hooks: &HookArgs,
) -> Result<Outcome> {
    let env = env_settings(hooks, None)?;
    let config = load_config(config)?;
    let registry = Registry::with_builtins();
    let analyzer = registry.analyzer(analyzer_name)?;
    let params = match analyzer_name {
        ANALYZER_ATTNTRACKER => {
            if input_range.is_empty() {
                return Err(usage("attntracker needs --input-range"));
            }
            json!({ "threshold": threshold })
        }
        ANALYZER_CORER => {
            if doc_spans.is_empty() {
                return Err(usage("corer needs --doc-span"));
            }
            json!({ "doc_spans": doc_spans.iter().map(|(a, b)| [a, b]).collect::<Vec<_>>() })
        }
        _ => json!({ "threshold": threshold }),
    };
    let run_id = resolve_run_id(run_id, &env)?;
    let spec = AnalyzerSpec {
        input_range,
        attn_func,
        head_profile: env.effective_heads(&config),
    };
    let out = analyzer.analyze(
        &AnalysisContext {
            hook_dir: &env.hook_dir,
            run_id: &run_id,
        },
        &spec,
        &params,
    )?;
    emit(&out);
    let suspicious = |v: &Value| v.get("verdict").and_then(Value::as_str) == Some("suspicious");
    let flagged = suspicious(&out)
        || out
            .get("batch")
            .and_then(Value::as_array)
            .is_some_and(|b| b.iter().any(suspicious));
    Ok(if flagged { Outcome::Suspicious } else { Outcome::Ok })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if lines.is_empty() {
        return Err(anyhow!("{} holds no non-empty lines", path.display()));
    }
    Ok(lines)
}

fn rerank(
    config: Option<&Path>,
    model: &Path,
    query: &str,
    docs: &Path,
    heads: Option<&str>,
    hooks: &HookArgs,
) -> Result<Outcome> {
    let heads: Option<LayerHeads> = heads
        .map(parse_layer_heads)
        .transpose()
        .map_err(|e| usage(e.to_string()))?;
    let mut config = match (config, &heads) {
        (Some(p), _) => load_config(p)?,
        (None, Some(_)) => HookConfig::new("rerank", Vec::new(), HookqMode::LastToken),
        (None, None) => return Err(usage("rerank needs --config or --heads")),
    };
    if let Some(map) = &heads {
        config.important_heads = map
            .iter()
            .flat_map(|(l, hs)| hs.iter().map(|h| hookllm::config::HeadRef::new(*l, *h)))
            .collect();
    }
    let docs = read_lines(docs)?;
    let model = load_model(model)?;

    // a private hook dir unless the caller picked one
    let scratch = tempfile::tempdir()?;
    let env = env_settings(hooks, Some(scratch.path()))?;
    if env.hook_dir == scratch.path() {
        fs::write(&env.hook_flag_path, b"").context("creating hook flag")?;
    }
    let mut llm = HookLlm::new(model, config, env, Mode::Passive, None)?;
    let (prompts, spans): (Vec<_>, Vec<_>) = docs.iter().map(|d| rerank_prompt(query, d)).unzip();
    llm.generate_tokens(&prompts, 1)?;
    let spec = llm.analyzer_spec(Vec::new());
    let params = json!({ "doc_spans": spans.iter().map(|s| [s.start, s.end]).collect::<Vec<_>>() });
    let out = llm.analyze(ANALYZER_CORER, &spec, &params)?;
    emit(&out);
    Ok(Outcome::Ok)
}

fn steer_demo(model: &Path, prompt: &str, max_new: usize, steer: &SteerArgs, hooks: &HookArgs) -> Result<Outcome> {
    if steer.steer_vector.is_none() {
        return Err(usage("steer requires --steer-vector"));
    }
    let model = load_model(model)?;
    let plan = steering_plan(steer, &model)?;
    let scratch = tempfile::tempdir()?;
    let env = env_settings(hooks, Some(scratch.path()))?;
    let config = HookConfig::new("steer", Vec::new(), HookqMode::LastToken);
    let tokens = vec![tokenize(prompt)];

    let mut base = HookLlm::new(model.clone(), config.clone(), env.clone(), Mode::Passive, None)?;
    let base_run = base.generate_tokens(&tokens, max_new)?;
    let mut steered = HookLlm::new(model.clone(), config, env, Mode::Active, plan)?;
    let steered_run = steered.generate_tokens(&tokens, max_new)?;
    emit(&json!({
        "baseline": texts(&base_run, &model)?[0],
        "steered": texts(&steered_run, &model)?[0],
        "run_id": steered_run.run_id,
    }));
    Ok(Outcome::Ok)
}

fn build_vector(model: &Path, pos: &Path, neg: &Path, layer: usize, out: &Path) -> Result<Outcome> {
    let model = load_model(model)?;
    let pos: Vec<Vec<u32>> = read_lines(pos)?.iter().map(tokenize).collect();
    let neg: Vec<Vec<u32>> = read_lines(neg)?.iter().map(tokenize).collect();
    let v = build_steering_vector(&model, &pos, &neg, layer)?;
    v.save(out)?;
    emit(&json!({
        "path": out.display().to_string(),
        "layer": v.layer,
        "d_model": v.vector.len(),
        "norm": v.norm(),
    }));
    Ok(Outcome::Ok)
}

fn inspect_cache(run_id: Option<String>, hooks: &HookArgs) -> Result<Outcome> {
    let env = env_settings(hooks, None)?;
    let run_id = resolve_run_id(run_id, &env)?;
    let capture = load_qk_cache(&run_id, &env.hook_dir)?;
    let modules: Vec<Value> = (0..capture.batch_count())
        .flat_map(|b| {
            capture.batch(b).into_iter().map(move |e| {
                json!({
                    "batch": b,
                    "module": e.module_name,
                    "layer": e.layer_num,
                    "q_shape": e.q.shape,
                    "k_shape": e.k_all.shape,
                })
            })
        })
        .collect();
    let rows: Vec<(usize, usize)> = capture
        .entries
        .iter()
        .map(|e| (e.q.shape[0], e.k_all.shape[0]))
        .collect();
    let mode = if rows.iter().all(|(q, _)| *q == 1) {
        "last_token"
    } else if rows.iter().all(|(q, k)| q == k) {
        "all_tokens"
    } else {
        "mixed"
    };
    emit(&json!({
        "run_id": run_id,
        "batches": capture.batch_count(),
        "layers": capture.captured_layers(),
        "hookq_mode": mode,
        "modules": modules,
    }));
    Ok(Outcome::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_flag_parses_half_open_ranges() {
        assert_eq!(parse_span("3, 9"), Ok((3, 9)));
        assert!(parse_span("9,3").is_err());
        assert!(parse_span("4").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_are_detected_through_context() {
        let e = usage("bad flag").context("while parsing");
        assert!(is_usage(&e));
        assert!(!is_usage(&anyhow!("disk full")));
        let unknown: anyhow::Error = hookllm::Error::UnknownAttnFunc("x".into()).into();
        assert!(is_usage(&unknown));
    }
}
