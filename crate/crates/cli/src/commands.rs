use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use spear::algebra::{run_pipeline, RunOptions, RunReport};
use spear::backend::{BackendConfig, CacheSnapshot, HttpConfig, PrefixCache};
use spear::bench::{fusion_suite, refinement_suite};
use spear::config::Config;
use spear::dsl::{self, DslError};
use spear::meta::{history_trace, refiner_stats, stats_to_csv, stats_to_json};
use spear::planner::apply_fusion;
use spear::store::{replay_log, EditKind, PromptStore};

use crate::{Command, Format, RuntimeArgs, Suite};

/// Errors in how the command was invoked rather than in what it ran; exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

pub fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run { files, pipeline, runtime, store, optimize, shadow, out, log } => {
            run(RunArgs { files, pipeline, runtime, store, optimize, shadow, out, log })
        }
        Command::Bench { suite, runtime, out } => bench(suite, &runtime, out.as_deref()),
        Command::Check { files } => check(&files),
        Command::Fmt { files, write, check } => fmt(&files, write, check),
        Command::Inspect { store, key, json } => inspect(&store, &key, json),
        Command::Diff { store, left, right } => diff(&store, &left, &right),
        Command::Replay { store, keys } => replay(&store, &keys),
        Command::Stats { reports, format } => stats(&reports, format),
    }
}

/// Loads the configuration and applies the runtime flags. An HTTP backend
/// runs only with `--live`; `--live` alone selects the default HTTP endpoint.
fn config(rt: &RuntimeArgs) -> Result<Config> {
    let mut config = match &rt.config {
        Some(p) => Config::load(p).map_err(|e| usage(e.to_string()))?,
        None => Config::default(),
    };
    if let Some(seed) = rt.seed {
        config.corpus.seed = seed;
    }
    match (&config.backend, rt.live) {
        (BackendConfig::Http(_), false) => {
            bail!(usage("the configured backend is HTTP; pass --live to allow network calls"))
        }
        (BackendConfig::Http(_), true) => {}
        (_, true) => config.backend = BackendConfig::Http(HttpConfig::default()),
        (_, false) => {}
    }
    Ok(config)
}

fn print_diagnostics(diags: &[dsl::Diagnostic]) {
    for d in diags {
        eprintln!("{d}");
    }
}

/// Parses, validates and merges program files. Diagnostics are printed; a
/// program with errors is a failure, an unreadable file a usage error.
fn load_program(files: &[PathBuf]) -> Result<std::result::Result<dsl::Program, ()>> {
    match dsl::load_files(files) {
        Ok((program, warnings)) => {
            print_diagnostics(&warnings);
            Ok(Ok(program))
        }
        Err(DslError::Diagnostics(diags)) => {
            print_diagnostics(&diags);
            Ok(Err(()))
        }
        Err(e @ DslError::Io { .. }) => Err(usage(e.to_string())),
    }
}

fn cache_path(store: &Path) -> PathBuf {
    let mut name = store.as_os_str().to_owned();
    name.push(".cache.json");
    PathBuf::from(name)
}

struct RunArgs {
    files: Vec<PathBuf>,
    pipeline: Option<String>,
    runtime: RuntimeArgs,
    store: Option<PathBuf>,
    optimize: bool,
    shadow: bool,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let config = config(&args.runtime)?;
    let Ok(program) = load_program(&args.files)? else {
        return Ok(ExitCode::from(1));
    };
    let store = match &args.store {
        Some(p) if p.exists() => PromptStore::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        _ => PromptStore::new(),
    };
    let lowered = match dsl::lower_onto(&program, store) {
        Ok(l) => l,
        Err(DslError::Diagnostics(diags)) => {
            print_diagnostics(&diags);
            return Ok(ExitCode::from(1));
        }
        Err(e) => return Err(e.into()),
    };
    let names = || lowered.pipelines.keys().cloned().collect::<Vec<_>>().join(", ");
    let pipeline = match &args.pipeline {
        Some(name) => lowered
            .pipelines
            .get(name)
            .ok_or_else(|| usage(format!("unknown pipeline `{name}`; available: {}", names())))?,
        None if lowered.pipelines.len() == 1 => lowered.pipelines.values().next().expect("one pipeline"),
        None => bail!(usage(format!("--pipeline is required; available: {}", names()))),
    };

    let cache = match &args.store {
        Some(p) if cache_path(p).exists() => {
            let text = fs::read_to_string(cache_path(p))?;
            let snap: CacheSnapshot = serde_json::from_str(&text)
                .with_context(|| format!("{}: malformed cache snapshot", cache_path(p).display()))?;
            PrefixCache::restore(&snap)
        }
        _ => config.cache.build(),
    };
    let backend = config.backend_handle_with(cache).map_err(|e| usage(e.to_string()))?;

    let (pipeline, rewrites) = if args.optimize {
        let plan = apply_fusion(pipeline, &config.plan, &config.cost)?;
        for r in &plan.rewrites {
            log::info!("rewrite: {r:?}");
        }
        (plan.pipeline, plan.rewrites)
    } else {
        (pipeline.clone(), Vec::new())
    };

    let state = spear::state::ExecState::new(lowered.store);
    let options = RunOptions { shadow: args.shadow, log_path: args.log.clone(), check_invariants: false, keep_existing: args.store.is_some() };
    let mut report: RunReport = run_pipeline(&pipeline, state, &backend, &lowered.registry, &options)?;
    report.rewrites = rewrites;

    let json = report.to_json();
    match &args.out {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    if let Some(p) = &args.store {
        if !args.shadow {
            report.state.store.save(p).with_context(|| format!("saving {}", p.display()))?;
        }
        let snap = serde_json::to_string(&backend.snapshot())?;
        fs::write(cache_path(p), snap).with_context(|| format!("saving {}", cache_path(p).display()))?;
    }
    match &report.error {
        Some(e) => {
            eprintln!("pipeline `{}` failed: {e}", report.pipeline);
            Ok(ExitCode::from(1))
        }
        None => Ok(ExitCode::SUCCESS),
    }
}

fn bench(suite: Suite, rt: &RuntimeArgs, out: Option<&Path>) -> Result<ExitCode> {
    let mut config = config(rt)?;
    if rt.live {
        config.refinement.report_f1 = true;
        config.fusion.report_accuracy = true;
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let write = |name: &str, body: &str| -> Result<()> {
        if let Some(dir) = out {
            let p = dir.join(name);
            fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    };
    match suite {
        Suite::RefinementModes => {
            let s = refinement_suite(&config)?;
            print!("{}", s.to_table());
            write("refinement_modes.csv", &s.to_csv()?)?;
            write("refinement_modes.json", &serde_json::to_string_pretty(&s)?)?;
        }
        Suite::FusionSelectivity => {
            let s = fusion_suite(&config)?;
            print!("{}", s.to_table());
            write("fusion_selectivity.csv", &s.to_csv()?)?;
            write("fusion_selectivity.json", &serde_json::to_string_pretty(&s)?)?;
            // A violated gain pattern is a measurement, not a failed command.
            for v in &s.violations {
                eprintln!("warning: gain pattern violated: {v}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn check(files: &[PathBuf]) -> Result<ExitCode> {
    let Ok(program) = load_program(files)? else {
        return Ok(ExitCode::from(1));
    };
    let diags = dsl::validate(&program);
    let errors = diags.iter().filter(|d| d.is_error()).count();
    // Warnings were already printed by the loader; print errors only.
    print_diagnostics(&diags.into_iter().filter(|d| d.is_error()).collect::<Vec<_>>());
    if errors > 0 {
        return Ok(ExitCode::from(1));
    }
    println!("ok: {} pipeline(s)", program.pipelines().count());
    Ok(ExitCode::SUCCESS)
}

fn fmt(files: &[PathBuf], write: bool, check: bool) -> Result<ExitCode> {
    let mut failed = false;
    for f in files {
        let text = fs::read_to_string(f).map_err(|e| usage(format!("{}: {e}", f.display())))?;
        let program = match dsl::parse(&text) {
            Ok(p) => p,
            Err(diags) => {
                let name = f.display().to_string();
                print_diagnostics(&diags.into_iter().map(|d| d.in_file(&name)).collect::<Vec<_>>());
                failed = true;
                continue;
            }
        };
        let formatted = dsl::pretty(&program);
        if check {
            if formatted != text {
                println!("{}: not in canonical form", f.display());
                failed = true;
            }
        } else if write {
            if formatted != text {
                fs::write(f, &formatted).with_context(|| format!("writing {}", f.display()))?;
            }
        } else {
            print!("{formatted}");
        }
    }
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn open_store(path: &Path) -> Result<PromptStore> {
    PromptStore::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn inspect(store: &Path, key: &str, json: bool) -> Result<ExitCode> {
    let store = open_store(store)?;
    let entry = store.resolve(key).map_err(|e| usage(e.to_string()))?;
    let history = history_trace(&entry);
    if json {
        let v = serde_json::json!({ "entry": entry, "history": history });
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!("key:     {}", entry.key);
    println!("version: {}", entry.version);
    if !entry.params.is_empty() {
        let params: Vec<String> = entry.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("params:  {}", params.join(", "));
    }
    if !entry.tags.is_empty() {
        println!("tags:    {}", entry.tags.iter().cloned().collect::<Vec<_>>().join(", "));
    }
    println!("text:");
    for line in entry.text.lines() {
        println!("  {line}");
    }
    println!("history:");
    for h in history {
        let trigger = h.trigger.as_deref().map(|t| format!(" when {t}")).unwrap_or_default();
        println!("  #{} {} {} by {}{} ({:+} tokens)", h.index, h.action, h.mode, h.refiner_id, trigger, h.size_delta);
    }
    Ok(ExitCode::SUCCESS)
}

fn diff(store: &Path, left: &str, right: &str) -> Result<ExitCode> {
    let store = open_store(store)?;
    let report = store.diff_prompts(left, right).map_err(|e| usage(e.to_string()))?;
    println!("--- {left} ({})", report.left_version);
    println!("+++ {right} ({})", report.right_version);
    for e in &report.edits {
        let sign = match e.kind {
            EditKind::Insert => '+',
            EditKind::Delete => '-',
        };
        println!("{sign} {}", e.text);
    }
    for (k, v) in &report.params.added {
        println!("param + {k}={v}");
    }
    for (k, v) in &report.params.removed {
        println!("param - {k}={v}");
    }
    for (k, (l, r)) in &report.params.changed {
        println!("param ~ {k}: {l} -> {r}");
    }
    match report.divergence {
        Some(i) => println!("histories diverge at record {i}"),
        None => println!("histories identical"),
    }
    Ok(ExitCode::SUCCESS)
}

fn replay(store: &Path, keys: &[String]) -> Result<ExitCode> {
    let store = open_store(store)?;
    let keys: Vec<String> =
        if keys.is_empty() { store.entries().map(|e| e.key.clone()).collect() } else { keys.to_vec() };
    let mut failed = false;
    for key in keys {
        let Some(entry) = store.get(&key) else {
            bail!(usage(format!("unknown prompt `{key}`")));
        };
        match replay_log(&key, &entry.ref_log) {
            Ok(rebuilt) if rebuilt.text == entry.text && rebuilt.version == entry.version => {
                println!("{key}: ok ({} records, {})", entry.ref_log.len(), entry.version);
            }
            Ok(rebuilt) => {
                println!("{key}: mismatch (stored {}, replayed {})", entry.version, rebuilt.version);
                failed = true;
            }
            Err(e) => {
                println!("{key}: {e}");
                failed = true;
            }
        }
    }
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn stats(reports: &[PathBuf], format: Format) -> Result<ExitCode> {
    let mut loaded = Vec::new();
    for p in reports {
        let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        let r: RunReport = serde_json::from_str(&text).with_context(|| format!("{}: not a run report", p.display()))?;
        loaded.push(r);
    }
    let table = refiner_stats(loaded.iter().map(|r| r.trace.as_slice()));
    match format {
        Format::Json => println!("{}", stats_to_json(&table)),
        Format::Csv => stats_to_csv(&table.rows, std::io::stdout().lock())?,
        Format::Table => {
            println!("{:<28} {:<9} {:>5} {:>9} {:>9} {:>7}", "refiner", "mode", "n", "Δconf", "Δtokens", "retry");
            for r in &table.rows {
                println!(
                    "{:<28} {:<9} {:>5} {:>+9.3} {:>+9.1} {:>7.2}",
                    r.refiner_id, r.mode, r.n_applied, r.mean_confidence_delta, r.mean_token_delta, r.retry_follow_rate
                );
            }
            for (id, n) in &table.unmeasured {
                println!("{id}: {n} unmeasured application(s)");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
