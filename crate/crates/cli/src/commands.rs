use std::fmt;
use std::io::Write;
use std::path::Path;

use model_arith::dist::TokenId;
use model_arith::engine::{generate, EngineError, GenerationConfig, GenerationResult};
use model_arith::formula::{Formula, FormulaError};
use model_arith::harness::{run_suite, run_sweep, HarnessError, SuiteOptions, SweepSpec};
use model_arith::speculative::{
    speculative_generate, CalibrationConfig, SpeculativeError, SpeculativeFactors, TuningReport,
};
use serde::Serialize;

use crate::config::{ConfigError, Engine, EngineConfig};
use crate::{Cli, Command, GenerateArgs, SweepArgs, TestArgs, TuneArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad input from the user: config, flags, files or formulas.
    User(String),
    /// A model backend failed.
    Backend(String),
    /// A test suite ran and did not pass.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Failed(_) => 1,
            Self::User(_) => 2,
            Self::Backend(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::User(m) | Self::Backend(m) | Self::Failed(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::User(e.to_string())
    }
}

fn formula_error(e: FormulaError, src: &str) -> CliError {
    if e.provider_error().is_some_and(|p| p.is_backend()) {
        return CliError::Backend(e.to_string());
    }
    let mut msg = e.to_string();
    if let Some(span) = e.span() {
        // Single-line formulas are the norm; show the line holding the span.
        let line = src.lines().nth(span.line.saturating_sub(1)).unwrap_or(src);
        let width = src
            .get(span.start..span.end)
            .map_or(1, |s| s.chars().count().max(1));
        msg.push_str(&format!(
            "\n  {line}\n  {}{}",
            " ".repeat(span.col.saturating_sub(1)),
            "^".repeat(width)
        ));
    }
    CliError::User(msg)
}

fn engine_error(e: EngineError) -> CliError {
    if e.provider_error().is_some_and(|p| p.is_backend()) {
        CliError::Backend(e.to_string())
    } else {
        CliError::User(e.to_string())
    }
}

fn speculative_error(e: SpeculativeError) -> CliError {
    match e {
        SpeculativeError::Engine(e) => engine_error(e),
        other => CliError::User(other.to_string()),
    }
}

fn harness_error(e: HarnessError) -> CliError {
    if e.is_backend() {
        CliError::Backend(e.to_string())
    } else {
        CliError::User(e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::User(format!("{}: {e}", path.display()))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn out(w: &mut dyn Write, text: &str) -> Result<(), CliError> {
    w.write_all(text.as_bytes())
        .map_err(|e| CliError::User(format!("cannot write output: {e}")))
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("results serialize");
    s.push('\n');
    s
}

fn load_engine(cli: &Cli) -> Result<Engine, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| {
        CliError::User("no config given; pass --config or set MODEL_ARITH_CONFIG".into())
    })?;
    Ok(EngineConfig::load(path)?.build()?)
}

pub(crate) fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(&load_engine(cli)?, a, stdout, stderr),
        Command::Tune(a) => cmd_tune(&load_engine(cli)?, a, stdout, stderr),
        Command::Sweep(a) => cmd_sweep(&load_engine(cli)?, a, stdout, stderr),
        Command::Test(a) => cmd_test(a, stdout, stderr),
    }
}

fn encode(engine: &Engine, text: &str) -> Result<Vec<TokenId>, CliError> {
    engine
        .tokenizer
        .encode(text)
        .map_err(|e| CliError::User(format!("cannot tokenize prompt: {e}")))
}

#[derive(Serialize)]
struct GenerateOutput<'a> {
    text: String,
    #[serde(flatten)]
    result: &'a GenerationResult,
}

fn factors_for(
    engine: &Engine,
    f: &Formula,
    spec: &str,
    prompt: &[TokenId],
    seed: u64,
    stderr: &mut dyn Write,
) -> Result<SpeculativeFactors, CliError> {
    match spec {
        "ones" => Ok(SpeculativeFactors::ones(f)),
        "auto" => {
            let cal = CalibrationConfig {
                prompts: vec![prompt.to_vec()],
                samples: 10,
                max_tokens: engine.defaults.max_tokens,
                seed,
                policy: engine.defaults.policy.clone(),
            };
            let (_, factors, warnings) =
                TuningReport::tune(f, &cal, engine.defaults.s_max).map_err(speculative_error)?;
            for w in warnings {
                let _ = writeln!(stderr, "warning: {w}");
            }
            Ok(factors)
        }
        path => {
            let path = Path::new(path);
            let text = read_file(path)?;
            let parsed = match serde_json::from_str::<TuningReport>(&text) {
                Ok(report) => SpeculativeFactors::from_report(f, &report),
                Err(_) => {
                    let list: Vec<usize> = serde_json::from_str(&text).map_err(|e| {
                        CliError::User(format!(
                            "{}: expected a tuning report or a list of factors: {e}",
                            path.display()
                        ))
                    })?;
                    SpeculativeFactors::new(f, list)
                }
            };
            parsed.map_err(speculative_error)
        }
    }
}

fn cmd_generate(
    engine: &Engine,
    a: &GenerateArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let f = engine.formula(&a.formula, a.mode).map_err(|e| formula_error(e, &a.formula))?;
    let text = match (&a.prompt, &a.prompt_file) {
        (Some(p), _) => p.clone(),
        (None, Some(path)) => read_file(path)?.trim_end_matches(['\n', '\r']).to_string(),
        (None, None) => String::new(),
    };
    let prompt = encode(engine, &text)?;
    let seed = a.seed.unwrap_or(engine.defaults.seed);
    let cfg = GenerationConfig::new(a.max_tokens.unwrap_or(engine.defaults.max_tokens))
        .with_seed(seed)
        .with_policy(engine.defaults.policy.clone());
    let result = if a.speculative {
        let spec = a.factors.as_deref().unwrap_or("auto");
        let factors = factors_for(engine, &f, spec, &prompt, seed, stderr)?;
        let run = speculative_generate(&f, &prompt, &factors, &cfg).map_err(speculative_error)?;
        let _ = writeln!(
            stderr,
            "speculative factors {:?}, {} rejection(s), {:.3} calls/token",
            factors.as_slice(),
            run.rejections,
            run.result.calls_per_token()
        );
        run.result
    } else {
        generate(&f, &prompt, &cfg).map_err(engine_error)?
    };
    let decoded = engine
        .tokenizer
        .decode(&result.tokens)
        .map_err(|e| CliError::User(e.to_string()))?;
    if a.json {
        out(stdout, &to_json(&GenerateOutput { text: decoded, result: &result }))
    } else {
        out(stdout, &format!("{decoded}\n"))
    }
}

fn cmd_tune(
    engine: &Engine,
    a: &TuneArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let f = engine.formula(&a.formula, a.mode).map_err(|e| formula_error(e, &a.formula))?;
    let prompts = read_file(&a.prompts)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| encode(engine, l))
        .collect::<Result<Vec<_>, _>>()?;
    let cal = CalibrationConfig {
        prompts,
        samples: a.samples,
        max_tokens: a.max_tokens.unwrap_or(engine.defaults.max_tokens),
        seed: a.seed.unwrap_or(engine.defaults.seed),
        policy: engine.defaults.policy.clone(),
    };
    let (report, _, warnings) =
        TuningReport::tune(&f, &cal, a.s_max.unwrap_or(engine.defaults.s_max)).map_err(speculative_error)?;
    for w in &warnings {
        let _ = writeln!(stderr, "warning: {w}");
    }
    let json = to_json(&report);
    match &a.out {
        Some(path) => {
            write_file(path, &json)?;
            let _ = writeln!(stderr, "wrote {}", path.display());
            Ok(())
        }
        None => out(stdout, &json),
    }
}

fn cmd_sweep(
    engine: &Engine,
    a: &SweepArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let spec: SweepSpec = serde_json::from_str(&read_file(&a.spec)?)
        .map_err(|e| CliError::User(format!("{}: {e}", a.spec.display())))?;
    let report = run_sweep(&spec, &engine.registry, &engine.tokenizer).map_err(harness_error)?;
    if let Some(path) = &a.csv {
        write_file(path, &report.to_csv().map_err(harness_error)?)?;
    }
    let jsonl = report.to_jsonl();
    match &a.out {
        Some(path) => {
            write_file(path, &jsonl)?;
            let _ = writeln!(stderr, "wrote {} rows to {}", report.rows.len(), path.display());
            Ok(())
        }
        None => out(stdout, &jsonl),
    }
}

fn cmd_test(a: &TestArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let opts = SuiteOptions {
        samples: a.samples,
        joint_samples: a.joint_samples,
        seed: a.seed,
    };
    let report = run_suite(a.suite, &opts).map_err(harness_error)?;
    for c in &report.checks {
        let _ = writeln!(
            stderr,
            "{} {} ({:.3e} vs {:.3e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    out(stdout, &to_json(&report))?;
    if report.pass {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.pass).count();
        Err(CliError::Failed(format!("{failed} check(s) failed")))
    }
}
