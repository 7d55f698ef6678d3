use std::collections::{BTreeMap, HashSet};
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use meanteach::harness::{
    build_target, gradient_dynamics_study, sequential_unlearn, unlearn_experiment,
    verify_divergence_quadratic, verify_lemma, verify_theorem1, Corpus, CorpusSpec, DynamicsConfig,
    DynamicsThresholds, EvalConfig, LemmaConfig, MethodSpec, OptimizerKind, QuadraticConfig,
    StopRule, TargetConfig, Theorem1Config,
};
use meanteach::io::encode_params;
use meanteach::loss::{LossKind, TeacherSource};
use meanteach::model::ModelSpec;

use crate::manifest::{sha256_hex, InputHasher, OutputSet, RunManifest, MANIFEST_FILE};
use crate::tables;

pub const EXIT_SUITE_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_TRAINING: u8 = 3;
pub const EXIT_MISSING: u8 = 4;
pub const EXIT_PRECONDITION: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    fn config(msg: impl std::fmt::Display) -> Self {
        Self::new(EXIT_CONFIG, anyhow!("invalid config: {msg}"))
    }
}

impl From<meanteach::Error> for Failure {
    fn from(e: meanteach::Error) -> Self {
        use meanteach::Error as E;
        let code = match &e {
            E::Config { .. }
            | E::Json(_)
            | E::Dimension(_)
            | E::InvalidInput(_)
            | E::TokenOutOfVocab { .. }
            | E::TooLarge { .. } => EXIT_CONFIG,
            E::NotMemorized { .. }
            | E::NonFinite { .. }
            | E::NotPositiveDefinite { .. }
            | E::NotSymmetric { .. } => EXIT_TRAINING,
            E::Precondition(_) => EXIT_PRECONDITION,
            E::Io(_) => EXIT_SUITE_FAILED,
        };
        Self::new(code, e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::new(EXIT_SUITE_FAILED, e)
    }
}

pub type CmdResult = Result<bool, Failure>;

pub struct Context {
    pub out: PathBuf,
    pub seed: Option<u64>,
}

/// Reads a config file, or the `config_echo` of a manifest written by the
/// same command.
fn load_config<T: DeserializeOwned>(path: &Path, command: &str) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    if let (Some(echo), Some(cmd)) = (value.get("config_echo"), value.get("command")) {
        if cmd != command {
            return Err(Failure::config(format!(
                "manifest {} was written by `{cmd}`, not `{command}`",
                path.display()
            )));
        }
        info!("rerunning from manifest {}", path.display());
        value = echo.clone();
    }
    serde_json::from_value(value).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

/// Absolute path of `p` relative to `out`, with `.` and `..` removed
/// lexically so that `out` need not exist yet.
fn resolve_path(out: &Path, p: &Path) -> Result<PathBuf, Failure> {
    let joined = std::path::absolute(out.join(p))
        .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
    let mut clean = PathBuf::new();
    for c in joined.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                clean.pop();
            }
            other => clean.push(other),
        }
    }
    Ok(clean)
}

fn read_input(path: &Path, what: &str) -> Result<Vec<u8>, Failure> {
    if !path.exists() {
        return Err(Failure::new(
            EXIT_MISSING,
            anyhow!("{what} {} does not exist", path.display()),
        ));
    }
    std::fs::read(path)
        .map_err(|e| Failure::new(EXIT_MISSING, anyhow!("cannot read {}: {e}", path.display())))
}

struct Run<'a> {
    ctx: &'a Context,
    command: String,
    started: Instant,
    hasher: InputHasher,
    outputs: OutputSet,
}

impl<'a> Run<'a> {
    fn start<C: Serialize>(
        ctx: &'a Context,
        command: &str,
        config: &C,
    ) -> Result<(Self, Value), Failure> {
        let echo = serde_json::to_value(config).map_err(|e| Failure::new(EXIT_SUITE_FAILED, e))?;
        let mut hasher = InputHasher::default();
        hasher.add(&serde_json::to_vec(&echo).expect("json value serializes"));
        std::fs::create_dir_all(&ctx.out).map_err(|e| {
            Failure::new(
                EXIT_SUITE_FAILED,
                anyhow!("cannot create {}: {e}", ctx.out.display()),
            )
        })?;
        Ok((
            Self {
                ctx,
                command: command.into(),
                started: Instant::now(),
                hasher,
                outputs: OutputSet::new(),
            },
            echo,
        ))
    }

    fn finish(self, echo: Value, seed: Option<u64>) -> Result<RunManifest, Failure> {
        let manifest = RunManifest {
            command: self.command,
            config_echo: echo,
            input_hash: self.hasher.finish(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            duration_secs: self.started.elapsed().as_secs_f64(),
            outputs: BTreeMap::new(),
        };
        let manifest = self.outputs.write(&self.ctx.out, manifest)?;
        info!(
            "wrote {} files and {MANIFEST_FILE} to {}",
            manifest.outputs.len(),
            self.ctx.out.display()
        );
        Ok(manifest)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTargetConfig {
    pub model: ModelSpec,
    pub corpus: CorpusSpec,
    pub target: TargetConfig,
}

fn check_vocab(model: &ModelSpec, corpus: &CorpusSpec) -> Result<(), Failure> {
    if model.vocab_size != corpus.vocab_size {
        return Err(Failure::config(format!(
            "corpus.vocab_size {} differs from the model's {}",
            corpus.vocab_size, model.vocab_size
        )));
    }
    Ok(())
}

pub fn train_target(ctx: &Context, config: &Path) -> CmdResult {
    let mut cfg: TrainTargetConfig = load_config(config, "train-target")?;
    if let Some(s) = ctx.seed {
        cfg.target.seed = s;
    }
    cfg.model.validate()?;
    check_vocab(&cfg.model, &cfg.corpus)?;
    let (mut run, echo) = Run::start(ctx, "train-target", &cfg)?;
    let corpus = Corpus::generate(&cfg.corpus, cfg.model.context_len)?;
    let (theta, report) = build_target(&cfg.model, &corpus, &cfg.target)?;
    run.outputs
        .add("target.mtpv", encode_params(&cfg.model, &theta)?);
    run.outputs.add_json("memorization.json", &report)?;
    println!(
        "target memorized: exact_match_rate {} lcs_ratio {} nll_forget {:.4} nll_pretrain {:.4}",
        report.exact_match_rate, report.lcs_ratio, report.nll_forget, report.nll_pretrain
    );
    run.finish(echo, Some(cfg.target.seed))?;
    Ok(true)
}

// ---------------------------------------------------------------------------

fn default_rounds() -> usize {
    4
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequentialConfig {
    /// Name of the method from `methods` to run in rounds.
    pub method: String,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    /// Parameter dump written by `train-target`; relative paths resolve
    /// against `--out`.
    pub target: PathBuf,
    pub corpus: CorpusSpec,
    pub eval: EvalConfig,
    pub methods: Vec<MethodSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequential: Option<SequentialConfig>,
}

fn check_methods(
    methods: &mut [MethodSpec],
    spec: &ModelSpec,
    ctx: &Context,
) -> Result<(), Failure> {
    let mut names = HashSet::new();
    for m in methods {
        let safe = !m.name.is_empty()
            && m.name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
        if !safe {
            return Err(Failure::config(format!(
                "method name `{}` must be nonempty and use only [A-Za-z0-9._-]",
                m.name
            )));
        }
        if !names.insert(m.name.clone()) {
            return Err(Failure::config(format!(
                "method name `{}` is repeated",
                m.name
            )));
        }
        if m.optimizer == OptimizerKind::Noop {
            continue;
        }
        let Some(cfg) = m.config.as_mut() else {
            return Err(Failure::config(format!(
                "method `{}` needs a `config`",
                m.name
            )));
        };
        if let Some(s) = ctx.seed {
            cfg.seed = s;
        }
        if let LossKind::It {
            teacher: TeacherSource::Path(p),
        } = &cfg.loss
        {
            let p = resolve_path(&ctx.out, p)?;
            read_input(&p, "teacher")?;
            cfg.loss = LossKind::It {
                teacher: TeacherSource::Path(p),
            };
        }
        cfg.validate(spec)?;
    }
    Ok(())
}

pub fn unlearn(ctx: &Context, config: &Path) -> CmdResult {
    let mut cfg: UnlearnConfig = load_config(config, "unlearn")?;
    cfg.target = resolve_path(&ctx.out, &cfg.target)?;
    let target_bytes = read_input(&cfg.target, "target")?;
    let (spec, theta) = meanteach::io::decode_params(&target_bytes)?;
    check_vocab(&spec, &cfg.corpus)?;
    check_methods(&mut cfg.methods, &spec, ctx)?;
    if let Some(seq) = &cfg.sequential {
        if !cfg.methods.iter().any(|m| m.name == seq.method) {
            return Err(Failure::config(format!(
                "sequential.method `{}` is not in methods",
                seq.method
            )));
        }
    }
    let (mut run, echo) = Run::start(ctx, "unlearn", &cfg)?;
    run.hasher.add(&target_bytes);
    for m in &cfg.methods {
        if let Some(LossKind::It {
            teacher: TeacherSource::Path(p),
        }) = m.config.as_ref().map(|c| &c.loss)
        {
            run.hasher.add(&read_input(p, "teacher")?);
        }
    }

    let corpus = Corpus::generate(&cfg.corpus, spec.context_len)?;
    let report = unlearn_experiment(&spec, &theta, &corpus, &cfg.methods, cfg.stop, cfg.eval)?;
    run.outputs.add("report.csv", report.to_csv());
    for row in &report.rows {
        if let Some(traj) = &row.trajectory {
            run.outputs
                .add(format!("trajectories/{}.csv", row.name), traj.to_csv(None)?);
        }
        match (&row.error, &row.after) {
            (Some(e), _) => warn!("method {} failed: {e}", row.name),
            (None, Some(a)) => println!(
                "{}: exact_match {} -> {}, drift {:.4}, steps {}",
                row.name,
                row.before.exact_match_rate,
                a.exact_match_rate,
                row.drift.unwrap_or(f64::NAN),
                row.steps_run
            ),
            _ => {}
        }
    }
    let mut summary = json!({ "methods": report.rows });
    if let Some(seq) = &cfg.sequential {
        let method = cfg
            .methods
            .iter()
            .find(|m| m.name == seq.method)
            .expect("checked above");
        let s = sequential_unlearn(
            &spec, &theta, &corpus, method, seq.rounds, cfg.stop, cfg.eval,
        )?;
        println!(
            "sequential {} x{}: drift {:.4} vs single-round {:.4} (ratio {:.3})",
            seq.method,
            seq.rounds,
            s.final_drift,
            s.single_round.drift.unwrap_or(f64::NAN),
            s.drift_ratio
        );
        run.outputs.add("sequential.csv", tables::sequential(&s));
        summary["sequential"] = serde_json::to_value(&s).map_err(anyhow::Error::from)?;
    }
    run.outputs.add_json("summary.json", &summary)?;
    let seed = ctx.seed.or_else(|| {
        cfg.methods
            .iter()
            .find_map(|m| m.config.as_ref().map(|c| c.seed))
    });
    run.finish(echo, seed)?;
    Ok(true)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsCommandConfig {
    pub target: PathBuf,
    pub corpus: CorpusSpec,
    pub study: DynamicsConfig,
    #[serde(default)]
    pub thresholds: DynamicsThresholds,
}

fn report_pass(name: &str, pass: bool) -> bool {
    println!("{} {name}", if pass { "PASS" } else { "FAIL" });
    pass
}

pub fn verify_theorem1_cmd(ctx: &Context, config: &Path) -> CmdResult {
    let mut cfg: Theorem1Config = load_config(config, "verify theorem1")?;
    if let Some(s) = ctx.seed {
        cfg.init_seed = s;
    }
    cfg.mt.validate(&ModelSpec::bigram(cfg.corpus.vocab_size))?;
    let (mut run, echo) = Run::start(ctx, "verify theorem1", &cfg)?;
    let r = verify_theorem1(&cfg)?;
    for f in &r.fits {
        println!(
            "grad_lag={}: slope {:.3}, monotone {}",
            f.grad_lag, f.slope, f.monotone
        );
    }
    run.outputs.add("theorem1.csv", tables::theorem1_rows(&r));
    run.outputs
        .add("theorem1_fits.csv", tables::theorem1_fits(&r));
    run.outputs.add_json("summary.json", &r)?;
    run.finish(echo, Some(cfg.init_seed))?;
    Ok(report_pass("verify theorem1", r.pass))
}

pub fn verify_lemma_cmd(ctx: &Context, config: Option<&Path>) -> CmdResult {
    let mut cfg: LemmaConfig = match config {
        Some(p) => load_config(p, "verify lemma")?,
        None => LemmaConfig::default(),
    };
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let (mut run, echo) = Run::start(ctx, "verify lemma", &cfg)?;
    let r = verify_lemma(&cfg)?;
    for row in &r.rows {
        if let Some(why) = &row.skipped {
            warn!(
                "skipped mu={} lambda={} {}: {why}",
                row.mu, row.lambda, row.error_mode
            );
        } else if !row.pass {
            println!(
                "violated: mu={} lambda={} {} at {} of {} steps, max ratio {:.4}",
                row.mu,
                row.lambda,
                row.error_mode,
                row.violations,
                row.steps + 1,
                row.max_ratio
            );
        }
    }
    run.outputs.add("lemma.csv", tables::lemma(&r));
    run.outputs.add_json("summary.json", &r)?;
    run.finish(echo, Some(cfg.seed))?;
    Ok(report_pass("verify lemma", r.pass))
}

pub fn verify_dynamics_cmd(ctx: &Context, config: &Path) -> CmdResult {
    let mut cfg: DynamicsCommandConfig = load_config(config, "verify dynamics")?;
    cfg.target = resolve_path(&ctx.out, &cfg.target)?;
    let target_bytes = read_input(&cfg.target, "target")?;
    let (spec, theta) = meanteach::io::decode_params(&target_bytes)?;
    check_vocab(&spec, &cfg.corpus)?;
    cfg.study.mt.validate(&spec)?;
    let (mut run, echo) = Run::start(ctx, "verify dynamics", &cfg)?;
    run.hasher.add(&target_bytes);
    let corpus = Corpus::generate(&cfg.corpus, spec.context_len)?;
    let r = gradient_dynamics_study(&spec, &theta, &corpus, &cfg.study)?;
    let verdict = r.verdict(&cfg.thresholds)?;
    println!(
        "grad ratio nlul/ll {:.3}, forget-NLL rise nlul {:.4}, ll {:.4}",
        verdict.grad_ratio, verdict.nlul_rise, verdict.ll_rise
    );
    run.outputs.add("dynamics.csv", r.to_csv());
    run.outputs
        .add("dynamics_summary.csv", tables::dynamics_summary(&r));
    run.outputs.add_json(
        "summary.json",
        &json!({
            "mean_target_probability": r.mean_target_probability,
            "npo_initial_weight": r.npo_initial_weight,
            "summaries": r.summaries,
            "verdict": verdict,
        }),
    )?;
    run.finish(echo, None)?;
    Ok(report_pass("verify dynamics", verdict.pass))
}

pub fn verify_quadratic_cmd(ctx: &Context, config: &Path) -> CmdResult {
    let mut cfg: QuadraticConfig = load_config(config, "verify divergence-quadratic")?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let (mut run, echo) = Run::start(ctx, "verify divergence-quadratic", &cfg)?;
    let r = verify_divergence_quadratic(&cfg)?;
    run.outputs.add("quadratic.csv", tables::quadratic(&r));
    run.outputs.add_json("summary.json", &r)?;
    run.finish(echo, Some(cfg.seed))?;
    Ok(report_pass("verify divergence-quadratic", r.pass))
}

// ---------------------------------------------------------------------------

fn print_csv(text: &str) {
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|j| {
            rows.iter()
                .filter_map(|r| r.get(j))
                .map(|c| c.len())
                .max()
                .unwrap_or(0)
        })
        .collect();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(j, c)| format!("{c:>w$}", w = widths[j]))
            .collect();
        println!("  {}", cells.join("  "));
    }
}

/// Checks every output of a run against its manifest and prints the tables.
pub fn report(dir: &Path) -> CmdResult {
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_input(&path, "manifest")?;
    let manifest: RunManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    println!("command:    {}", manifest.command);
    println!("version:    {}", manifest.version);
    println!(
        "seed:       {}",
        manifest.seed.map_or("-".into(), |s| s.to_string())
    );
    println!("input hash: {}", manifest.input_hash);
    println!("duration:   {:.3}s", manifest.duration_secs);
    let mut intact = true;
    for (name, hash) in &manifest.outputs {
        let status = match std::fs::read(dir.join(name)) {
            Ok(b) if sha256_hex(&b) == *hash => "ok",
            Ok(_) => "MODIFIED",
            Err(_) => "MISSING",
        };
        intact &= status == "ok";
        println!("{status:>8}  {name}");
    }
    for name in manifest
        .outputs
        .keys()
        .filter(|n| n.ends_with(".csv") && !n.starts_with("trajectories/"))
    {
        if let Ok(text) = std::fs::read_to_string(dir.join(name)) {
            println!("\n{name}");
            print_csv(&text);
        }
    }
    Ok(intact)
}
