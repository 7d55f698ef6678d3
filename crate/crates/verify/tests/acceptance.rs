//! Acceptance suite: one PASS/FAIL line per criterion on stdout.
//!
//! Criteria run one at a time so that the runtime limits measure a single
//! suite rather than a share of the CPU.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use meanteach::curvature::assemble_gnh;
use meanteach::divergence::{Divergence, DivergenceKind};
use meanteach::harness::*;
use meanteach::linalg::{distance, norm, symmetric_eigenvalues, Matrix};
use meanteach::loss::{ll_grad, nlul_grad, Loss, TeacherLogits, DEFAULT_CLAMP_EPS};
use meanteach::model::{
    grad_loss, loss_and_grad, DatasetRole, ModelSpec, Pair, Token, TokenDataset,
};
use meanteach::optimizer::MtConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the criterion's line and fails the test when it did not pass.
fn verdict(
    id: u32,
    name: &str,
    pass: bool,
    elapsed: Duration,
    limit: Option<Duration>,
    detail: &str,
) {
    let in_time = limit.is_none_or(|l| elapsed < l);
    let ok = pass && in_time;
    let limit = limit.map_or(String::new(), |l| format!(" (limit {}s)", l.as_secs()));
    let line = format!(
        "{} criterion {id} {name}: {detail}; runtime {:.1}s{limit}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
    assert!(ok, "{line}");
}

fn softmax(h: &[f64]) -> Vec<f64> {
    let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = h.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn random_theta(spec: &ModelSpec, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
    (0..spec.param_count())
        .map(|_| rng.random_range(-scale..scale))
        .collect()
}

fn random_sequences(rng: &mut ChaCha8Rng, vocab: usize, n: usize, len: usize) -> Vec<Vec<Token>> {
    (0..n)
        .map(|_| {
            (0..len)
                .map(|_| rng.random_range(0..vocab as Token))
                .collect()
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    distance(a, b) / norm(b).max(1.0)
}

#[test]
fn criterion_1_gradient_identities() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut nlul_err, mut ll_nll_exact, mut it_err, mut npo_err) = (0.0f64, true, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let v = rng.random_range(2..10usize);
        let h: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = rng.random_range(0..v) as Token;
        let p = softmax(&h);
        let py = p[y as usize];

        let want: Vec<f64> = ll_grad(&h, y).iter().map(|g| g * py / (1.0 - py)).collect();
        nlul_err = nlul_err.max(distance(&nlul_grad(&h, y, DEFAULT_CLAMP_EPS), &want));

        ll_nll_exact &= Loss::Ll.token_value(&h, y, &[]).unwrap()
            == -Loss::Nll.token_value(&h, y, &[]).unwrap();

        let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        let it = Loss::It {
            teacher: TeacherLogits::Uniform,
        };
        it_err =
            it_err.max((it.token_value(&h, y, &[]).unwrap() - ((v as f64).ln() - entropy)).abs());

        let spec = ModelSpec::bigram(v);
        let theta = random_theta(&spec, &mut rng, 2.0);
        let base = random_theta(&spec, &mut rng, 2.0);
        let beta = rng.random_range(0.05..1.0);
        let seq = random_sequences(&mut rng, v, 1, 6).remove(0);
        let batch =
            TokenDataset::from_sequences(vec![seq.clone()], spec.context_len, DatasetRole::Forget);
        let log_ratio = spec.sequence_logprob(&theta, &seq).unwrap()
            - spec.sequence_logprob(&base, &seq).unwrap();
        let w = 1.0 / (1.0 + (-beta * log_ratio).exp());
        let grad_logpi: Vec<f64> = grad_loss(&spec, &theta, &batch, &Loss::Ll)
            .unwrap()
            .iter()
            .map(|g| g * batch.len() as f64)
            .collect();
        let want: Vec<f64> = grad_logpi.iter().map(|g| 2.0 * w * g).collect();
        let npo = Loss::Npo {
            beta,
            base: Arc::from(base),
        };
        let (_, got) = loss_and_grad(&spec, &theta, &batch, &npo).unwrap();
        npo_err = npo_err.max(distance(&got, &want));
    }
    let pass = nlul_err <= 1e-10 && ll_nll_exact && it_err <= 1e-10 && npo_err <= 1e-6;
    verdict(
        1,
        "gradient identities",
        pass,
        start.elapsed(),
        Some(Duration::from_secs(10)),
        &format!("nlul {nlul_err:.1e}, ll=-nll exact {ll_nll_exact}, it-uniform {it_err:.1e}, npo {npo_err:.1e}"),
    );
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-5;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[test]
fn criterion_2_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let models = [
        ("bigram", ModelSpec::bigram(4), 1.5),
        ("mlp", ModelSpec::mlp(5, 2, 4), 1.0),
    ];
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for (mname, spec, scale) in &models {
        let v = spec.vocab_size;
        let teacher_spec = spec.clone();
        for draw in 0..20 {
            let theta = random_theta(spec, &mut rng, *scale);
            let other = random_theta(spec, &mut rng, *scale);
            let seqs = random_sequences(&mut rng, v, 2, 6);
            let batch = TokenDataset::from_sequences(seqs, spec.context_len, DatasetRole::Forget);
            let losses = [
                ("nll", Loss::Nll),
                ("ll", Loss::Ll),
                ("nlul", Loss::nlul()),
                (
                    "npo",
                    Loss::Npo {
                        beta: 0.3,
                        base: Arc::from(other.clone()),
                    },
                ),
                (
                    "it-uniform",
                    Loss::It {
                        teacher: TeacherLogits::Uniform,
                    },
                ),
                (
                    "it-fixed",
                    Loss::It {
                        teacher: TeacherLogits::Fixed {
                            spec: teacher_spec.clone(),
                            theta: Arc::from(other.clone()),
                        },
                    },
                ),
            ];
            for (lname, loss) in &losses {
                let (_, g) = loss_and_grad(spec, &theta, &batch, loss).unwrap();
                let fd =
                    central_difference(|t| loss_and_grad(spec, t, &batch, loss).unwrap().0, &theta);
                let e = worst.entry(format!("{mname}/{lname}")).or_default();
                *e = e.max(rel_err(&g, &fd));
            }
            let mut kinds = vec![("kl", DivergenceKind::Kl), ("qkl", DivergenceKind::Qkl)];
            if *mname == "bigram" {
                kinds.push(("bregman", DivergenceKind::Bregman));
            }
            for (dname, kind) in kinds {
                let div = Divergence::new(kind, 0.1 * draw as f64 / 20.0);
                let (_, g) = div.value_and_grad(spec, &theta, &other, &batch).unwrap();
                let fd = central_difference(
                    |t| div.value_and_grad(spec, t, &other, &batch).unwrap().0,
                    &theta,
                );
                let e = worst.entry(format!("{mname}/{dname}")).or_default();
                *e = e.max(rel_err(&g, &fd));
            }
        }
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let failing: Vec<&String> = worst
        .iter()
        .filter(|(_, e)| **e > 1e-5)
        .map(|(k, _)| k)
        .collect();
    verdict(
        2,
        "finite differences",
        failing.is_empty(),
        start.elapsed(),
        Some(Duration::from_secs(60)),
        &format!(
            "{} pairs, worst relative error {max:.1e}, over tolerance {failing:?}",
            worst.len()
        ),
    );
}

fn sample(p: &[f64], rng: &mut ChaCha8Rng) -> Token {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i as Token;
        }
    }
    (p.len() - 1) as Token
}

#[test]
fn criterion_3_gnh() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut asym, mut min_eig) = (0.0f64, f64::INFINITY);
    for spec in [ModelSpec::bigram(5), ModelSpec::mlp(5, 2, 4)] {
        for _ in 0..5 {
            let theta = random_theta(&spec, &mut rng, 1.0);
            let seqs = random_sequences(&mut rng, spec.vocab_size, 3, 6);
            let batch = TokenDataset::from_sequences(seqs, spec.context_len, DatasetRole::Pretrain);
            let h = assemble_gnh(&spec, &theta, &batch).unwrap().h;
            asym = asym.max(h.max_abs_diff(&h.transpose()));
            min_eig = min_eig.min(symmetric_eigenvalues(&h).unwrap()[0]);
        }
    }

    // Empirical Fisher with labels drawn from the model equals the GNH.
    let spec = ModelSpec::bigram(3);
    let theta = random_theta(&spec, &mut rng, 1.0);
    let pairs: Vec<Pair> = [(0, 1), (2, 0), (1, 2), (0, 2)]
        .iter()
        .map(|&(c, n)| Pair {
            context: vec![c],
            next: n,
        })
        .collect();
    let batch = TokenDataset::from_pairs(pairs.clone(), DatasetRole::Pretrain);
    let gnh = assemble_gnh(&spec, &theta, &batch).unwrap().h;
    let n = 100_000;
    let dim = spec.param_count();
    let mut fisher = Matrix::zeros(dim, dim);
    for s in 0..n {
        let ctx = &pairs[s % pairs.len()].context;
        let y = sample(&softmax(&spec.logits(&theta, ctx).unwrap()), &mut rng);
        let single = TokenDataset::from_pairs(
            vec![Pair {
                context: ctx.clone(),
                next: y,
            }],
            DatasetRole::Pretrain,
        );
        let g = grad_loss(&spec, &theta, &single, &Loss::Nll).unwrap();
        for i in 0..dim {
            for j in 0..dim {
                fisher[(i, j)] += g[i] * g[j];
            }
        }
    }
    let fisher_err = gnh.max_abs_diff(&fisher.scaled(1.0 / n as f64));
    let pass = asym <= 1e-12 && min_eig >= -1e-10 && fisher_err <= 1e-2;
    verdict(
        3,
        "GNH",
        pass,
        start.elapsed(),
        Some(Duration::from_secs(120)),
        &format!("asymmetry {asym:.1e}, min eigenvalue {min_eig:.2e}, Fisher MC max diff {fisher_err:.2e}"),
    );
}

#[test]
fn criterion_4_local_quadratic() {
    let _g = serial();
    let start = Instant::now();
    let cfg: QuadraticConfig = serde_json::from_value(json!({
        "corpus": {"vocab_size": 6, "n_sequences": 8, "seq_len": 8, "forget_fraction": 0.5,
                   "generator": {"kind": "random"}, "seed": 4},
        "context_len": 2, "hidden_dim": 6, "seed": 4
    }))
    .unwrap();
    let report = verify_divergence_quadratic(&cfg).unwrap();
    let detail: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{}/{} ratio {:.1}", r.model, r.divergence, r.ratio))
        .collect();
    verdict(
        4,
        "local quadratic",
        report.pass,
        start.elapsed(),
        Some(Duration::from_secs(60)),
        &detail.join(", "),
    );
}

#[test]
fn criterion_5_lemma() {
    let _g = serial();
    let start = Instant::now();
    let report = verify_lemma(&LemmaConfig::default()).unwrap();
    let failed: Vec<String> = report
        .rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| {
            format!(
                "mu={} lambda={} {} max ratio {:.3}",
                r.mu, r.lambda, r.error_mode, r.max_ratio
            )
        })
        .collect();
    verdict(
        5,
        "lemma bound",
        report.pass,
        start.elapsed(),
        Some(Duration::from_secs(60)),
        &format!(
            "{} rows, {} violated: {}",
            report.rows.len(),
            failed.len(),
            failed.join("; ")
        ),
    );
}

#[test]
fn criterion_6_theorem1() {
    let _g = serial();
    let start = Instant::now();
    let cfg: Theorem1Config = serde_json::from_value(json!({
        "corpus": {"vocab_size": 6, "n_sequences": 20, "seq_len": 8, "forget_fraction": 0.25,
                   "generator": {"kind": "random"}, "seed": 1},
        "mt": {"eta": 0.05, "kappa": 2.0, "alpha": 0.1, "mu": 0.5, "steps": 1,
               "loss": "ll", "divergence": "kl", "lambda": 0.1},
        "alphas": [0.1, 0.05, 0.025, 0.0125],
        "horizon": 5.0
    }))
    .unwrap();
    let report = verify_theorem1(&cfg).unwrap();
    let fits: Vec<String> = report
        .fits
        .iter()
        .map(|f| {
            format!(
                "lag={} slope {:.3} monotone {}",
                f.grad_lag, f.slope, f.monotone
            )
        })
        .collect();
    verdict(
        6,
        "theorem 1 scaling",
        report.pass,
        start.elapsed(),
        Some(Duration::from_secs(600)),
        &fits.join(", "),
    );
}

fn mlp_target(
    vocab: usize,
    n_sequences: usize,
) -> (ModelSpec, Corpus, Vec<f64>, MemorizationReport) {
    let spec = ModelSpec::mlp(vocab, 3, 32);
    let corpus_spec: CorpusSpec = serde_json::from_value(json!({
        "vocab_size": vocab, "n_sequences": n_sequences, "seq_len": 16, "forget_fraction": 1.0 / 3.0,
        "generator": {"kind": "keyed"}, "seed": 1
    }))
    .unwrap();
    let corpus = Corpus::generate(&corpus_spec, spec.context_len).unwrap();
    let target: TargetConfig = serde_json::from_value(json!({
        "epochs": 1500, "lr": 0.5, "momentum": 0.9, "prompt_len": 4, "completion_len": 10, "seed": 0
    }))
    .unwrap();
    let (theta, report) = build_target(&spec, &corpus, &target).unwrap();
    (spec, corpus, theta.into_coords(), report)
}

#[test]
fn criterion_7_dynamics() {
    let _g = serial();
    let start = Instant::now();
    let (spec, corpus, theta, _) = mlp_target(48, 48);
    let cfg: DynamicsConfig = serde_json::from_value(json!({
        "mt": {"eta": 0.01, "kappa": 1.0, "alpha": 1.0, "steps": 500, "loss": "ll", "divergence": "kl", "lambda": 0.0}
    }))
    .unwrap();
    let report = gradient_dynamics_study(&spec, &theta, &corpus, &cfg).unwrap();
    let v = report.verdict(&DynamicsThresholds::default()).unwrap();
    verdict(
        7,
        "gradient dynamics",
        v.pass,
        start.elapsed(),
        Some(Duration::from_secs(300)),
        &format!(
            "mean p_y {:.3}, grad ratio {:.1}, NLUL forget-NLL rise {:.3}, LL rise {:.4}",
            report.mean_target_probability, v.grad_ratio, v.nlul_rise, v.ll_rise
        ),
    );
}

#[test]
fn criterion_8_unlearning() {
    let _g = serial();
    let start = Instant::now();
    let (spec, corpus, theta, target_report) = mlp_target(60, 60);
    let eval = EvalConfig {
        prompt_len: 4,
        completion_len: 10,
    };
    let stop = StopRule {
        metric: StopMetric::ExactMatch,
        threshold: 0.2,
        every: 1,
    };

    let noop: MethodSpec =
        serde_json::from_value(json!({"name": "noop", "optimizer": "noop"})).unwrap();
    let noop_row = unlearn_experiment(&spec, &theta, &corpus, &[noop], Some(stop), eval)
        .unwrap()
        .rows
        .remove(0);
    let noop_unchanged = noop_row.after.as_ref() == Some(&noop_row.before)
        && noop_row.before == target_report
        && noop_row.final_theta.as_deref().is_some_and(|t| {
            t.iter()
                .zip(&theta)
                .all(|(a, b)| a.to_bits() == b.to_bits())
        });

    let mt: MtConfig = serde_json::from_value(json!({
        "eta": 0.01, "kappa": 1.0, "alpha": 0.2, "mu": 0.9, "steps": 4000, "clip": 1.0,
        "batch_forget": 8, "batch_pretrain": 40, "loss": "nlul", "divergence": "kl", "lambda": 0.3
    }))
    .unwrap();
    let method = MethodSpec {
        name: "mt-nlul-kl".into(),
        optimizer: OptimizerKind::MtBatched,
        config: Some(mt),
        adam: Default::default(),
    };
    let seq = sequential_unlearn(&spec, &theta, &corpus, &method, 4, Some(stop), eval).unwrap();
    let single = &seq.single_round;
    let before_em = single.before.exact_match_rate;
    let after_em = single
        .after
        .as_ref()
        .map_or(f64::NAN, |a| a.exact_match_rate);
    let drift = single.drift.unwrap_or(f64::NAN);

    let checks = [
        ("target EM >= 0.9", before_em >= 0.9),
        ("EM <= 0.2", after_em <= 0.2),
        ("drift <= 0.1", drift <= 0.1),
        ("no-op bitwise", noop_unchanged),
        ("sequential drift <= 2x", seq.drift_ratio <= 2.0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        8,
        "unlearning end to end",
        failed.is_empty(),
        start.elapsed(),
        Some(Duration::from_secs(600)),
        &format!(
            "EM {before_em:.2} -> {after_em:.2} in {} steps, drift {drift:.4}, no-op unchanged {noop_unchanged}, \
             sequential drift {:.4} = {:.2}x single; failed checks {failed:?}",
            single.steps_run, seq.final_drift, seq.drift_ratio
        ),
    );
}

fn meanteach(bin: &Path, out: &Path, args: &[&str]) -> i32 {
    Command::new(bin)
        .arg("--out")
        .arg(out)
        .arg("-q")
        .args(args)
        .env_remove("MEANTEACH_SEED")
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exited")
}

/// Every file under `dir` by relative path; the manifest's wall-clock
/// duration is dropped.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            let mut bytes = std::fs::read(&path).unwrap();
            if rel == "manifest.json" {
                let mut m: Value = serde_json::from_slice(&bytes).unwrap();
                m.as_object_mut().unwrap().remove("duration_secs");
                bytes = serde_json::to_vec(&m).unwrap();
            }
            files.insert(rel, bytes);
        }
    }
    files
}

#[test]
fn criterion_9_reproducibility() {
    let _g = serial();
    let bin = meanteach_verify::meanteach_binary();
    let start = Instant::now();
    let dir = tempfile::TempDir::new().unwrap();
    let root = dir.path();
    let write = |name: &str, v: Value| {
        let p = root.join(name);
        std::fs::write(&p, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
        p.to_string_lossy().into_owned()
    };
    let corpus = json!({"vocab_size": 8, "n_sequences": 8, "seq_len": 6, "forget_fraction": 0.5,
                        "generator": {"kind": "keyed"}, "seed": 2});
    let train = write(
        "train.json",
        json!({
            "model": {"kind": "bigram", "vocab_size": 8, "context_len": 1, "hidden_dim": 0},
            "corpus": corpus,
            "target": {"epochs": 300, "lr": 2.0, "momentum": 0.9, "threshold": 0.0,
                       "prompt_len": 1, "completion_len": 3, "seed": 0}
        }),
    );
    let target = root.join("target").join("target.mtpv");
    let mt = json!({"eta": 0.05, "kappa": 1.0, "alpha": 0.5, "mu": 0.5, "steps": 30, "batch_forget": 2,
                    "batch_pretrain": 4, "loss": "nlul", "divergence": "kl", "lambda": 0.1, "seed": 3});
    let unlearn = write(
        "unlearn.json",
        json!({
            "target": target, "corpus": corpus, "eval": {"prompt_len": 1, "completion_len": 3},
            "methods": [{"name": "noop", "optimizer": "noop"},
                        {"name": "mt", "optimizer": "mt-batched", "config": mt},
                        {"name": "sgd", "optimizer": "momentum-sgd", "config": mt}],
            "sequential": {"method": "mt", "rounds": 2}
        }),
    );
    let theorem1 = write(
        "theorem1.json",
        json!({
            "corpus": {"vocab_size": 4, "n_sequences": 6, "seq_len": 5, "forget_fraction": 0.5,
                       "generator": {"kind": "random"}, "seed": 1},
            "mt": {"eta": 0.05, "kappa": 2.0, "alpha": 0.1, "mu": 0.5, "steps": 1, "loss": "ll", "divergence": "kl", "lambda": 0.1},
            "alphas": [0.1, 0.05], "horizon": 0.5
        }),
    );
    let dynamics = write(
        "dynamics.json",
        json!({
            "target": target, "corpus": corpus,
            "study": {"mt": {"eta": 0.01, "kappa": 1.0, "alpha": 1.0, "steps": 20, "loss": "ll", "divergence": "kl"},
                      "saturation": 0.0}
        }),
    );
    let quadratic = write(
        "quadratic.json",
        json!({"corpus": {"vocab_size": 5, "n_sequences": 4, "seq_len": 6, "forget_fraction": 0.5,
                          "generator": {"kind": "random"}, "seed": 1},
               "context_len": 2, "hidden_dim": 3}),
    );
    let lemma = write("lemma.json", json!({"dim": 4, "steps": 50}));

    let runs: [(&str, Vec<&str>); 6] = [
        ("target", vec!["train-target", "--config", &train]),
        ("unlearn", vec!["unlearn", "--config", &unlearn]),
        (
            "theorem1",
            vec!["verify", "theorem1", "--config", &theorem1],
        ),
        (
            "dynamics",
            vec!["verify", "dynamics", "--config", &dynamics],
        ),
        (
            "quadratic",
            vec!["verify", "divergence-quadratic", "--config", &quadratic],
        ),
        ("lemma", vec!["verify", "lemma", "--config", &lemma]),
    ];
    let mut mismatched = Vec::new();
    let mut errors = Vec::new();
    let mut n_files = 0;
    for (name, args) in &runs {
        let first = root.join(name);
        let code = meanteach(&bin, &first, args);
        // Suites may fail (exit 1) and still write their artifacts.
        if code > 1 {
            errors.push(format!("{name} exited {code}"));
            continue;
        }
        let mut rerun_args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        *rerun_args.last_mut().unwrap() =
            first.join("manifest.json").to_string_lossy().into_owned();
        let second = root.join(format!("{name}-rerun"));
        let rerun_args: Vec<&str> = rerun_args.iter().map(String::as_str).collect();
        let code2 = meanteach(&bin, &second, &rerun_args);
        if code2 != code {
            errors.push(format!("{name} rerun exited {code2}, first run {code}"));
            continue;
        }
        let (a, b) = (artifacts(&first), artifacts(&second));
        n_files += a.len();
        if a.keys().ne(b.keys()) {
            mismatched.push(format!("{name}: file sets differ"));
        }
        for (file, bytes) in &a {
            if b.get(file) != Some(bytes) {
                mismatched.push(format!("{name}/{file}"));
            }
        }
    }
    verdict(
        9,
        "reproducibility",
        mismatched.is_empty() && errors.is_empty(),
        start.elapsed(),
        None,
        &format!("{} commands, {n_files} artifacts compared; differing {mismatched:?}; errors {errors:?}", runs.len()),
    );
}
