//! CSV renderings of the harness reports. Floats use `{:e}`, which prints the
//! shortest representation that round-trips.

use meanteach::harness::{
    DynamicsReport, LemmaReport, QuadraticReport, SequentialReport, Theorem1Report,
};

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn theorem1_rows(r: &Theorem1Report) -> String {
    let mut out = String::from("grad_lag,alpha,steps,gamma,lambda_bar,deviation\n");
    for row in &r.rows {
        out.push_str(&format!(
            "{},{:e},{},{:e},{:e},{:e}\n",
            row.grad_lag, row.alpha, row.steps, row.gamma, row.lambda_bar, row.deviation
        ));
    }
    out
}

pub fn theorem1_fits(r: &Theorem1Report) -> String {
    let mut out = String::from("grad_lag,slope,monotone,pass\n");
    for f in &r.fits {
        out.push_str(&format!(
            "{},{:e},{},{}\n",
            f.grad_lag, f.slope, f.monotone, f.pass
        ));
    }
    out
}

pub fn lemma(r: &LemmaReport) -> String {
    let mut out = String::from(
        "mu,lambda,error_mode,eta,steps,max_ratio,violations,first_violation,skipped,pass\n",
    );
    for row in &r.rows {
        out.push_str(&format!(
            "{:e},{:e},{},{:e},{},{:e},{},{},{},{}\n",
            row.mu,
            row.lambda,
            row.error_mode,
            row.eta,
            row.steps,
            row.max_ratio,
            row.violations,
            opt(row.first_violation),
            row.skipped.as_deref().unwrap_or("").replace(',', ";"),
            row.pass
        ));
    }
    out
}

pub fn quadratic(r: &QuadraticReport) -> String {
    let mut out = String::from("model,divergence,scaled_large,scaled_small,ratio,pass\n");
    for row in &r.rows {
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{}\n",
            row.model, row.divergence, row.scaled_large, row.scaled_small, row.ratio, row.pass
        ));
    }
    out
}

pub fn dynamics_summary(r: &DynamicsReport) -> String {
    let mut out = String::from("loss,initial_grad_norm,forget_nll_start,forget_nll_end\n");
    for s in &r.summaries {
        out.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            s.loss, s.initial_grad_norm, s.forget_nll_start, s.forget_nll_end
        ));
    }
    out
}

pub fn sequential(r: &SequentialReport) -> String {
    let mut out =
        String::from("round,steps,exact_match_rate,lcs_ratio,nll_forget,nll_pretrain,drift\n");
    for row in &r.rounds {
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}\n",
            row.round,
            row.steps_run,
            row.report.exact_match_rate,
            row.report.lcs_ratio,
            row.report.nll_forget,
            row.report.nll_pretrain,
            row.drift
        ));
    }
    out
}
