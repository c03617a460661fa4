//! Monte Carlo checks of the closed-form projection examples.

use std::io::Write;

use nalgebra::DVector;
use nlsdof::dof::{analytic_df, analytic_project, AnalyticSet};
use nlsdof::oracle::{mc_df_covariance, mc_df_stein, mc_true_risk, McConfig, McEstimate};
use nlsdof::rng::derive_seed;
use nlsdof::sim::format_real;

use crate::config::{Settings, DEFAULT_EXAMPLE_REPS};
use crate::failure::{Failure, EXIT_TOLERANCE};

/// Slack for quantities that are constant up to rounding.
const ROUNDING: f64 = 1e-12;

pub struct Check {
    pub set: String,
    pub n: usize,
    pub sigma2: f64,
    pub quantity: &'static str,
    pub estimate: f64,
    pub stderr: f64,
    pub target: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn pass(&self) -> bool {
        (self.estimate - self.target).abs() <= self.tolerance
    }
}

struct Run {
    cov: McEstimate,
    stein: McEstimate,
    config: McConfig,
    label: String,
}

fn run(kind: AnalyticSet, n: usize, sigma2: f64, reps: usize, seed: u64) -> nlsdof::Result<Run> {
    let label = match kind {
        AnalyticSet::Ball { radius } => format!("ball(r={radius})"),
        k => k.name().to_string(),
    };
    let config = McConfig::new(
        reps,
        derive_seed(seed, &format!("examples/{label}/{n}/{sigma2}")),
        sigma2,
        DVector::zeros(n),
    );
    let cov = mc_df_covariance(|y| Ok(analytic_project(kind, y)?.0), &config)?;
    // Independent draws, so the two standard errors combine in quadrature.
    let mut independent = config.clone();
    independent.seed = derive_seed(config.seed, "stein");
    let stein = mc_df_stein(|y| Ok(analytic_project(kind, y)?.1), &independent)?;
    Ok(Run {
        cov,
        stein,
        config,
        label,
    })
}

impl Run {
    fn check(
        &self,
        quantity: &'static str,
        estimate: f64,
        stderr: f64,
        target: f64,
        tolerance: f64,
    ) -> Check {
        Check {
            set: self.label.clone(),
            n: self.config.xi.len(),
            sigma2: self.config.sigma2,
            quantity,
            estimate,
            stderr,
            target,
            tolerance,
        }
    }

    fn gap(&self) -> (f64, f64) {
        (
            self.cov.estimate - self.stein.estimate,
            self.cov.combined_stderr(&self.stein),
        )
    }
}

pub fn suite(reps: usize, seed: u64) -> nlsdof::Result<Vec<Check>> {
    let mut checks = Vec::new();
    let zero = |n| DVector::zeros(n);

    let r = run(AnalyticSet::TwoAxes, 2, 1.0, reps, seed)?;
    let exact = analytic_df(AnalyticSet::TwoAxes, 2, 1.0, &zero(2))?;
    let (gap, gap_se) = r.gap();
    checks.push(r.check("df", r.cov.estimate, r.cov.stderr, exact.df, 0.005));
    checks.push(r.check(
        "df_stein",
        r.stein.estimate,
        r.stein.stderr,
        exact.df_stein,
        0.002,
    ));
    checks.push(r.check("df-df_stein", gap, gap_se, exact.gap(), 0.005));

    let r = run(AnalyticSet::Sphere, 1, 1.0, reps, seed)?;
    let exact = analytic_df(AnalyticSet::Sphere, 1, 1.0, &zero(1))?;
    checks.push(r.check(
        "df",
        r.cov.estimate,
        r.cov.stderr,
        exact.df,
        3.0 * r.cov.stderr,
    ));
    checks.push(r.check("df_stein", r.stein.estimate, r.stein.stderr, 0.0, 0.0));

    let r = run(AnalyticSet::Sphere, 3, 1.0, reps, seed)?;
    let (gap, gap_se) = r.gap();
    checks.push(r.check("df-df_stein", gap, gap_se, 0.0, 3.0 * gap_se));
    let risk = mc_true_risk(
        |y| Ok(analytic_project(AnalyticSet::Sphere, y)?.0),
        &r.config,
    )?;
    checks.push(r.check(
        "risk",
        risk.estimate,
        risk.stderr,
        1.0,
        3.0 * risk.stderr + ROUNDING,
    ));

    for sigma2 in [0.25, 1.0] {
        let r = run(AnalyticSet::Ball { radius: 1.0 }, 3, sigma2, reps, seed)?;
        let (gap, gap_se) = r.gap();
        checks.push(r.check("df-df_stein", gap, gap_se, 0.0, 3.0 * gap_se));
    }
    Ok(checks)
}

pub fn write_table<W: Write>(out: &mut W, checks: &[Check]) -> std::io::Result<()> {
    writeln!(
        out,
        "set,n,sigma2,quantity,estimate,stderr,target,tolerance,pass"
    )?;
    for c in checks {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.set,
            c.n,
            format_real(c.sigma2),
            c.quantity,
            format_real(c.estimate),
            format_real(c.stderr),
            format_real(c.target),
            format_real(c.tolerance),
            c.pass()
        )?;
    }
    Ok(())
}

pub fn examples(st: &Settings) -> Result<(), Failure> {
    let reps = st.replications.unwrap_or(DEFAULT_EXAMPLE_REPS);
    let checks = suite(reps, st.seed)?;
    println!(
        "{:<12} {:>2} {:>6} {:<12} {:>12} {:>10} {:>10} {:>10}  result",
        "set", "n", "sigma2", "quantity", "estimate", "stderr", "target", "tol"
    );
    for c in &checks {
        println!(
            "{:<12} {:>2} {:>6} {:<12} {:>12.6} {:>10.2e} {:>10.6} {:>10.2e}  {}",
            c.set,
            c.n,
            c.sigma2,
            c.quantity,
            c.estimate,
            c.stderr,
            c.target,
            c.tolerance,
            if c.pass() { "pass" } else { "FAIL" }
        );
    }
    let mut out = crate::commands::create(&st.out_dir, "examples.csv")?;
    write_table(&mut out, &checks)?;
    out.flush()?;
    let failed = checks.iter().filter(|c| !c.pass()).count();
    if failed > 0 {
        return Err(Failure::new(
            EXIT_TOLERANCE,
            anyhow::anyhow!("{failed} of {} example checks failed", checks.len()),
        ));
    }
    Ok(())
}
