//! `audit-group` and `invariance-curve`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use liesa::audit::{audit_group_with, GroupAudit};
use liesa::autodiff::Precision;
use liesa::blocks::{ModelConfig, TaskHead};
use liesa::dynamics::train::CONSTELLATION_OUTPUTS;
use liesa::group::{log_map, AlgebraVector, GroupElement, GroupId, LiftSampling};
use liesa::probe::{invariance_curve as curve, probe_examples};
use liesa::rng::derive_seed;
use serde::Serialize;

use crate::manifest::{ensure_dir, read_json, write_csv, write_json, write_manifest};
use crate::Violation;

#[derive(Serialize)]
struct AuditRun {
    group: GroupId,
    samples: usize,
    tamper_log: bool,
}

pub fn audit_group(out: &Path, group: GroupId, samples: usize, seed: u64, tamper_log: bool) -> Result<()> {
    let tampered = |g: &GroupElement| -> liesa::Result<AlgebraVector> {
        let mut c = log_map(g)?.into_coords();
        c[0] += 1e-6;
        AlgebraVector::new(g.group(), c)
    };
    let report: GroupAudit = if tamper_log {
        audit_group_with(group, samples, seed, &tampered)?
    } else {
        audit_group_with(group, samples, seed, &log_map)?
    };
    ensure_dir(out)?;
    let file = write_json(out, "audit.json", &report)?;
    let run = AuditRun {
        group,
        samples,
        tamper_log,
    };
    write_manifest(out, "audit-group", &run, seed, &[file])?;
    println!(
        "{group}: log(exp) {:.2e}, exp(log) {:.2e}, oracle {:.2e}, distance invariance {:.2e}{}",
        report.log_exp_round_trip,
        report.exp_log_round_trip,
        report.oracle_log,
        report.distance_invariance,
        report
            .near_pi_rejections
            .map(|r| format!(", near-pi rejections {r}/{}", report.near_pi_trials))
            .unwrap_or_default()
    );
    if !report.passed() {
        bail!(Violation(report.violations.join("; ")));
    }
    Ok(())
}

pub struct CurveArgs {
    pub group: GroupId,
    pub lift_samples: Vec<usize>,
    pub runs: usize,
    pub precision: Precision,
    pub config: Option<PathBuf>,
    pub stratified: bool,
    pub per_point: bool,
    pub examples: usize,
    pub translation_scale: f64,
}

#[derive(Serialize)]
struct CurveRun {
    model: ModelConfig,
    lift_samples: Vec<usize>,
    runs: usize,
    precision: Precision,
    examples: usize,
    translation_scale: f64,
}

/// Single-layer default probe model.
pub fn default_probe_model(group: GroupId) -> ModelConfig {
    ModelConfig::small(group, 1, CONSTELLATION_OUTPUTS, TaskHead::Classifier, 16, 4, 1)
}

pub fn invariance_curve(out: &Path, seed: u64, args: CurveArgs) -> Result<()> {
    if args.lift_samples.is_empty() || args.lift_samples.contains(&0) || args.runs == 0 || args.examples == 0 {
        bail!(liesa::Error::Config("lift samples, runs and examples must be positive".into()));
    }
    let mut model = match &args.config {
        Some(path) => read_json::<ModelConfig>(path)?,
        None => default_probe_model(args.group),
    };
    if model.group != args.group {
        bail!(liesa::Error::GroupMismatch(model.group, args.group));
    }
    if model.input_dim != 1 {
        bail!(liesa::Error::Config(format!("probe inputs carry one feature, model expects {}", model.input_dim)));
    }
    model.lift.sampling = if args.stratified { LiftSampling::Stratified } else { LiftSampling::Iid };
    model.lift.per_point = args.per_point;
    model.validate()?;
    let examples = probe_examples(args.group, args.examples, derive_seed(seed, 0))?;
    let points = curve(
        &model,
        &examples,
        &args.lift_samples,
        args.runs,
        args.precision,
        args.translation_scale,
        derive_seed(seed, 1),
    )?;
    ensure_dir(out)?;
    let rows: Vec<String> = points
        .iter()
        .map(|p| format!("{},{},{},{}", p.lift_samples, p.stats.median, p.stats.q25, p.stats.q75))
        .collect();
    let file = write_csv(out, "invariance_curve.csv", "lift_samples,median,q25,q75", &rows)?;
    let run = CurveRun {
        model,
        lift_samples: args.lift_samples,
        runs: args.runs,
        precision: args.precision,
        examples: args.examples,
        translation_scale: args.translation_scale,
    };
    write_manifest(out, "invariance-curve", &run, seed, &[file])?;
    for p in &points {
        println!("lift_samples {:>3}: median {:.3e} (q25 {:.3e}, q75 {:.3e})", p.lift_samples, p.stats.median, p.stats.q25, p.stats.q75);
    }
    Ok(())
}
