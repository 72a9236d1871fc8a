//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use madt::check;
use madt::dataset::Dataset;
use madt::evaluator::{Agent, EvalConfig, Method};
use madt::experiment::{ExperimentConfig, Setup};
use madt::policies::PolicySpec;
use madt::tensor::gradcheck::standard_cases;
use madt::trainer::FitOutput;
use madt::Result;

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

fn criterion(id: usize, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Line {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let line = Line {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    };
    println!(
        "{} [{:>2}] {:<26} {:>8.1}s  {}",
        if line.passed { "PASS" } else { "FAIL" },
        line.id,
        line.name,
        line.seconds,
        line.detail
    );
    line
}

fn main() -> ExitCode {
    let desk = Setup::new(ExperimentConfig::desk()).expect("desk profile is valid");
    let mut lines = Vec::new();

    lines.push(criterion(1, "gradients", || {
        let start = Instant::now();
        let (ok, detail) = check::gradients(&standard_cases())?;
        let secs = start.elapsed().as_secs_f64();
        Ok((ok && secs < 60.0, format!("{detail}; {secs:.1}s of 60s")))
    }));
    lines.push(criterion(2, "permutation equivariance", || check::equivariance(20, 0)));
    lines.push(criterion(3, "causality", || check::causality(10, 0)));
    lines.push(criterion(4, "return-to-go bookkeeping", || check::rtg_bookkeeping(0)));
    lines.push(criterion(5, "simulator conservation", || check::simulator(100, 0)));

    lines.push(criterion(6, "baseline ordering", || {
        let start = Instant::now();
        let setup = Setup::new(ExperimentConfig {
            eval: EvalConfig {
                episodes: 20,
                seeds: vec![0],
                ..EvalConfig::default()
            },
            ..ExperimentConfig::desk()
        })?;
        let report = setup.evaluate(&[
            Method::Baseline(PolicySpec::max_pressure()),
            Method::Baseline(PolicySpec::fixed_time_default()),
        ])?;
        let att = |name: &str| report.method(name).and_then(|m| m.att.as_ref()).map(|s| s.mean);
        let (mp, ft) = (att("max_pressure").unwrap_or(f64::NAN), att("fixed_time").unwrap_or(f64::NAN));
        let gain = 1.0 - mp / ft;
        let secs = start.elapsed().as_secs_f64();
        Ok((
            gain >= 0.05 && secs < 300.0,
            format!("ATT max_pressure {mp:.1}s, fixed_time {ft:.1}s, {:.1}% lower; {secs:.1}s of 300s", 100.0 * gain),
        ))
    }));

    let mut trained: Option<(Dataset, FitOutput)> = None;
    lines.push(criterion(7, "learning smoke test", || {
        let start = Instant::now();
        let (dataset, _) = desk.collect()?;
        let fit = desk.train(&dataset, &desk.model, |_| {})?;
        let epochs = &fit.log.epochs;
        let (first, last) = (epochs[0].mean_loss, epochs[epochs.len() - 1].mean_loss);
        let agent = Agent::from_checkpoint(&fit.last)?;
        let report = desk.evaluate(&[
            Method::Baseline(PolicySpec::max_pressure()),
            Method::Model {
                name: "madt".into(),
                agent: Box::new(agent),
                target_fraction: desk.config.eval.target_fraction,
            },
        ])?;
        let att = |name: &str| report.method(name).and_then(|m| m.att.as_ref()).map(|s| s.mean);
        let (mp, model) = (att("max_pressure").unwrap_or(f64::NAN), att("madt").unwrap_or(f64::NAN));
        let ratio = model / mp;
        let secs = start.elapsed().as_secs_f64();
        trained = Some((dataset, fit));
        Ok((
            last <= 0.5 * first && (ratio - 1.0).abs() <= 0.15 && secs < 1800.0,
            format!(
                "CE {first:.3} -> {last:.3} ({:.0}%); ATT madt {model:.1}s vs max_pressure {mp:.1}s ({:+.1}%); {secs:.0}s of 1800s",
                100.0 * last / first,
                100.0 * (ratio - 1.0)
            ),
        ))
    }));

    lines.push(criterion(8, "coordination index", || check::coordination(50, 0)));

    lines.push(criterion(9, "ablation plumbing", || {
        let (dataset, _) = trained.as_ref().ok_or_else(|| madt::Error::State("no dataset from criterion 7".into()))?;
        let ablation = desk.ablate(dataset, |_, _| {})?;
        let names: Vec<&str> = ablation.report.methods.iter().map(|m| m.method.as_str()).collect();
        let expected = ["madt", "independent_dt", "madt_no_rtg", "independent_dt_no_rtg"];
        let all_att = ablation.report.methods.iter().all(|m| m.att.is_some());
        let atts: Vec<String> = ablation
            .report
            .methods
            .iter()
            .map(|m| format!("{} {:.1}", m.method, m.att.as_ref().map_or(f64::NAN, |s| s.mean)))
            .collect();
        Ok((names == expected && all_att, format!("{} rows: {}", names.len(), atts.join(", "))))
    }));

    lines.push(criterion(10, "attention statistics", || {
        let (_, fit) = trained.as_ref().ok_or_else(|| madt::Error::State("no model from criterion 7".into()))?;
        let stats = desk.attention(&Agent::from_checkpoint(&fit.last)?)?;
        let hop = ["self", "1-hop", "2-hop", "3+-hop"];
        let present = hop.iter().all(|c| stats.get(c).is_some());
        let means: Vec<String> = hop
            .iter()
            .filter_map(|c| stats.get(c).map(|s| format!("{c} {:.3}", s.mean)))
            .collect();
        Ok((
            present && stats.max_row_error <= 1e-12,
            format!("{} rows, max row error {:.1e}; {}", stats.rows, stats.max_row_error, means.join(", ")),
        ))
    }));

    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
