//! `synth` command-line front end.
//!
//! ```text
//! synth -p p2.json -p pinf.json -s th -b inf -b 1.2 -o 0 --seed 7 \
//!       --out k.json --report report.json --history history.csv
//! ```
//!
//! Exit status: 0 on success, 2 when the result is infeasible or no
//! stabilizing controller was found (outputs are still written), 1 on usage,
//! parse or I/O errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::plant::{Plant, PlantSet};
use crate::synthesis::{
    synthesize, History, ObjectiveSpec, PhaseOutcome, Status, SynthesisOptions, SynthesisReport,
};

#[derive(Debug, Clone, Parser)]
#[command(
    name = "synth",
    version,
    about = "Fixed-order H2/H-infinity controller synthesis"
)]
pub struct CliConfig {
    /// Plant file (JSON); repeat once per plant.
    #[arg(short = 'p', long = "plant", value_name = "PATH", required = true)]
    pub plants: Vec<PathBuf>,
    /// One character per plant: t (H2), h (H-infinity), s (spectral abscissa).
    #[arg(short = 's', long = "spec", value_name = "STRING")]
    pub spec: String,
    /// Bound per plant, a decimal or "inf" to minimize; repeat once per plant.
    #[arg(short = 'b', long = "bound", value_name = "VALUE", value_parser = parse_bound)]
    pub bounds: Vec<f64>,
    /// Controller order.
    #[arg(short = 'o', long = "order", default_value_t = 0)]
    pub order: usize,
    #[arg(long = "restarts", default_value_t = 3)]
    pub restarts: usize,
    #[arg(long = "seed", default_value_t = 0)]
    pub seed: u64,
    /// Refine each local search with gradient sampling.
    #[arg(long = "sampling")]
    pub sampling: bool,
    #[arg(long = "print", default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=2))]
    pub print: u8,
    /// Controller output; printed to stdout when omitted.
    #[arg(long = "out", value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long = "report", value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[arg(long = "history", value_name = "PATH")]
    pub history: Option<PathBuf>,
}

fn parse_bound(s: &str) -> std::result::Result<f64, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        Ok(_) => Err(format!("bound must be positive or \"inf\", got {s}")),
        Err(_) => Err(format!("not a number: {s}")),
    }
}

impl CliConfig {
    fn check(&self) -> Result<()> {
        let (n, s, b) = (
            self.plants.len(),
            self.spec.chars().count(),
            self.bounds.len(),
        );
        if n != s || n != b {
            return Err(Error::Usage(format!(
                "{n} plant(s), spec of length {s} and {b} bound(s) must agree"
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Usage("--restarts must be at least 1".into()));
        }
        Ok(())
    }

    fn objective(&self) -> Result<ObjectiveSpec> {
        let options = SynthesisOptions {
            order: self.order,
            starts: self.restarts,
            seed: self.seed,
            sampling: self.sampling,
            ..SynthesisOptions::default()
        };
        ObjectiveSpec::parse(&self.spec, &self.bounds, options)
    }
}

/// Runs the front end and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let config = match CliConfig::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&config) {
        Ok(Status::Feasible) => 0,
        Ok(status) => {
            eprintln!("synth: {}", status.as_str());
            2
        }
        Err(e) => {
            eprintln!("synth: {e}");
            1
        }
    }
}

fn execute(config: &CliConfig) -> Result<Status> {
    config.check()?;
    let plants = config
        .plants
        .iter()
        .map(|p| Plant::load(p))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = plants.iter().map(|p| p.name.clone()).collect();
    let ps = PlantSet::new(plants)?;
    let spec = config.objective()?;
    let report = synthesize(&ps, &spec)?;

    if config.print >= 2 {
        for h in &report.histories {
            for (i, (v, b)) in h.values.iter().zip(h.best_so_far()).enumerate() {
                eprintln!("start {} iter {i:4}  value {v:.10}  best {b:.10}", h.start);
            }
        }
    }
    if config.print >= 1 {
        for ((name, e), v) in names.iter().zip(&report.entries).zip(&report.values) {
            eprintln!("{name}: {} = {v:.6} (bound {})", e.kind, e.bound);
        }
        eprintln!(
            "{} (best of {} starts: {})",
            report.status.as_str(),
            report.histories.len(),
            report.best_start
        );
    }

    let controller = report.controller.to_json();
    match &config.out {
        Some(path) => write_file(path, &controller)?,
        None => print!("{controller}"),
    }
    if let Some(path) = &config.report {
        write_file(path, &report_json(&report, &names))?;
    }
    if let Some(path) = &config.history {
        write_history(&report.histories, path)?;
    }
    Ok(report.status)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn phase(p: PhaseOutcome) -> Value {
    json!(p.as_str())
}

/// Report document: status, phases, per-plant entries and the controller.
pub fn report_json(report: &SynthesisReport, names: &[String]) -> String {
    let plants: Vec<Value> = report
        .entries
        .iter()
        .zip(&report.values)
        .enumerate()
        .map(|(i, (e, v))| {
            json!({
                "name": names.get(i).cloned().unwrap_or_default(),
                "kind": e.kind.as_char().to_string(),
                "bound": number(e.bound),
                "value": number(*v),
            })
        })
        .collect();
    let k = &report.controller;
    let rows = |m: &crate::Matrix| -> Value {
        Value::Array(
            m.row_iter()
                .map(|r| Value::Array(r.iter().map(|&x| number(x)).collect()))
                .collect(),
        )
    };
    let doc = json!({
        "status": report.status.as_str(),
        "feasible": report.feasible,
        "seed": report.seed,
        "best_start": report.best_start,
        "phases": {
            "stabilization": phase(report.phases.stabilization),
            "feasibility": phase(report.phases.feasibility),
            "optimization": phase(report.phases.optimization),
        },
        "plants": plants,
        "controller": {
            "order": k.order(),
            "AK": rows(&k.ak),
            "BK": rows(&k.bk),
            "CK": rows(&k.ck),
            "DK": rows(&k.dk),
        },
    });
    let mut out = serde_json::to_string_pretty(&doc).expect("report serializes");
    out.push('\n');
    out
}

/// Writes `start,iteration,value,best_so_far` rows, one per iteration per start.
pub fn write_history(traces: &[History], path: &Path) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["start", "iteration", "value", "best_so_far"])
        .map_err(io)?;
    for h in traces {
        for (i, (v, b)) in h.values.iter().zip(h.best_so_far()).enumerate() {
            w.write_record([
                h.start.to_string(),
                i.to_string(),
                v.to_string(),
                b.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
