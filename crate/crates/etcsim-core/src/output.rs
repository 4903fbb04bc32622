//! Result serialization: CSV time series and JSON summaries.
//!
//! Every float is written with 17 significant digits (`{:.16e}`), enough for
//! a f64 to survive a write/parse round trip bit-for-bit. Combined with the
//! deterministic simulator this makes output bundles byte-identical across
//! runs of the same configuration.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::ser::Formatter;

use crate::engine::{ComparisonReport, SimResult, Summary};
use crate::error::Error;
use crate::Result;

/// Canonical float rendering for CSV cells and JSON numbers.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// serde_json formatter that renders every f64 with 17 significant digits.
/// Everything else keeps the compact default.
pub struct SciFormatter;

impl Formatter for SciFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serialize any value to JSON with the canonical float rendering.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Parse(format!("serializing JSON: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Parse(format!("serialized JSON not UTF-8: {e}")))
}

/// Files produced for one simulation run.
#[derive(Debug, Clone)]
pub struct BundlePaths {
    pub trajectory: PathBuf,
    pub events: PathBuf,
    pub theta: PathBuf,
    pub summary: PathBuf,
}

fn writer_for(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufWriter::new(file))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write the four-file bundle for one run into `dir` (created if missing):
/// `trajectory.csv`, `events.csv`, `theta.csv`, `summary.json`.
pub fn write_bundle(dir: &Path, result: &SimResult) -> Result<BundlePaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let paths = BundlePaths {
        trajectory: dir.join("trajectory.csv"),
        events: dir.join("events.csv"),
        theta: dir.join("theta.csv"),
        summary: dir.join("summary.json"),
    };

    write_trajectory(&paths.trajectory, result)?;
    write_events(&paths.events, result)?;
    write_theta(&paths.theta, result)?;

    let summary = to_json_string(&result.summary_document())?;
    fs::write(&paths.summary, summary)
        .map_err(|e| Error::io(paths.summary.display().to_string(), e))?;
    Ok(paths)
}

fn write_trajectory(path: &Path, result: &SimResult) -> Result<()> {
    let mut w = writer_for(path)?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "t,x1,x2,x3,x4,x5,x6,u1,u2,Hd").map_err(io_err)?;
    let s = &result.samples;
    for i in 0..s.len() {
        let x = s.state(i);
        let u = s.input(i);
        write!(w, "{}", fmt_float(s.times[i])).map_err(io_err)?;
        for v in x {
            write!(w, ",{}", fmt_float(*v)).map_err(io_err)?;
        }
        for v in u {
            write!(w, ",{}", fmt_float(*v)).map_err(io_err)?;
        }
        writeln!(w, ",{}", fmt_float(s.hd[i])).map_err(io_err)?;
    }
    finish(w, path)
}

fn write_events(path: &Path, result: &SimResult) -> Result<()> {
    let mut w = writer_for(path)?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "k,t_k,dt,node_ids,gap_at_fire").map_err(io_err)?;
    let ev = &result.events;
    let mut ids = String::new();
    for k in 0..ev.len() {
        ids.clear();
        for (pos, node) in ev.fired(k).iter().enumerate() {
            if pos > 0 {
                ids.push(';');
            }
            // Node ids are 1-based in files, matching the grouping notation.
            ids.push_str(&(node + 1).to_string());
        }
        writeln!(
            w,
            "{k},{},{},{ids},{}",
            fmt_float(ev.times[k]),
            fmt_float(ev.dts[k]),
            fmt_float(ev.gaps[k]),
        )
        .map_err(io_err)?;
    }
    finish(w, path)
}

fn write_theta(path: &Path, result: &SimResult) -> Result<()> {
    let mut w = writer_for(path)?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    let ev = &result.events;
    let nodes = ev.theta_nodes;
    write!(w, "k").map_err(io_err)?;
    for i in 1..=nodes {
        write!(w, ",theta_{i}").map_err(io_err)?;
    }
    writeln!(w).map_err(io_err)?;
    if nodes > 0 {
        for k in 0..ev.len() {
            write!(w, "{k}").map_err(io_err)?;
            for v in ev.theta_row(k) {
                write!(w, ",{}", fmt_float(*v)).map_err(io_err)?;
            }
            writeln!(w).map_err(io_err)?;
        }
    }
    finish(w, path)
}

/// Write a mode-comparison report as `compare.json` inside `dir`.
pub fn write_comparison(dir: &Path, report: &ComparisonReport) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join("compare.json");
    let text = to_json_string(&report.document())?;
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

/// One sweep-cell row for the aggregated CSV; `status` is `ok` or `error`.
pub struct SweepRow {
    pub sigma: f64,
    pub q: u32,
    pub te_rule: String,
    pub mode: String,
    pub outcome: std::result::Result<Summary, String>,
}

/// Write sweep rows as `sweep.csv` inside `dir`.
pub fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join("sweep.csv");
    let mut w = writer_for(&path)?;
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(
        w,
        "sigma,q,te_rule,mode,status,update_count,min_dt,mean_dt,max_dt,final_distance,hd_max_relative_increase,error"
    )
    .map_err(io_err)?;
    for row in rows {
        write!(
            w,
            "{},{},{},{},",
            fmt_float(row.sigma),
            row.q,
            row.te_rule,
            row.mode
        )
        .map_err(io_err)?;
        match &row.outcome {
            Ok(s) => {
                let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
                writeln!(
                    w,
                    "ok,{},{},{},{},{},{},",
                    s.update_count,
                    opt(s.min_interval),
                    opt(s.mean_interval),
                    opt(s.max_interval),
                    fmt_float(s.final_distance),
                    fmt_float(s.hd_max_relative_increase),
                )
                .map_err(io_err)?;
            }
            Err(msg) => {
                // Commas in the message would shift columns; flatten them.
                let clean: String = msg
                    .chars()
                    .map(|c| if c == ',' || c == '\n' { ';' } else { c })
                    .collect();
                writeln!(w, "error,,,,,,,{clean}").map_err(io_err)?;
            }
        }
    }
    finish(w, &path)?;
    Ok(path)
}
