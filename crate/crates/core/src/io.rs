//! File formats: sweep tables, trajectories, aggregates and amplitudes.
//!
//! Floats are written with the shortest representation that round-trips, so
//! machine-readable files carry full double precision. Complex amplitudes
//! are `[re, im]` pairs in row-major order `k = i·(N+1) + j`.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::bayes::{AggregateRow, Trajectory};
use crate::fock::{FockCutoff, TwoModePureState};
use crate::optimize::SweepTable;
use crate::{CVector, Error, Result, C64};

/// Header embedded in every JSON document that carries amplitudes.
pub const AMPLITUDE_CONVENTION: &str = "amplitudes are [re, im] pairs in row-major order k = i*(N+1) + j over |i, j>";

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// `T1,T2,qfi,converged,seed,evals`; failed points leave `qfi` empty.
pub fn write_sweep_csv<W: Write>(table: &SweepTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["T1", "T2", "qfi", "converged", "seed", "evals"])
        .map_err(csv_err)?;
    for p in &table.points {
        let (qfi, conv, evals) = match &p.result {
            Some(r) => (r.qfi.to_string(), r.converged.to_string(), r.evals_used.to_string()),
            None => (String::new(), "false".into(), String::new()),
        };
        w.write_record([p.t1.to_string(), p.t2.to_string(), qfi, conv, p.seed.to_string(), evals])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SweepDocument<'a> {
    convention: &'static str,
    #[serde(flatten)]
    table: &'a SweepTable,
}

pub fn write_sweep_json<W: Write>(table: &SweepTable, out: W) -> Result<()> {
    serde_json::to_writer_pretty(
        out,
        &SweepDocument {
            convention: AMPLITUDE_CONVENTION,
            table,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    sim_id: usize,
    iter: usize,
    stage: &'a crate::bayes::Stage,
    estimate: f64,
    variance: f64,
    sq_error: f64,
}

/// One JSON object per iteration per trajectory.
pub fn write_trajectories_jsonl<W: Write>(trajectories: &[Trajectory], mut out: W) -> Result<()> {
    for t in trajectories {
        for r in &t.records {
            serde_json::to_writer(
                &mut out,
                &TrajectoryLine {
                    sim_id: t.sim_id,
                    iter: r.iter,
                    stage: &r.stage,
                    estimate: r.estimate,
                    variance: r.variance,
                    sq_error: r.sq_error,
                },
            )?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `iter,mean_sq_error,mean_estimate,crb_qfi,crb_best_cfi`.
pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_aggregate_csv<R: Read>(input: R) -> Result<Vec<AggregateRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}

/// Amplitude table `i,j,amplitude` (plus `imag` when any coefficient is
/// complex), one row per basis ket.
pub fn write_amplitude_csv<W: Write>(state: &TwoModePureState, out: W) -> Result<()> {
    let complex = state.amplitudes().iter().any(|z| z.im != 0.0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["i", "j", "amplitude"];
    if complex {
        header.push("imag");
    }
    w.write_record(&header).map_err(csv_err)?;
    for (i, j) in state.cutoff().kets() {
        let z = state.amplitude(i, j);
        let mut row = vec![i.to_string(), j.to_string(), z.re.to_string()];
        if complex {
            row.push(z.im.to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an amplitude table written by [`write_amplitude_csv`]. The cutoff is
/// the largest index present; missing kets are zero.
pub fn read_amplitude_csv<R: Read>(input: R) -> Result<TwoModePureState> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(ci), Some(cj), Some(ca)) = (col("i"), col("j"), col("amplitude")) else {
        return Err(Error::Format("amplitude table needs columns i, j, amplitude".into()));
    };
    let cim = col("imag");
    let mut entries = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |k: usize| rec.get(k).unwrap_or("").trim().to_string();
        let parse_idx = |s: String| s.parse::<usize>().map_err(|e| Error::Format(format!("index {s:?}: {e}")));
        let parse_f = |s: String| s.parse::<f64>().map_err(|e| Error::Format(format!("value {s:?}: {e}")));
        let im = match cim {
            Some(k) => parse_f(field(k))?,
            None => 0.0,
        };
        entries.push((parse_idx(field(ci))?, parse_idx(field(cj))?, C64::new(parse_f(field(ca))?, im)));
    }
    let n = entries.iter().map(|&(i, j, _)| i.max(j)).max().unwrap_or(0);
    let cutoff = FockCutoff::new(n)?;
    let mut amps = CVector::zeros(cutoff.dim());
    for (i, j, z) in entries {
        amps[cutoff.index(i, j)] = z;
    }
    TwoModePureState::normalized(cutoff, amps)
}

/// Reads a probe state from JSON: either a bare state object or any document
/// with a `state` field (such as an optimize result).
pub fn read_state_json<R: Read>(input: R) -> Result<TwoModePureState> {
    let value: serde_json::Value = serde_json::from_reader(input)?;
    let node = value.get("state").cloned().unwrap_or(value);
    Ok(serde_json::from_value(node)?)
}

/// Reads a probe state from a CSV or JSON file, by extension.
pub fn read_state_file(path: &std::path::Path) -> Result<TwoModePureState> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_amplitude_csv(file),
        _ => read_state_json(file),
    }
}

/// Reads JSON lines into generic values (used for round-trip checks).
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<serde_json::Value>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Wrapper adding the convention header to a serialized value.
#[derive(Serialize, Deserialize)]
pub struct Documented<T> {
    pub convention: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Documented<T> {
    pub fn new(body: T) -> Self {
        Self {
            convention: AMPLITUDE_CONVENTION.to_string(),
            body,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{IterationRecord, Stage};

    fn state() -> TwoModePureState {
        let c = FockCutoff::new(2).unwrap();
        let mut a = CVector::zeros(c.dim());
        a[c.index(0, 2)] = C64::new(0.6, 0.0);
        a[c.index(2, 0)] = C64::new(0.0, 0.8);
        TwoModePureState::new(c, a).unwrap()
    }

    #[test]
    fn amplitude_csv_round_trip() {
        let s = state();
        let mut buf = Vec::new();
        write_amplitude_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i,j,amplitude,imag"));
        let back = read_amplitude_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn state_json_round_trip() {
        let s = state();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("[0.0,0.8]"));
        assert_eq!(read_state_json(text.as_bytes()).unwrap(), s);
        let wrapped = format!("{{\"qfi\": 1.0, \"state\": {text}}}");
        assert_eq!(read_state_json(wrapped.as_bytes()).unwrap(), s);
    }

    #[test]
    fn trajectories_and_aggregates() {
        let t = Trajectory {
            sim_id: 3,
            records: vec![IterationRecord {
                iter: 1,
                stage: Stage::Sldm(2),
                estimate: 0.1,
                variance: 0.01,
                sq_error: 0.0001,
            }],
            stage_estimates: vec![],
        };
        let mut buf = Vec::new();
        write_trajectories_jsonl(&[t], &mut buf).unwrap();
        let lines = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0]["stage"], "sldm2");
        assert_eq!(lines[0]["sim_id"], 3);

        let rows = vec![AggregateRow {
            iter: 1,
            mean_sq_error: 0.1,
            mean_estimate: 0.2,
            crb_qfi: 1.0 / 3.0,
            crb_best_cfi: 0.5,
        }];
        let mut buf = Vec::new();
        write_aggregate_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .starts_with("iter,mean_sq_error,mean_estimate,crb_qfi,crb_best_cfi"));
        assert_eq!(read_aggregate_csv(buf.as_slice()).unwrap(), rows);
    }
}
