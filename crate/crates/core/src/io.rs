//! CSV readers and writers for records, ground truth, samples, reconstructions
//! and evaluation reports.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curve::{LaneId, LprRecord};
use crate::error::{Error, Result};
use crate::features::TrainingSample;
use crate::metrics::{EvalReport, SummaryRow};
use crate::reconstruct::{CountEstimate, ReconstructedCurve};
use crate::simulator::{GroundTruth, VehicleTruth};

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn record_line(e: &csv::Error) -> usize {
    e.position().map(|p| p.line() as usize).unwrap_or(0)
}

/// Reads `plate,lane,timestamp,recognized` rows.
pub fn read_lpr<R: Read>(reader: R) -> Result<Vec<LprRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<LprRecord>().enumerate() {
        let rec = row.map_err(|e| parse_err(record_line(&e), e.to_string()))?;
        if !(rec.timestamp >= 0.0 && rec.timestamp.is_finite()) {
            return Err(parse_err(i + 2, format!("timestamp {} must be finite and >= 0", rec.timestamp)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_lpr_file(path: &Path) -> Result<Vec<LprRecord>> {
    read_lpr(File::open(path)?)
}

pub fn write_lpr<W: Write>(writer: W, records: &[LprRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        w.write_record(["plate", "lane", "timestamp", "recognized"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    plate: String,
    up_lane: String,
    down_lane: String,
    entry_time: f64,
    depart_time: f64,
    merge_flag: bool,
}

/// Ground truth as `plate,up_lane,down_lane,entry_time,depart_time,merge_flag`.
/// Merges have an empty `up_lane`.
pub fn write_truth<W: Write>(writer: W, truth: &GroundTruth) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if truth.vehicles.is_empty() {
        w.write_record(["plate", "up_lane", "down_lane", "entry_time", "depart_time", "merge_flag"])?;
    }
    for v in &truth.vehicles {
        w.serialize(TruthRow {
            plate: v.plate.clone(),
            up_lane: v.upstream_lane.as_ref().map(|l| l.to_string()).unwrap_or_default(),
            down_lane: v.downstream_lane.to_string(),
            entry_time: v.entry_time,
            depart_time: v.depart_time,
            merge_flag: v.is_merge(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth<R: Read>(reader: R) -> Result<GroundTruth> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut vehicles = Vec::new();
    for (i, row) in rdr.deserialize::<TruthRow>().enumerate() {
        let r = row.map_err(|e| parse_err(record_line(&e), e.to_string()))?;
        if r.merge_flag != r.up_lane.is_empty() {
            return Err(parse_err(i + 2, "merge_flag must be set exactly when up_lane is empty"));
        }
        vehicles.push(VehicleTruth {
            plate: r.plate,
            upstream_lane: (!r.up_lane.is_empty()).then(|| LaneId::from(r.up_lane)),
            downstream_lane: r.down_lane.into(),
            entry_time: r.entry_time,
            depart_time: r.depart_time,
        });
    }
    Ok(GroundTruth { vehicles })
}

/// Samples as `lane,ds_<lane>...,t_cycle,delta,target`.
pub fn write_samples<W: Write>(writer: W, upstream_lanes: &[LaneId], samples: &[TrainingSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["lane".to_owned()];
    header.extend(upstream_lanes.iter().map(|l| format!("ds_{l}")));
    header.extend(["t_cycle", "delta", "target"].map(String::from));
    w.write_record(&header)?;
    for s in samples {
        if s.features.accumulations.len() != upstream_lanes.len() {
            return Err(crate::error::invalid_arg("sample width does not match the upstream lanes"));
        }
        let mut row = vec![s.lane.to_string()];
        row.extend(s.features.accumulations.iter().map(|v| v.to_string()));
        row.extend([s.features.time_in_cycle, s.features.span, s.target].map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Curves as `lane,t,mean,var_total,var_epistemic,var_aleatoric,mode`.
pub fn write_reconstruction<W: Write>(writer: W, curves: &[ReconstructedCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lane", "t", "mean", "var_total", "var_epistemic", "var_aleatoric", "mode"])?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.lane.to_string(),
                p.t.to_string(),
                p.mean.to_string(),
                p.var_total().to_string(),
                p.var_epistemic.to_string(),
                p.var_aleatoric.to_string(),
                c.mode.as_str().to_owned(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Counts as `lane,t,mean,var_total,mode`.
pub fn write_counts<W: Write>(writer: W, rows: &[(LaneId, &str, Vec<CountEstimate>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lane", "t", "mean", "var_total", "mode"])?;
    for (lane, mode, counts) in rows {
        for c in counts {
            w.write_record([lane.to_string(), c.t.to_string(), c.mean.to_string(), c.variance.to_string(), (*mode).to_owned()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Aggregated report as `model,matching_rate,rmse_mean,rmse_std,crps_mean,crps_std,coverage,n`.
pub fn write_summary<W: Write>(writer: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record(["model", "matching_rate", "rmse_mean", "rmse_std", "crps_mean", "crps_std", "coverage", "n"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary<R: Read>(reader: R) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .map(|r| r.map_err(|e: csv::Error| parse_err(record_line(&e), e.to_string())))
        .collect()
}

/// One row per scored `(model, lane, rate, seed)` cell.
pub fn write_cells<W: Write>(writer: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if reports.is_empty() {
        w.write_record(["model", "lane", "matching_rate", "seed", "rmse", "crps", "coverage", "n"])?;
    }
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lpr_round_trip() {
        let recs = vec![LprRecord::new("A1", "up:TH1", 12.345, true), LprRecord::new("", "down:LT", 0.0, false)];
        let mut buf = Vec::new();
        write_lpr(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("plate,lane,timestamp,recognized\n"));
        assert_eq!(read_lpr(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn lpr_rejects_negative_time() {
        let err = read_lpr("plate,lane,timestamp,recognized\nA,up:LT,-1,true\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn lpr_rejects_malformed_row() {
        let err = read_lpr("plate,lane,timestamp,recognized\nA,up:LT,abc,true\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn truth_round_trip() {
        let truth = GroundTruth {
            vehicles: vec![
                VehicleTruth { plate: "P1".into(), upstream_lane: Some("up:LT".into()), downstream_lane: "down:LT".into(), entry_time: 1.5, depart_time: 70.25 },
                VehicleTruth { plate: "P2".into(), upstream_lane: None, downstream_lane: "down:TH1".into(), entry_time: 3.0, depart_time: 50.0 },
            ],
        };
        let mut buf = Vec::new();
        write_truth(&mut buf, &truth).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("plate,up_lane,down_lane,entry_time,depart_time,merge_flag\n"));
        assert_eq!(read_truth(buf.as_slice()).unwrap(), truth);
    }

    #[test]
    fn summary_round_trip() {
        let rows = vec![SummaryRow {
            model: "bacl".into(),
            matching_rate: 0.5,
            rmse_mean: 1.25,
            rmse_std: 0.1,
            crps_mean: 0.7,
            crps_std: 0.05,
            coverage: 0.9,
            n: 10,
        }];
        let mut buf = Vec::new();
        write_summary(&mut buf, &rows).unwrap();
        assert!(buf.starts_with(b"model,matching_rate,rmse_mean,rmse_std,crps_mean,crps_std,coverage,n\n"));
        assert_eq!(read_summary(buf.as_slice()).unwrap(), rows);
    }
}
