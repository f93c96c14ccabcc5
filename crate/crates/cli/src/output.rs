//! Files written by `simulate`, `eval` and `export-curve`. The column layouts
//! are listed in the README.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use coanno_core::engine::{actions_to_reach, EpisodeTranscript, TranscriptRecord};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const CURVES_FILE: &str = "curves.csv";
pub const MEAN_CURVE_FILE: &str = "mean_curve.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUN_FILE: &str = "run.json";

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data_io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::data_io(path, e))
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    image_id: &'a str,
    #[serde(flatten)]
    record: &'a TranscriptRecord,
}

/// One line per transcript record, tagged with its image.
pub fn write_transcripts(path: &Path, transcripts: &[EpisodeTranscript]) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::data_io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in transcripts {
        for record in &t.records {
            let line = serde_json::to_string(&TranscriptLine { image_id: &t.image_id, record }).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| CliError::data_io(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::data_io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub image_id: String,
    pub actions: usize,
    pub pq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub actions: usize,
    pub mean_pq: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::data_io(path, e))
}

pub fn write_curves(path: &Path, transcripts: &[EpisodeTranscript]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for t in transcripts {
        for (actions, &pq) in t.curve.iter().enumerate() {
            w.serialize(CurveRow { image_id: t.image_id.clone(), actions, pq }).map_err(|e| CliError::data_io(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::data_io(path, e))
}

pub fn write_mean_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for (actions, &mean_pq) in curve.iter().enumerate() {
        w.serialize(MeanRow { actions, mean_pq }).map_err(|e| CliError::data_io(path, e))?;
    }
    w.flush().map_err(|e| CliError::data_io(path, e))
}

/// Reads a mean curve, checking that the action column counts up from 0.
pub fn read_mean_curve(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::data_io(path, e))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<MeanRow>().enumerate() {
        let row = row.map_err(|e| CliError::data_io(path, e))?;
        if row.actions != i {
            return Err(CliError::Data(format!("{}: row {i} has actions = {}", path.display(), row.actions)));
        }
        out.push(row.mean_pq);
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{}: empty curve", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reach {
    pub target: f64,
    pub actions: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub images: usize,
    pub budget: usize,
    pub init_pq: f64,
    pub final_pq: f64,
    pub mean_annotator_actions: f64,
    pub reach: Vec<Reach>,
}

impl RunSummary {
    pub fn new(variant: &str, transcripts: &[EpisodeTranscript], curve: &[f64], budget: usize, targets: &[f64]) -> Self {
        let n = transcripts.len().max(1) as f64;
        RunSummary {
            variant: variant.to_string(),
            images: transcripts.len(),
            budget,
            init_pq: curve.first().copied().unwrap_or(0.0),
            final_pq: curve.last().copied().unwrap_or(0.0),
            mean_annotator_actions: transcripts.iter().map(|t| t.annotator_actions as f64).sum::<f64>() / n,
            reach: targets.iter().map(|&target| Reach { target, actions: actions_to_reach(curve, target) }).collect(),
        }
    }
}

/// Column name for an actions-to-reach target, e.g. `actions_to_0.60`.
pub fn reach_column(target: f64) -> String {
    format!("actions_to_{target:.2}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|a| a.to_string()).unwrap_or_default()
}

/// `variant,init_pq,final_pq,actions_to_<t>...` for curves read back from
/// disk; unreached targets are left empty.
pub fn write_summary_csv(path: &Path, runs: &[(String, Vec<f64>)], targets: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["variant".to_string(), "init_pq".into(), "final_pq".into()];
    header.extend(targets.iter().map(|&t| reach_column(t)));
    w.write_record(&header).map_err(|e| CliError::data_io(path, e))?;
    for (name, curve) in runs {
        let mut row = vec![name.clone(), curve[0].to_string(), curve[curve.len() - 1].to_string()];
        row.extend(targets.iter().map(|&t| fmt_opt(actions_to_reach(curve, t))));
        w.write_record(&row).map_err(|e| CliError::data_io(path, e))?;
    }
    w.flush().map_err(|e| CliError::data_io(path, e))
}

/// `actions,<variant>...`, padding shorter curves with their last value.
pub fn write_combined_csv(path: &Path, runs: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["actions".to_string()];
    header.extend(runs.iter().map(|(n, _)| n.clone()));
    w.write_record(&header).map_err(|e| CliError::data_io(path, e))?;
    let len = runs.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    for i in 0..len {
        let mut row = vec![i.to_string()];
        row.extend(runs.iter().map(|(_, c)| c[i.min(c.len() - 1)].to_string()));
        w.write_record(&row).map_err(|e| CliError::data_io(path, e))?;
    }
    w.flush().map_err(|e| CliError::data_io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub actions: Vec<usize>,
    pub mean_pq: Vec<f64>,
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<PlotSeries>,
}

pub fn is_monotone(curve: &[f64]) -> bool {
    curve.windows(2).all(|w| w[1] >= w[0])
}

pub fn plot_data(runs: &[(String, Vec<f64>)]) -> PlotData {
    PlotData {
        x_label: "annotator actions".into(),
        y_label: "mean PQ".into(),
        series: runs
            .iter()
            .map(|(name, curve)| PlotSeries {
                name: name.clone(),
                actions: (0..curve.len()).collect(),
                mean_pq: curve.clone(),
                monotone: is_monotone(curve),
            })
            .collect(),
    }
}

/// Parses `NAME=DIR`; a bare `DIR` is named after its last component.
pub fn parse_named_run(spec: &str) -> Result<(String, std::path::PathBuf)> {
    if let Some((name, dir)) = spec.split_once('=') {
        if name.is_empty() || dir.is_empty() {
            return Err(CliError::Config(format!("bad run spec {spec:?}; expected NAME=DIR")));
        }
        return Ok((name.to_string(), dir.into()));
    }
    let path = std::path::PathBuf::from(spec);
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::Config(format!("cannot name run {spec:?}; use NAME=DIR")))?
        .to_string();
    Ok((name, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_curve_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let curve = vec![0.25, 0.5, 0.1 + 0.2, 1.0];
        write_mean_curve(&path, &curve).unwrap();
        assert_eq!(read_mean_curve(&path).unwrap(), curve);
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("actions,mean_pq\n0,0.25\n"));
    }

    #[test]
    fn run_specs() {
        assert_eq!(parse_named_run("full=runs/x").unwrap(), ("full".into(), "runs/x".into()));
        assert_eq!(parse_named_run("runs/base").unwrap().0, "base");
        assert!(parse_named_run("=x").is_err());
    }

    #[test]
    fn combined_csv_pads_short_curves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_combined_csv(&path, &[("a".into(), vec![0.5]), ("b".into(), vec![0.25, 0.75])]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "actions,a,b\n0,0.5,0.25\n1,0.5,0.75\n");
    }
}
