use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Diverged,
    Skipped,
}

impl RowStatus {
    fn as_str(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Diverged => "diverged",
            RowStatus::Skipped => "skipped",
        }
    }
}

/// One line of a result table. `stat` is `seed=<s>`, `mean` or `std`.
/// Numbers are rounded to six decimals on construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub stat: String,
    pub tau: f64,
    pub accept_a: f64,
    pub r_measured: Option<f64>,
    pub r_modeled: f64,
    pub target_flops_per_round: f64,
    pub draft_flops_per_round: f64,
    pub draft_passes_per_round: f64,
    pub status: RowStatus,
}

pub(crate) fn round6(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

impl ResultRow {
    pub fn rounded(mut self) -> Self {
        self.tau = round6(self.tau);
        self.accept_a = round6(self.accept_a);
        self.r_measured = self.r_measured.map(round6);
        self.r_modeled = round6(self.r_modeled);
        self.target_flops_per_round = round6(self.target_flops_per_round);
        self.draft_flops_per_round = round6(self.draft_flops_per_round);
        self.draft_passes_per_round = round6(self.draft_passes_per_round);
        self
    }

    /// A row with zeroed numbers, for configurations that produced no data.
    pub fn empty(label: &str, stat: &str, tau: f64, status: RowStatus) -> Self {
        Self {
            label: label.into(),
            stat: stat.into(),
            tau,
            accept_a: 0.0,
            r_measured: None,
            r_modeled: 0.0,
            target_flops_per_round: 0.0,
            draft_flops_per_round: 0.0,
            draft_passes_per_round: 0.0,
            status,
        }
        .rounded()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

const HEADER: [&str; 10] = [
    "label",
    "stat",
    "tau",
    "accept_a",
    "r_measured",
    "r_modeled",
    "target_flops_per_round",
    "draft_flops_per_round",
    "draft_passes_per_round",
    "status",
];

fn fixed(x: f64) -> String {
    format!("{x:.6}")
}

impl ResultTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.label.clone(),
                r.stat.clone(),
                fixed(r.tau),
                fixed(r.accept_a),
                r.r_measured.map(fixed).unwrap_or_default(),
                fixed(r.r_modeled),
                fixed(r.target_flops_per_round),
                fixed(r.draft_flops_per_round),
                fixed(r.draft_passes_per_round),
                r.status.as_str().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                rows.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { rows })
    }

    pub fn to_string(&self, format: ReportFormat) -> Result<String> {
        let mut buf = Vec::new();
        match format {
            ReportFormat::Csv => self.write_csv(&mut buf)?,
            ReportFormat::Jsonl => self.write_jsonl(&mut buf)?,
        }
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Jsonl => "jsonl",
        }
    }

    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(ReportFormat::Csv),
            "jsonl" | "json" => Some(ReportFormat::Jsonl),
            _ => None,
        }
    }
}

/// Writes `table` to `path`. An empty table is an error.
pub fn emit_report(table: &ResultTable, path: &Path, format: ReportFormat) -> Result<()> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        ReportFormat::Csv => table.write_csv(f),
        ReportFormat::Jsonl => table.write_jsonl(f),
    }
}

pub fn parse_report(path: &Path, format: ReportFormat) -> Result<ResultTable> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    match format {
        ReportFormat::Csv => ResultTable::read_csv(f),
        ReportFormat::Jsonl => ResultTable::read_jsonl(f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ResultTable {
        ResultTable {
            rows: vec![
                ResultRow {
                    label: "K=4".into(),
                    stat: "seed=0".into(),
                    tau: 0.0,
                    accept_a: 1.0 / 3.0,
                    r_measured: None,
                    r_modeled: 2.123456789,
                    target_flops_per_round: 123456.0,
                    draft_flops_per_round: 7.0e3,
                    draft_passes_per_round: 2.0,
                    status: RowStatus::Ok,
                }
                .rounded(),
                ResultRow {
                    r_measured: Some(1.5),
                    ..ResultRow::empty("a,b", "mean", 1.0, RowStatus::Diverged)
                },
            ],
        }
    }

    #[test]
    fn csv_and_jsonl_round_trip() {
        let t = sample();
        assert_eq!(t.rows[0].accept_a, 0.333333);
        let csv = t.to_string(ReportFormat::Csv).unwrap();
        assert!(csv.contains("0.333333"));
        assert!(csv.contains("2.000000"));
        assert_eq!(ResultTable::read_csv(csv.as_bytes()).unwrap(), t);
        let jl = t.to_string(ReportFormat::Jsonl).unwrap();
        assert_eq!(jl.lines().count(), 2);
        assert_eq!(ResultTable::read_jsonl(jl.as_bytes()).unwrap(), t);
    }

    #[test]
    fn empty_table_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        assert!(matches!(
            emit_report(&ResultTable::default(), &p, ReportFormat::Csv),
            Err(Error::EmptyTable)
        ));
        emit_report(&sample(), &p, ReportFormat::Csv).unwrap();
        assert_eq!(parse_report(&p, ReportFormat::Csv).unwrap(), sample());
    }
}
