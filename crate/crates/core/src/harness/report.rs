//! Run comparison: one CSV row per run directory with final accuracy,
//! rounds-to-target, and total uplink.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::run::rounds_to_target_series;

/// Parsed summary of one run directory.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: String,
    pub scheme: String,
    pub final_round: usize,
    pub final_mean_accuracy: f64,
    pub final_std_accuracy: f64,
    pub rounds_to_target: Option<usize>,
    pub total_uplink_params: u128,
    pub total_uplink_image_scalars: u128,
    pub total_uplink: u128,
}

fn parse_rounds_csv(text: &str) -> Result<Vec<(usize, f64, f64)>> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 7 {
            return Err(Error::Data(format!("short rounds.csv row: {line}")));
        }
        let round: usize = cols[0]
            .parse()
            .map_err(|_| Error::Data(format!("bad round in: {line}")))?;
        let mean: f64 = cols[4]
            .parse()
            .map_err(|_| Error::Data(format!("bad mean in: {line}")))?;
        let std: f64 = cols[5]
            .parse()
            .map_err(|_| Error::Data(format!("bad std in: {line}")))?;
        rows.push((round, mean, std));
    }
    if rows.is_empty() {
        return Err(Error::Data("rounds.csv has no data rows".into()));
    }
    Ok(rows)
}

fn parse_ledger_csv(text: &str) -> Result<(u128, u128)> {
    let mut params = 0u128;
    let mut images = 0u128;
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 4 {
            return Err(Error::Data(format!("short ledger.csv row: {line}")));
        }
        params += cols[1]
            .parse::<u128>()
            .map_err(|_| Error::Data(format!("bad params in: {line}")))?;
        images += cols[2]
            .parse::<u128>()
            .map_err(|_| Error::Data(format!("bad image_scalars in: {line}")))?;
    }
    Ok((params, images))
}

fn summarize(dir: &Path, target: Option<f64>) -> Result<RunSummary> {
    let rounds_text = std::fs::read_to_string(dir.join("rounds.csv"))?;
    let rows = parse_rounds_csv(&rounds_text)?;
    let (params, images) = match std::fs::read_to_string(dir.join("ledger.csv")) {
        Ok(text) => parse_ledger_csv(&text)?,
        Err(_) => (0, 0),
    };
    let scheme = std::fs::read_to_string(dir.join("config.echo.json"))
        .ok()
        .and_then(|text| serde_json::from_str::<serde_json::Value>(&text).ok())
        .and_then(|v| v.get("scheme").and_then(|s| s.as_str().map(String::from)))
        .unwrap_or_else(|| "unknown".into());
    let series: Vec<(usize, f64)> = rows.iter().map(|(r, m, _)| (*r, *m)).collect();
    let last = rows.last().expect("non-empty by parse");
    Ok(RunSummary {
        dir: dir.display().to_string(),
        scheme,
        final_round: last.0,
        final_mean_accuracy: last.1,
        final_std_accuracy: last.2,
        rounds_to_target: target.and_then(|t| rounds_to_target_series(&series, t)),
        total_uplink_params: params,
        total_uplink_image_scalars: images,
        total_uplink: params + images,
    })
}

pub const REPORT_CSV_HEADER: &str = "run,scheme,final_round,final_mean_accuracy,final_std_accuracy,rounds_to_target,total_uplink_params,total_uplink_image_scalars,total_uplink";

/// Build the comparison CSV over run directories. Directories with missing
/// or unreadable metrics are skipped with a warning on stderr.
pub fn report(dirs: &[PathBuf], target: Option<f64>) -> Result<String> {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for dir in dirs {
        match summarize(dir, target) {
            Ok(s) => {
                let rtt = s
                    .rounds_to_target
                    .map(|r| r.to_string())
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    s.dir,
                    s.scheme,
                    s.final_round,
                    s.final_mean_accuracy,
                    s.final_std_accuracy,
                    rtt,
                    s.total_uplink_params,
                    s.total_uplink_image_scalars,
                    s.total_uplink
                ));
            }
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", dir.display());
            }
        }
    }
    Ok(out)
}
