use std::fmt::Write as _;
use std::io::Write;

use super::metrics::MetricReport;
use super::protocol::Protocol;
use crate::Result;

/// Models as rows, horizon cells as column groups, in the order the
/// reports first name them.
pub fn format_table(protocol: Protocol, reports: &[MetricReport]) -> String {
    let mut models: Vec<&str> = Vec::new();
    for r in reports {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let cells = protocol.cells();
    let metrics: &[&str] = if protocol.reports_r2() {
        &["R2", "MAE", "RMSE"]
    } else {
        &["MAE", "RMSE"]
    };
    let name_w = models.iter().map(|m| m.len()).max().unwrap_or(0).max(5);
    let col_w = 8;
    let group_w = metrics.len() * (col_w + 1) - 1;

    let mut out = String::new();
    let _ = write!(out, "{:name_w$}", "");
    for (label, _) in cells {
        let _ = write!(out, " | {label:^group_w$}");
    }
    out.push('\n');
    let _ = write!(out, "{:name_w$}", "Model");
    for _ in cells {
        out.push_str(" |");
        for m in metrics {
            let _ = write!(out, " {m:>col_w$}");
        }
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + cells.len() * (group_w + 3)));
    out.push('\n');
    for model in models {
        let _ = write!(out, "{model:name_w$}");
        for (label, _) in cells {
            out.push_str(" |");
            let r = reports.iter().find(|r| r.model == model && r.horizon == label);
            for m in metrics {
                let v = r.and_then(|r| match *m {
                    "R2" => r.r2,
                    "MAE" => Some(r.mae),
                    _ => Some(r.rmse),
                });
                match (v, *m) {
                    (Some(v), "R2") => {
                        let _ = write!(out, " {v:>col_w$.4}");
                    }
                    (Some(v), _) => {
                        let _ = write!(out, " {v:>col_w$.2}");
                    }
                    (None, _) => {
                        let _ = write!(out, " {:>col_w$}", "-");
                    }
                }
            }
        }
        out.push('\n');
    }
    out
}

/// `model,horizon,r2,mae,rmse,n`; R² is empty where not reported.
pub fn write_reports_csv<W: Write>(reports: &[MetricReport], mut w: W) -> Result<()> {
    writeln!(w, "model,horizon,r2,mae,rmse,n")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.model,
            r.horizon,
            r.r2.map(|v| v.to_string()).unwrap_or_default(),
            r.mae,
            r.rmse,
            r.n
        )?;
    }
    Ok(())
}
