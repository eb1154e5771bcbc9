use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::SimulationReport;

pub const CSV_HEADER: &str = "model,n_items,length,rmse,bias,r,efficiency";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "table" | "text" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// The summary columns of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub n_items: usize,
    pub length: f64,
    pub rmse: f64,
    pub bias: f64,
    pub r: f64,
    pub efficiency: Option<f64>,
}

impl From<&SimulationReport> for ReportRow {
    fn from(rep: &SimulationReport) -> Self {
        ReportRow {
            model: rep.model.to_string(),
            n_items: rep.n_items,
            length: rep.length,
            rmse: rep.rmse,
            bias: rep.bias,
            r: rep.r,
            efficiency: rep.efficiency,
        }
    }
}

pub fn emit_report(reports: &[SimulationReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER.split(',')).expect("in-memory write");
            for rep in reports {
                let row = ReportRow::from(rep);
                w.write_record([
                    row.model,
                    row.n_items.to_string(),
                    row.length.to_string(),
                    row.rmse.to_string(),
                    row.bias.to_string(),
                    row.r.to_string(),
                    row.efficiency.map(|e| e.to_string()).unwrap_or_default(),
                ])
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("flush to memory")).expect("ascii output")
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
            s.push('\n');
            s
        }
        ReportFormat::Table => table(reports),
    }
}

fn table(reports: &[SimulationReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:>8} {:>7} {:>7} {:>7} {:>7} {:>11}",
        "Model", "N Items", "Length", "RMSE", "Bias", "r", "Efficiency"
    );
    for rep in reports {
        let eff = rep
            .efficiency
            .map_or_else(|| "-".to_string(), |e| format!("{:.1}%", 100.0 * e));
        let _ = writeln!(
            out,
            "{:<6} {:>8} {:>7.1} {:>7.3} {:>7.3} {:>7.3} {:>11}",
            rep.model.to_string(),
            rep.n_items,
            rep.length,
            rep.rmse,
            rep.bias,
            rep.r,
            eff
        );
    }
    for rep in reports {
        let _ = writeln!(
            out,
            "\n[{}] theta ~ {}; {} examinees x {} replications, seed {}",
            rep.name, rep.distribution_label, rep.n_examinees, rep.replications, rep.seed
        );
        let _ = writeln!(out, "  MAE {:.3}  mean SE {:.3}", rep.mae, rep.mean_se);
        for (name, ci) in &rep.intervals {
            let _ = writeln!(out, "  {name:<7} {:.4}  95% CI [{:.4}, {:.4}]", ci.mean, ci.lo, ci.hi);
        }
        if let Some(lin) = rep.linear_length {
            let _ = writeln!(out, "  linear comparator length {lin:.1}");
        }
        let _ = writeln!(
            out,
            "  exposure max {:.3}, mean {:.3}, unused items {}",
            rep.exposure.max_rate, rep.exposure.mean_rate, rep.exposure.unused
        );
        for (g, share) in &rep.group_shares {
            let _ = writeln!(out, "  group {g}: {:.3}", share);
        }
        if let Some(c) = &rep.classification {
            let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                out,
                "  classification accuracy {:.3}, sensitivity {}, specificity {}",
                c.accuracy,
                fmt(c.sensitivity),
                fmt(c.specificity)
            );
        }
        if let Some(r) = rep.test_retest_r {
            let _ = writeln!(out, "  test-retest r {r:.3}");
        }
    }
    out
}

/// Reads back the CSV written by [`emit_report`].
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>, csv::Error> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    rd.deserialize().collect()
}
