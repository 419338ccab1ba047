//! Metrics, the short- and long-term protocols, baselines, attention
//! analytics and hidden-station errors.

mod attention;
mod baselines;
mod hidden;
mod metrics;
mod protocol;
mod report;

pub use attention::{attention_report, average_maps, pca, summarize_heads, two_means, AttentionReport, Pca};
pub use baselines::{
    run_baseline, BaselineKind, BaselineResult, BaselineSettings, LinearRegression, Persistence, RIDGE,
};
pub use hidden::{hidden_station_errors, write_station_errors, HiddenErrors, StationError};
pub use metrics::{error_metrics, metrics, MetricReport};
pub use protocol::{
    collect_traces, daily_means, eval_long_term, eval_protocol, eval_short_term, evaluate_pooled, pool,
    protocol_reports, Forecaster, Protocol, Trace,
};
pub use report::{format_table, write_reports_csv};

#[cfg(test)]
mod tests;
