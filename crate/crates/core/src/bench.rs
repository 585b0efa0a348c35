//! Fusion-versus-single-source benchmark.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::data::Split;
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::model::Variant;
use crate::train::{evaluate, train, FusedDataset, TrainConfig};

/// Training settings used for the synthetic benchmark.
pub fn benchmark_train_config(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::classification(variant);
    cfg.d = 16;
    cfg.learning_rate = 1e-3;
    cfg
}

/// Every listed method plus one single-source baseline per source.
pub fn benchmark_methods(methods: &[Variant], data: &FusedDataset) -> Vec<Variant> {
    let mut all: Vec<Variant> = methods.to_vec();
    for id in &data.source_ids {
        let v = Variant::Single(id.clone());
        if !all.contains(&v) {
            all.push(v);
        }
    }
    all
}

/// Trains each method from the same seed on the train split and reports
/// test-split metrics, in method order.
pub fn run_benchmark(
    data: &FusedDataset,
    methods: &[Variant],
    base: &TrainConfig,
) -> Result<Vec<MetricReport>> {
    methods
        .iter()
        .map(|v| {
            let cfg = TrainConfig {
                variant: v.clone(),
                ..base.clone()
            };
            let out = train(data, &cfg)?;
            let mut report = evaluate(&out.model, data, Split::Test)?;
            report.method = v.to_string();
            Ok(report)
        })
        .collect()
}

/// Aligned-column text table of benchmark reports.
pub fn format_table(reports: &[MetricReport]) -> alloc::string::String {
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    let width = reports
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>8}  {:>6}  {:>6}  {:>6}\n",
        "method", "n", "loss", "acc", "auc", "pcc"
    );
    for r in reports {
        out += &format!(
            "{:<width$}  {:>6}  {:>8.4}  {:>6}  {:>6}  {:>6}\n",
            r.method,
            r.n,
            r.loss,
            fmt(r.acc),
            fmt(r.auc),
            fmt(r.pcc)
        );
    }
    out
}
