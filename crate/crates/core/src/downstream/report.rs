use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// One fine-tuning result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub variant: String,
    pub task: String,
    pub fraction: f64,
    pub seed: u64,
    pub metric_name: String,
    pub value: f64,
    pub best_epoch: usize,
}

/// Plain-text table: one row per variant, one column per task and training
/// fraction, cells are seed means in percent.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut variants: Vec<&str> = Vec::new();
    let mut columns: Vec<(&str, &str, u64)> = Vec::new();
    let mut cells: BTreeMap<(&str, usize), Vec<f64>> = BTreeMap::new();
    for r in reports {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
        let key = (r.task.as_str(), r.metric_name.as_str(), r.fraction.to_bits());
        let col = match columns.iter().position(|c| *c == key) {
            Some(i) => i,
            None => {
                columns.push(key);
                columns.len() - 1
            }
        };
        cells.entry((r.variant.as_str(), col)).or_default().push(r.value);
    }
    let headers: Vec<String> = columns
        .iter()
        .map(|&(task, metric, bits)| format!("{task} {metric} @{}", f64::from_bits(bits)))
        .collect();
    let name_w = variants.iter().map(|v| v.len()).chain(["variant".len()]).max().unwrap_or(7);
    let widths: Vec<usize> = headers.iter().map(|h| h.len().max(6)).collect();

    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "variant");
    for (h, w) in headers.iter().zip(&widths) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    let total = name_w + widths.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for v in &variants {
        let _ = write!(out, "{v:<name_w$}");
        for (col, w) in widths.iter().enumerate() {
            let cell = match cells.get(&(*v, col)) {
                Some(vals) => format!("{:.1}", 100.0 * vals.iter().sum::<f64>() / vals.len() as f64),
                None => "-".to_string(),
            };
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(variant: &str, fraction: f64, seed: u64, value: f64) -> MetricsReport {
        MetricsReport {
            variant: variant.into(),
            task: "keyword-class".into(),
            fraction,
            seed,
            metric_name: "accuracy".into(),
            value,
            best_epoch: 1,
        }
    }

    #[test]
    fn table_averages_seeds() {
        let t = render_table(&[
            report("scratch", 1.0, 0, 0.5),
            report("scratch", 1.0, 1, 0.7),
            report("seq-mlm", 1.0, 0, 0.9),
            report("seq-mlm", 0.1, 0, 0.8),
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("variant"));
        assert!(lines[2].starts_with("scratch") && lines[2].contains("60.0") && lines[2].trim_end().ends_with('-'));
        assert!(lines[3].contains("90.0") && lines[3].contains("80.0"));
        let widths: Vec<usize> = lines.iter().map(|l| l.len()).collect();
        assert!(widths.iter().all(|&w| w == widths[0]));
    }

    #[test]
    fn report_json_keys() {
        let json = serde_json::to_value(report("tok", 0.5, 2, 0.25)).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            ["best_epoch", "fraction", "metric_name", "seed", "task", "value", "variant"]
        );
    }
}
