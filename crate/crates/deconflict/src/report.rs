//! Aligned text tables for classification and closed-loop results.

use deconflict_core::alignment::ClassificationMetrics;
use deconflict_core::engine::{BatchSummary, Stat};

/// `mean ± std` with a fixed number of decimals.
pub fn pm(s: &Stat, places: usize) -> String {
    if s.n == 0 || s.mean.is_nan() {
        return "-".into();
    }
    format!("{:.*} ± {:.*}", places, s.mean, places, s.std)
}

fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                s.push_str(&format!("{c:<w$}"));
            } else {
                s.push_str(&format!("  {c:>w$}"));
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Accuracy / Precision / Recall / F1 in percent, one row per model.
pub fn classification_table(rows: &[(String, ClassificationMetrics)]) -> String {
    let pct = |x: f64| format!("{:.2}", 100.0 * x);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, m)| vec![name.clone(), pct(m.accuracy), pct(m.precision), pct(m.recall), pct(m.f1)])
        .collect();
    render(&["Model", "Accuracy", "Precision", "Recall", "F1-score"], &body)
}

/// NMACs per episode by pair class, success rate and mean flight time, one
/// row per scenario. Flight time is shown in seconds and minutes.
pub fn closed_loop_table(rows: &[(String, BatchSummary)]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, s)| {
            let minutes = Stat {
                mean: s.mean_flight_time_s.mean / 60.0,
                std: s.mean_flight_time_s.std / 60.0,
                n: s.mean_flight_time_s.n,
            };
            vec![
                name.clone(),
                pm(&s.nmac_all, 2),
                pm(&s.nmac_ll, 2),
                pm(&s.nmac_lr, 2),
                pm(&s.nmac_rr, 2),
                pm(&s.success_rate, 2),
                pm(&s.mean_flight_time_s, 1),
                pm(&minutes, 2),
            ]
        })
        .collect();
    render(&["Scenario", "All", "L-L", "L-R", "R-R", "SR", "Time (s)", "Time (min)"], &body)
}
