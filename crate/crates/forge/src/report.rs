//! Text rendering of training metrics.

use std::fmt::Write;

use igpo_core::train::StepMetrics;

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

/// One row per `every`-th step, plus the last.
pub fn render_table(rows: &[StepMetrics], every: usize) -> String {
    let every = every.max(1);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6} {:>8} {:>9} {:>9} {:>7} {:>7} {:>6} {:>7} {:>7}",
        "step", "success", "mean_J", "grad", "s", "fmt_err", "turns", "browse", "eval"
    );
    for (i, m) in rows.iter().enumerate() {
        if i % every != 0 && i + 1 != rows.len() {
            continue;
        }
        let _ = writeln!(
            out,
            "{:>6} {:>8.3} {:>9.4} {:>9.4} {:>7} {:>7.3} {:>6.2} {:>7} {:>7}",
            m.step,
            m.success_rate,
            m.mean_j,
            m.grad_norm,
            opt(m.s, 3),
            m.format_error_rate,
            m.mean_turns,
            opt(m.browse_ratio, 3),
            opt(m.eval_success, 3),
        );
    }
    out
}
