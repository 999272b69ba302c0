//! Grouped bar chart of per-task forgetting.

use std::fmt::Write;

use lgcap_core::forgetting::ForgettingSummary;

const BAR: f64 = 14.0;
const GAP: f64 = 18.0;
const HEIGHT: f64 = 240.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One group per task (all but the last), one bar per metric. Undefined
/// cells are drawn as an `N/A` label instead of a bar.
pub fn forgetting_chart(task_names: &[String], summaries: &[ForgettingSummary]) -> String {
    let tasks = summaries.iter().map(|s| s.per_task.len()).max().unwrap_or(0);
    let per_group = summaries.len() as f64 * BAR + GAP;
    let width = 2.0 * MARGIN + tasks as f64 * per_group + 120.0;
    let max_abs = summaries
        .iter()
        .flat_map(|s| s.per_task.iter().flatten())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let scale = (HEIGHT / 2.0 - 10.0) / max_abs;
    let zero = MARGIN + HEIGHT / 2.0;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{:.0}" font-family="sans-serif" font-size="11">"#,
        HEIGHT + 2.0 * MARGIN
    );
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="20">Forgetting (%) per task</text>"#);
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN}" y1="{zero}" x2="{:.1}" y2="{zero}" stroke="black"/>"#,
        MARGIN + tasks as f64 * per_group
    );
    let _ = writeln!(out, r#"<text x="4" y="{:.1}">{max_abs:.1}</text>"#, zero - max_abs * scale + 4.0);
    let _ = writeln!(out, r#"<text x="4" y="{:.1}">-{max_abs:.1}</text>"#, zero + max_abs * scale + 4.0);
    for t in 0..tasks {
        let gx = MARGIN + t as f64 * per_group + GAP / 2.0;
        for (m, s) in summaries.iter().enumerate() {
            let x = gx + m as f64 * BAR;
            match s.per_task.get(t).copied().flatten() {
                Some(v) => {
                    let h = v.abs() * scale;
                    let y = if v >= 0.0 { zero - h } else { zero };
                    let _ = writeln!(
                        out,
                        r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="{}"><title>{} {v:.2}</title></rect>"#,
                        BAR - 2.0,
                        COLORS[m % COLORS.len()],
                        esc(&s.metric)
                    );
                }
                None => {
                    let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" font-size="8">N/A</text>"#, zero - 4.0);
                }
            }
        }
        let name = task_names.get(t).map_or_else(|| t.to_string(), |n| esc(n));
        let _ = writeln!(out, r#"<text x="{gx:.1}" y="{:.1}">{name}</text>"#, MARGIN + HEIGHT + 16.0);
    }
    let lx = MARGIN + tasks as f64 * per_group + 10.0;
    for (m, s) in summaries.iter().enumerate() {
        let y = MARGIN + m as f64 * 16.0;
        let _ = writeln!(out, r#"<rect x="{lx:.1}" y="{y:.1}" width="10" height="10" fill="{}"/>"#, COLORS[m % COLORS.len()]);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 14.0, y + 9.0, esc(&s.metric));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bars_and_na_cells() {
        let s = vec![
            ForgettingSummary { metric: "bleu1".into(), per_task: vec![Some(-10.0), None], mean: Some(-10.0), undefined: 1 },
            ForgettingSummary { metric: "cider".into(), per_task: vec![Some(5.0), Some(0.0)], mean: Some(2.5), undefined: 0 },
        ];
        let svg = forgetting_chart(&["a<b".into(), "c".into(), "d".into()], &s);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<rect").count(), 3 + 2);
        assert!(svg.contains("N/A") && svg.contains("a&lt;b"));
        assert_eq!(svg, forgetting_chart(&["a<b".into(), "c".into(), "d".into()], &s));
    }
}
