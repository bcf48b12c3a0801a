//! Minimal self-contained SVG line chart for sequential traces.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::evaluation::TraceRow;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Accuracy per group over batch index. Batches processed with at least
/// one class removed are shaded, darker as more classes are removed.
pub fn trace_svg(rows: &[TraceRow], windowed: bool) -> String {
    let last_batch = rows.iter().map(|r| r.batch).max().unwrap_or(0).max(1) as f64;
    let x = |b: f64| MARGIN + b / last_batch * (WIDTH - 2.0 * MARGIN);
    let y = |acc: f64| HEIGHT - MARGIN - acc / 100.0 * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    // Removal phases.
    let mut phases: BTreeMap<usize, usize> = BTreeMap::new();
    for r in rows {
        let removed = r.removed.split(';').filter(|s| !s.is_empty()).count();
        phases.insert(r.batch, removed);
    }
    let max_removed = phases.values().copied().max().unwrap_or(0).max(1) as f64;
    for (b, n) in &phases {
        if *n == 0 {
            continue;
        }
        let (x0, x1) = (x(*b as f64 - 0.5).max(MARGIN), x(*b as f64 + 0.5).min(WIDTH - MARGIN));
        let _ = writeln!(
            svg,
            r##"<rect x="{x0:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#8a2be2" fill-opacity="{:.2}"/>"##,
            MARGIN,
            x1 - x0,
            HEIGHT - 2.0 * MARGIN,
            0.08 + 0.12 * *n as f64 / max_removed
        );
    }

    // Axes and grid.
    for tick in (0..=100).step_by(25) {
        let ty = y(tick as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN}" y1="{ty:.1}" x2="{:.1}" y2="{ty:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"##,
            WIDTH - MARGIN,
            MARGIN - 6.0,
            ty + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r##"<line x1="{MARGIN}" y1="{b:.1}" x2="{:.1}" y2="{b:.1}" stroke="#333"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b:.1}" stroke="#333"/>"##,
        WIDTH - MARGIN,
        b = HEIGHT - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">batch</text><text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">accuracy (%)</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    // One polyline per group.
    let mut groups: Vec<&str> = Vec::new();
    for r in rows {
        if !groups.contains(&r.group.as_str()) {
            groups.push(&r.group);
        }
    }
    for (i, g) in groups.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = rows
            .iter()
            .filter(|r| r.group == *g)
            .filter_map(|r| {
                let acc = if windowed { r.window_accuracy } else { Some(r.accuracy) };
                acc.filter(|a| a.is_finite())
                    .map(|a| format!("{:.1},{:.1}", x(r.batch as f64), y(a)))
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{g}</text>"#,
            WIDTH - MARGIN - 90.0,
            WIDTH - MARGIN - 70.0,
            WIDTH - MARGIN - 64.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(batch: usize, group: &str, acc: f64, removed: &str) -> TraceRow {
        TraceRow {
            batch,
            group: group.into(),
            correct: 0,
            total: 1,
            accuracy: acc,
            window_accuracy: Some(acc),
            removed: removed.into(),
        }
    }

    #[test]
    fn one_polyline_per_group_and_shaded_phases() {
        let rows = vec![
            row(0, "retained", 100.0, ""),
            row(0, "class_0", 100.0, ""),
            row(1, "retained", 100.0, "0"),
            row(1, "class_0", 0.0, "0"),
        ];
        let svg = trace_svg(&rows, true);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("#8a2be2").count(), 1);
        assert!(!svg.contains("href"));
    }
}
