//! Evaluation reports as CSV, plain-text tables and an SVG line plot.

use std::fmt::Write as _;

use leafwood_core::metrics::{DecileRow, EvaluationReport};

pub const DECILE_HEADER: &str = "decile,min_length,max_length,count,accuracy,wood_fraction";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// `metric,value` rows.
pub fn report_csv(r: &EvaluationReport) -> String {
    let c = &r.confusion;
    let mut s = String::from("metric,value\n");
    for (k, v) in [
        ("points", r.points.to_string()),
        ("tp", c.tp.to_string()),
        ("fp", c.fp.to_string()),
        ("tn", c.tn.to_string()),
        ("fn", c.fn_.to_string()),
        ("ba", r.ba.to_string()),
        ("precision", r.precision.to_string()),
        ("recall", r.recall.to_string()),
        ("f1", r.f1.to_string()),
        ("bap", opt(r.bap)),
        ("unreachable", r.unreachable_count.to_string()),
    ] {
        writeln!(s, "{k},{v}").unwrap();
    }
    s
}

pub fn deciles_csv(rows: &[DecileRow]) -> String {
    let mut s = format!("{DECILE_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.decile, r.min_length, r.max_length, r.count, r.accuracy, r.wood_fraction
        )
        .unwrap();
    }
    s
}

pub fn parse_deciles_csv(text: &str) -> Result<Vec<DecileRow>, String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == DECILE_HEADER => {}
        _ => return Err(format!("expected header `{DECILE_HEADER}`")),
    }
    lines
        .map(|(no, line)| {
            let c: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |what: &str| format!("line {}: bad {what}", no + 1);
            if c.len() != 6 {
                return Err(bad("cell count"));
            }
            Ok(DecileRow {
                decile: c[0].parse().map_err(|_| bad("decile"))?,
                min_length: c[1].parse().map_err(|_| bad("min_length"))?,
                max_length: c[2].parse().map_err(|_| bad("max_length"))?,
                count: c[3].parse().map_err(|_| bad("count"))?,
                accuracy: c[4].parse().map_err(|_| bad("accuracy"))?,
                wood_fraction: c[5].parse().map_err(|_| bad("wood_fraction"))?,
            })
        })
        .collect()
}

pub fn report_text(r: &EvaluationReport) -> String {
    let c = &r.confusion;
    let mut s = String::new();
    writeln!(s, "points       {}", r.points).unwrap();
    writeln!(s, "confusion    tp {}  fp {}  tn {}  fn {}", c.tp, c.fp, c.tn, c.fn_).unwrap();
    writeln!(s, "BA           {:.4}", r.ba).unwrap();
    writeln!(s, "precision    {:.4}", r.precision).unwrap();
    writeln!(s, "recall       {:.4}", r.recall).unwrap();
    writeln!(s, "F1           {:.4}", r.f1).unwrap();
    match r.bap {
        Some(b) => writeln!(s, "BAP          {b:.4}  ({} unreachable points excluded)", r.unreachable_count).unwrap(),
        None => writeln!(s, "BAP          n/a (no path lengths)").unwrap(),
    }
    if !r.decile_rows.is_empty() {
        s.push('\n');
        s.push_str(&deciles_text(&r.decile_rows));
    }
    s
}

pub fn deciles_text(rows: &[DecileRow]) -> String {
    let mut s = String::from("decile  path length (m)      points  accuracy  wood\n");
    for r in rows {
        writeln!(
            s,
            "{:>6}  {:>7.2} - {:>7.2}  {:>8}  {:>8.4}  {:>5.3}",
            r.decile, r.min_length, r.max_length, r.count, r.accuracy, r.wood_fraction
        )
        .unwrap();
    }
    s
}

const COLORS: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

/// Accuracy against path-length decile, one line per named series.
pub fn decile_svg(series: &[(String, Vec<DecileRow>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 160.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let lo = series
        .iter()
        .flat_map(|(_, rows)| rows.iter().map(|r| r.accuracy))
        .fold(1.0f64, f64::min);
    let y_min = (lo * 10.0).floor() / 10.0;
    let y_min = if y_min >= 1.0 { 0.9 } else { y_min.max(0.0) };
    let x = |d: f64| left + (d - 1.0) / 9.0 * pw;
    let y = |a: f64| top + (1.0 - (a - y_min) / (1.0 - y_min)) * ph;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{left},{top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    )
    .unwrap();
    for d in 1..=10 {
        let xd = x(d as f64);
        writeln!(s, r#"<text x="{xd}" y="{}" text-anchor="middle">{d}</text>"#, top + ph + 18.0).unwrap();
    }
    for i in 0..=4 {
        let a = y_min + (1.0 - y_min) * i as f64 / 4.0;
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{a:.2}</text>"#, left - 6.0, y(a) + 4.0).unwrap();
        writeln!(s, r##"<line x1="{left}" x2="{0}" y1="{1}" y2="{1}" stroke="#ddd"/>"##, left + pw, y(a)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">path length decile</text>"#, left + pw / 2.0, h - 10.0).unwrap();
    writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {0})" text-anchor="middle">accuracy</text>"#, top + ph / 2.0).unwrap();
    for (n, (name, rows)) in series.iter().enumerate() {
        let color = COLORS[n % COLORS.len()];
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.decile as f64), y(r.accuracy)))
            .collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" ")).unwrap();
        let ly = top + 16.0 * n as f64;
        writeln!(s, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - right + 15.0, w - right + 35.0).unwrap();
        let label: String = name.chars().filter(|c| !"<>&\"".contains(*c)).collect();
        writeln!(s, r#"<text x="{}" y="{}">{label}</text>"#, w - right + 40.0, ly + 4.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
