//! CSV, text-table and SVG output.

use std::fmt::Write as _;
use std::io::Write;

use itm_core::eval::RetrievalReport;
use itm_core::trainer::EpochMetrics;

use crate::error::Result;

pub const METRICS_HEADER: [&str; 9] =
    ["epoch", "train_loss", "val_r1_i2t", "val_r5_i2t", "val_r10_i2t", "val_r1_t2i", "val_r5_t2i", "val_r10_t2i", "val_rsum"];

pub const REPORT_HEADER: [&str; 7] = ["i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10", "rsum"];

/// Per-epoch training log. Recalls are fractions, rSum is in percentage
/// points; floats use the shortest exact representation.
pub fn write_metrics<W: Write>(log: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for m in log {
        let mut row = vec![m.epoch.to_string(), m.train_loss.to_string()];
        row.extend(m.val.i2t.iter().chain(&m.val.t2i).map(f64::to_string));
        row.push(m.val.rsum().to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn percent_cells(r: &RetrievalReport) -> Vec<String> {
    let mut cells: Vec<String> = r.i2t.iter().chain(&r.t2i).map(|x| format!("{:.2}", 100.0 * x)).collect();
    cells.push(format!("{:.2}", r.rsum()));
    cells
}

/// Labeled retrieval reports, one row each, values in percentage points.
pub fn write_report_csv<W: Write>(first_column: &str, rows: &[(String, RetrievalReport)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![first_column];
    header.extend(REPORT_HEADER);
    w.write_record(&header)?;
    for (label, r) in rows {
        let mut row = vec![label.clone()];
        row.extend(percent_cells(r));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Aligned text table grouped by retrieval direction.
pub fn format_table(first_column: &str, rows: &[(String, RetrievalReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).chain([first_column.len()]).max().unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(s, "{:label_w$}  {:^22}  {:^22}  {:>7}", "", "Image-to-Text", "Text-to-Image", "");
    let _ = writeln!(s, "{:label_w$}  {:>6} {:>7} {:>7}  {:>6} {:>7} {:>7}  {:>7}", first_column, "R@1", "R@5", "R@10", "R@1", "R@5", "R@10", "rSum");
    for (label, r) in rows {
        let c = percent_cells(r);
        let _ = writeln!(s, "{label:label_w$}  {:>6} {:>7} {:>7}  {:>6} {:>7} {:>7}  {:>7}", c[0], c[1], c[2], c[3], c[4], c[5], c[6]);
    }
    s
}

/// rSum against k as a standalone SVG polyline chart.
pub fn sweep_svg(points: &[(usize, f64)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let kmin = points.iter().map(|p| p.0).min().unwrap_or(0) as f64;
    let kmax = points.iter().map(|p| p.0).max().unwrap_or(1) as f64;
    let lo = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1.0 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let x = |k: f64| pad + (w - 2.0 * pad) * if kmax > kmin { (k - kmin) / (kmax - kmin) } else { 0.5 };
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, h - pad, w - pad);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">k</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">rSum</text>"#, h / 2.0, h / 2.0);
    for (label, v) in [(format!("{hi:.1}"), hi), (format!("{lo:.1}"), lo)] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{label}</text>"#, pad - 4.0, y(v) + 4.0);
    }
    let coords: Vec<String> = points.iter().map(|&(k, v)| format!("{:.1},{:.1}", x(k as f64), y(v))).collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, coords.join(" "));
    for &(k, v) in points {
        let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1f77b4"/>"##, x(k as f64), y(v));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{k}</text>"#, x(k as f64), h - pad + 16.0);
    }
    s.push_str("</svg>\n");
    s
}
