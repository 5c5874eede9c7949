use std::fmt::Write;

use super::sweep::SweepResult;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line plot of mean `ΔF` against `L` (log₂ axis), one line per arm.
pub fn depth_svg(result: &SweepResult) -> String {
    let ls = &result.config.l_values;
    let x_lo = (ls[0] as f64).log2();
    let x_hi = (ls[ls.len() - 1] as f64).log2().max(x_lo + 1.0);
    let means: Vec<f64> = result.cells.iter().filter_map(|c| c.mean).collect();
    let y_hi = means.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE) * 1.1;

    let sx = |l: usize| PAD + ((l as f64).log2() - x_lo) / (x_hi - x_lo) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - v / y_hi * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    for &l in ls {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{l}</text>"#, sx(l), H - PAD + 16.0);
    }
    for k in 0..=4 {
        let v = y_hi * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3e}</text>"#, PAD - 4.0, sy(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">L (sub-layers)</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">mean ΔF</text>"#, H / 2.0, H / 2.0);

    for (i, arm) in result.config.arms.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = result
            .cells_for(*arm)
            .iter()
            .filter_map(|c| c.mean.map(|m| format!("{:.1},{:.1}", sx(c.l), sy(m))))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{arm}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
