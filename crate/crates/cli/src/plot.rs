//! SVG chart of a metrics CSV: losses (top panel, EDT weight on a right-hand
//! axis) and error percentages (bottom panel), one x tick per epoch.

use std::fmt::Write as _;

use cdkd::train::EpochMetrics;

const W: f64 = 820.0;
const PANEL_H: f64 = 260.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 70.0;
const TOP: f64 = 40.0;
const GAP: f64 = 70.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    values: Vec<f64>,
}

struct Panel {
    y0: f64,
    min: f64,
    max: f64,
}

impl Panel {
    fn y(&self, v: f64) -> f64 {
        let t = if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            0.5
        };
        self.y0 + PANEL_H * (1.0 - t)
    }
}

fn x_of(i: usize, n: usize) -> f64 {
    let span = W - LEFT - RIGHT;
    if n <= 1 {
        LEFT + span / 2.0
    } else {
        LEFT + span * i as f64 / (n - 1) as f64
    }
}

fn range(series: &[&Series]) -> (f64, f64) {
    let vals = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    (lo.min(0.0), if hi > lo.min(0.0) { hi } else { lo.min(0.0) + 1.0 })
}

fn polyline(out: &mut String, s: &Series, panel: &Panel, n: usize, dashed: bool) {
    let pts: Vec<String> = s
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i, n), panel.y(v)))
        .collect();
    let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
    let _ = writeln!(
        out,
        r#"<polyline class="series" data-label="{}" fill="none" stroke="{}" stroke-width="2"{dash} points="{}"/>"#,
        s.label,
        s.color,
        pts.join(" ")
    );
}

fn axis_labels(out: &mut String, panel: &Panel, x: f64, anchor: &str, class: &str) {
    for k in 0..=4 {
        let v = panel.min + (panel.max - panel.min) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text class="{class}" x="{x:.2}" y="{:.2}" font-size="11" text-anchor="{anchor}">{}</text>"#,
            panel.y(v) + 4.0,
            fmt_tick(v)
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, items: &[(&str, &str)], y: f64) {
    let mut x = LEFT;
    for (label, color) in items {
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="14" height="4" fill="{color}"/><text x="{:.2}" y="{:.2}" font-size="11">{label}</text>"#,
            y - 4.0,
            x + 18.0,
            y
        );
        x += 30.0 + 7.0 * label.len() as f64;
    }
}

/// Renders the chart. Every epoch gets one `x-tick` label on the shared
/// x axis.
pub fn render_svg(rows: &[EpochMetrics], title: &str) -> String {
    let n = rows.len();
    let col = |f: fn(&EpochMetrics) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let losses = [
        Series {
            label: "loss_total",
            color: "#222222",
            values: col(|r| r.loss_total),
        },
        Series {
            label: "loss_cd",
            color: "#1f77b4",
            values: col(|r| r.loss_cd),
        },
        Series {
            label: "loss_gkd",
            color: "#2ca02c",
            values: col(|r| r.loss_gkd),
        },
        Series {
            label: "loss_ce",
            color: "#d62728",
            values: col(|r| r.loss_ce),
        },
    ];
    let edt = Series {
        label: "edt_weight",
        color: "#9467bd",
        values: col(|r| r.edt_weight),
    };
    let errors = [
        Series {
            label: "train_top1",
            color: "#ff7f0e",
            values: col(|r| r.train_top1),
        },
        Series {
            label: "val_top1",
            color: "#1f77b4",
            values: col(|r| r.val_top1),
        },
        Series {
            label: "val_top5",
            color: "#17becf",
            values: col(|r| r.val_top5),
        },
    ];
    let (lmin, lmax) = range(&losses.iter().collect::<Vec<_>>());
    let top = Panel {
        y0: TOP,
        min: lmin,
        max: lmax,
    };
    let (emin, emax) = range(&[&edt]);
    let sec = Panel {
        y0: TOP,
        min: emin,
        max: emax,
    };
    let bottom = Panel {
        y0: TOP + PANEL_H + GAP,
        min: 0.0,
        max: 100.0,
    };
    let height = TOP + 2.0 * PANEL_H + GAP + 60.0;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" viewBox="0 0 {W} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{LEFT}" y="22" font-size="15">{}</text>"#, escape(title));
    for p in [&top, &bottom] {
        let _ = writeln!(
            out,
            r##"<rect x="{LEFT}" y="{:.2}" width="{:.2}" height="{PANEL_H}" fill="none" stroke="#999999"/>"##,
            p.y0,
            W - LEFT - RIGHT
        );
    }
    axis_labels(&mut out, &top, LEFT - 6.0, "end", "y-tick");
    axis_labels(&mut out, &sec, W - RIGHT + 6.0, "start", "y2-tick");
    axis_labels(&mut out, &bottom, LEFT - 6.0, "end", "y-tick");
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" font-size="12" transform="rotate(-90 16 {:.2})">loss</text>"#,
        TOP + PANEL_H / 2.0,
        TOP + PANEL_H / 2.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" transform="rotate(90 {:.2} {:.2})">edt_weight</text>"#,
        W - 14.0,
        TOP + PANEL_H / 2.0,
        W - 14.0,
        TOP + PANEL_H / 2.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" font-size="12" transform="rotate(-90 16 {:.2})">error (%)</text>"#,
        bottom.y0 + PANEL_H / 2.0,
        bottom.y0 + PANEL_H / 2.0
    );
    for s in &losses {
        polyline(&mut out, s, &top, n, false);
    }
    polyline(&mut out, &edt, &sec, n, true);
    for s in &errors {
        polyline(&mut out, s, &bottom, n, false);
    }
    let _ = writeln!(out, r#"<g class="x-axis">"#);
    let axis_y = bottom.y0 + PANEL_H + 16.0;
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text class="x-tick" x="{:.2}" y="{axis_y:.2}" font-size="10" text-anchor="middle">{}</text>"#,
            x_of(i, n),
            r.epoch
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">epoch</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        axis_y + 18.0
    );
    let mut items: Vec<(&str, &str)> = losses.iter().map(|s| (s.label, s.color)).collect();
    items.push((edt.label, edt.color));
    legend(&mut out, &items, TOP + PANEL_H + 22.0);
    let items: Vec<(&str, &str)> = errors.iter().map(|s| (s.label, s.color)).collect();
    legend(&mut out, &items, height - 8.0);
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<EpochMetrics> {
        (0..n)
            .map(|e| EpochMetrics {
                epoch: e,
                edt_weight: 0.5f64.powi(e as i32),
                loss_total: 2.0 / (e + 1) as f64,
                val_top1: 50.0 - e as f64,
                ..Default::default()
            })
            .collect()
    }

    #[test]
    fn one_tick_per_epoch() {
        let svg = render_svg(&rows(3), "run");
        assert_eq!(svg.matches(r#"class="x-tick""#).count(), 3);
        assert!(svg.contains(r#"data-label="edt_weight""#));
        assert!(svg.contains(r#"data-label="val_top5""#));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn single_row_and_non_finite_values() {
        let mut r = rows(1);
        r[0].loss_cd = f64::NAN;
        let svg = render_svg(&r, "a <b>");
        assert_eq!(svg.matches(r#"class="x-tick""#).count(), 1);
        assert!(svg.contains("a &lt;b&gt;"));
        assert!(!svg.contains("NaN"));
    }
}
