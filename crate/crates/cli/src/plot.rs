//! Static SVG line charts of one metric across seed files: the mean line
//! with a min/max envelope when there is more than one input.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sfmeta::persistence::read_csv;

use crate::config::{usage, PlotConfig};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

fn parse(path: &Path, col: &str, row: usize, v: &str) -> anyhow::Result<f64> {
    v.parse()
        .map_err(|_| anyhow::anyhow!("{}: row {row}, column '{col}': '{v}' is not a number", path.display()))
}

/// Read the `x`/`y` columns of a CSV file.
pub fn read_series(path: &Path, x: &str, y: &str) -> anyhow::Result<Series> {
    let (head, rows) = read_csv(path)?;
    let find = |name: &str| {
        head.iter()
            .position(|h| h == name)
            .ok_or_else(|| usage(format!("{}: no column named '{name}'", path.display())))
    };
    let (xi, yi) = (find(x)?, find(y)?);
    if rows.is_empty() {
        return Err(usage(format!("{}: no data rows", path.display())));
    }
    let mut s = Series {
        x: Vec::with_capacity(rows.len()),
        y: Vec::with_capacity(rows.len()),
    };
    for (i, r) in rows.iter().enumerate() {
        s.x.push(parse(path, x, i, &r[xi])?);
        s.y.push(parse(path, y, i, &r[yi])?);
    }
    Ok(s)
}

/// Trailing moving average over `window` points.
pub fn smooth(y: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..y.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            y[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Mean and min/max over the x values every series shares.
pub fn envelope(series: &[Series]) -> anyhow::Result<Envelope> {
    let first = series.first().ok_or_else(|| usage("no input series"))?;
    let mut env = Envelope {
        x: Vec::new(),
        mean: Vec::new(),
        lo: Vec::new(),
        hi: Vec::new(),
    };
    for (i, &x) in first.x.iter().enumerate() {
        let mut ys = vec![first.y[i]];
        for s in &series[1..] {
            match s.x.iter().position(|&v| v == x) {
                Some(j) => ys.push(s.y[j]),
                None => break,
            }
        }
        if ys.len() < series.len() || ys.iter().any(|v| !v.is_finite()) {
            continue;
        }
        env.x.push(x);
        env.mean.push(ys.iter().sum::<f64>() / ys.len() as f64);
        env.lo.push(ys.iter().copied().fold(f64::INFINITY, f64::min));
        env.hi.push(ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    if env.x.is_empty() {
        return Err(usage("the inputs share no finite points"));
    }
    Ok(env)
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Render the chart. The band is drawn only for two or more seeds.
pub fn render(env: &Envelope, seeds: usize, cfg: &PlotConfig) -> String {
    let (x0, x1) = span(env.x.iter().copied());
    let (y0, y1) = span(env.lo.iter().chain(&env.hi).copied());
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{l:.2},{t:.2} L{l:.2},{b:.2} L{r:.2},{b:.2}" fill="none" stroke="black"/>"#
    );
    if seeds > 1 {
        let mut d = String::new();
        for (i, (&x, &hi)) in env.x.iter().zip(&env.hi).enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(x), py(hi));
        }
        for (&x, &lo) in env.x.iter().zip(&env.lo).rev() {
            let _ = write!(d, "L{:.2},{:.2} ", px(x), py(lo));
        }
        let _ = writeln!(svg, r#"<path d="{}Z" fill="steelblue" fill-opacity="0.25" stroke="none"/>"#, d);
    }
    let points: Vec<String> = env
        .x
        .iter()
        .zip(&env.mean)
        .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        points.join(" ")
    );
    let label = |svg: &mut String, x: f64, y: f64, anchor: &str, text: &str| {
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="12" text-anchor="{anchor}">{}</text>"#,
            escape(text)
        );
    };
    label(&mut svg, l, b + 18.0, "middle", &format_tick(x0));
    label(&mut svg, r, b + 18.0, "middle", &format_tick(x1));
    label(&mut svg, l - 6.0, b, "end", &format_tick(y0));
    label(&mut svg, l - 6.0, t + 4.0, "end", &format_tick(y1));
    label(&mut svg, WIDTH / 2.0, HEIGHT - 12.0, "middle", &cfg.x);
    label(&mut svg, 14.0, HEIGHT / 2.0, "start", &cfg.y);
    let title = if cfg.title.is_empty() {
        format!("{} ({} seed{})", cfg.y, seeds, if seeds == 1 { "" } else { "s" })
    } else {
        cfg.title.clone()
    };
    label(&mut svg, WIDTH / 2.0, 24.0, "middle", &title);
    svg.push_str("</svg>\n");
    svg
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Read, smooth and aggregate `inputs`, returning the SVG text.
pub fn plot(inputs: &[PathBuf], cfg: &PlotConfig) -> anyhow::Result<String> {
    if inputs.is_empty() {
        return Err(usage("plot needs at least one input file"));
    }
    let series = inputs
        .iter()
        .map(|p| {
            let s = read_series(p, &cfg.x, &cfg.y)?;
            Ok(Series {
                y: smooth(&s.y, cfg.window),
                x: s.x,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let env = envelope(&series)?;
    Ok(render(&env, series.len(), cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(y: &[f64]) -> Series {
        Series {
            x: (0..y.len()).map(|i| i as f64).collect(),
            y: y.to_vec(),
        }
    }

    #[test]
    fn band_is_the_min_max_envelope() {
        let e = envelope(&[s(&[1.0, 2.0]), s(&[3.0, -1.0]), s(&[2.0, 5.0])]).unwrap();
        assert_eq!(e.mean, vec![2.0, 2.0]);
        assert_eq!(e.lo, vec![1.0, -1.0]);
        assert_eq!(e.hi, vec![3.0, 5.0]);
    }

    #[test]
    fn single_series_has_no_band() {
        let cfg = PlotConfig::default();
        let e = envelope(&[s(&[1.0, 2.0, 0.5])]).unwrap();
        let one = render(&e, 1, &cfg);
        assert!(!one.contains("fill-opacity"));
        assert!(one.contains("<polyline"));
        assert!(render(&e, 2, &cfg).contains("fill-opacity"));
    }

    #[test]
    fn smoothing_is_a_trailing_mean() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smooth(&[1.0, 3.0], 1), vec![1.0, 3.0]);
    }

    #[test]
    fn unshared_points_are_dropped() {
        let a = s(&[1.0, 2.0, 3.0]);
        let b = Series {
            x: vec![1.0, 2.0],
            y: vec![0.0, 0.0],
        };
        assert_eq!(envelope(&[a, b]).unwrap().x, vec![1.0, 2.0]);
    }
}
