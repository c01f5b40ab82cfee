//! Learning-curve plots (SVG) and cross-seed summaries (CSV).
//!
//! Curves show the mean success rate across seeds with a 95% t-interval
//! band. Runs with differing evaluation grids are linearly resampled onto
//! the first run's grid, with a note in the summary.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::metrics::{read_eval_csv, EvalRecord};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no evaluation logs found")]
    Empty,
}

/// Two-sided 97.5% Student-t quantiles for n-1 degrees of freedom,
/// n = 2..=10; beyond that the normal quantile is close enough.
fn t_crit(n: usize) -> f64 {
    const TABLE: [f64; 9] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262,
    ];
    match n {
        0 | 1 => 0.0,
        2..=10 => TABLE[n - 2],
        _ => 1.96,
    }
}

#[derive(Clone, Debug)]
pub struct CurvePoint {
    pub step: u64,
    pub mean: f64,
    pub half_width: f64,
}

/// Mean and 95% t-interval half-width across runs at each grid point.
pub fn aggregate(runs: &[Vec<EvalRecord>]) -> (Vec<CurvePoint>, bool) {
    assert!(!runs.is_empty());
    let grid: Vec<u64> = runs[0].iter().map(|r| r.step).collect();
    let mut resampled_note = false;
    let values: Vec<Vec<f64>> = runs
        .iter()
        .map(|run| {
            let native: Vec<u64> = run.iter().map(|r| r.step).collect();
            if native == grid {
                run.iter().map(|r| r.success_rate).collect()
            } else {
                resampled_note = true;
                grid.iter().map(|&s| interp(run, s)).collect()
            }
        })
        .collect();

    let n = runs.len();
    let points = grid
        .iter()
        .enumerate()
        .map(|(i, &step)| {
            let xs: Vec<f64> = values.iter().map(|v| v[i]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let half_width = if n >= 2 {
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
                t_crit(n) * (var / n as f64).sqrt()
            } else {
                0.0
            };
            CurvePoint {
                step,
                mean,
                half_width,
            }
        })
        .collect();
    (points, resampled_note)
}

fn interp(run: &[EvalRecord], step: u64) -> f64 {
    if run.is_empty() {
        return 0.0;
    }
    if step <= run[0].step {
        return run[0].success_rate;
    }
    for w in run.windows(2) {
        if step <= w[1].step {
            let span = (w[1].step - w[0].step).max(1) as f64;
            let frac = (step - w[0].step) as f64 / span;
            return w[0].success_rate + frac * (w[1].success_rate - w[0].success_rate);
        }
    }
    run.last().unwrap().success_rate
}

/// Area under the success curve, normalized by the step span.
pub fn area_under_curve(run: &[EvalRecord]) -> f64 {
    if run.len() < 2 {
        return run.first().map(|r| r.success_rate).unwrap_or(0.0);
    }
    let mut area = 0.0;
    for w in run.windows(2) {
        let width = (w[1].step - w[0].step) as f64;
        area += 0.5 * (w[0].success_rate + w[1].success_rate) * width;
    }
    area / (run.last().unwrap().step - run[0].step).max(1) as f64
}

pub struct PlotGroup {
    pub label: String,
    pub runs: Vec<Vec<EvalRecord>>,
}

/// Renders grouped learning curves to SVG and writes a CSV of final
/// aggregates; returns the summary CSV text.
pub fn plot_groups(groups: &[PlotGroup], svg_path: &Path, csv_path: &Path) -> Result<String, PlotError> {
    if groups.is_empty() || groups.iter().all(|g| g.runs.is_empty()) {
        return Err(PlotError::Empty);
    }
    let (w, h) = (720.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 30.0, 45.0);
    let max_step = groups
        .iter()
        .flat_map(|g| g.runs.iter())
        .filter_map(|r| r.last().map(|p| p.step))
        .max()
        .unwrap_or(1) as f64;

    let colors = ["#2c7fb8", "#d95f02", "#1b9e77", "#7570b3", "#e7298a", "#666666"];
    let x = |step: f64| ml + (w - ml - mr) * step / max_step;
    let y = |v: f64| h - mb - (h - mt - mb) * v.clamp(0.0, 1.0);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    // Axes and gridlines.
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let yy = y(v);
        let _ = write!(
            svg,
            "<line x1=\"{ml}\" y1=\"{yy}\" x2=\"{}\" y2=\"{yy}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{v:.1}</text>\n",
            w - mr,
            ml - 6.0,
            yy + 4.0
        );
    }
    for i in 0..=5 {
        let s = max_step * i as f64 / 5.0;
        let xx = x(s);
        let _ = write!(
            svg,
            "<text x=\"{xx}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            h - mb + 16.0,
            s as u64
        );
    }
    let _ = write!(
        svg,
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">environment steps</text>\n\
         <text x=\"14\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">success rate</text>\n",
        h - mb,
        w - mr,
        h - mb,
        h - mb,
        (ml + w - mr) / 2.0,
        h - 8.0,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    );

    let mut csv = String::from("label,seeds,final_mean,final_half_width,auc_mean,resampled\n");
    for (gi, group) in groups.iter().enumerate() {
        if group.runs.is_empty() {
            continue;
        }
        let color = colors[gi % colors.len()];
        let (points, resampled) = aggregate(&group.runs);

        // Confidence band.
        if points.len() >= 2 {
            let mut band = String::from("<path d=\"M");
            for p in &points {
                let _ = write!(band, "{:.2},{:.2} L", x(p.step as f64), y(p.mean + p.half_width));
            }
            for p in points.iter().rev() {
                let _ = write!(band, "{:.2},{:.2} L", x(p.step as f64), y(p.mean - p.half_width));
            }
            band.truncate(band.len() - 2);
            let _ = write!(svg, "{band}Z\" fill=\"{color}\" opacity=\"0.15\"/>\n");
        }
        // Mean line.
        let mut line = String::from("<polyline points=\"");
        for p in &points {
            let _ = write!(line, "{:.2},{:.2} ", x(p.step as f64), y(p.mean));
        }
        let _ = write!(
            svg,
            "{line}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n"
        );
        // Legend.
        let ly = mt + 16.0 * gi as f64;
        let _ = write!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"3\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>\n",
            ml + 10.0,
            ly,
            ml + 28.0,
            ly + 4.0,
            group.label
        );

        let last = points.last().unwrap();
        let auc: f64 =
            group.runs.iter().map(|r| area_under_curve(r)).sum::<f64>() / group.runs.len() as f64;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            group.label,
            group.runs.len(),
            last.mean,
            last.half_width,
            auc,
            resampled as u8
        );
    }
    svg.push_str("</svg>\n");

    std::fs::write(svg_path, &svg)?;
    std::fs::write(csv_path, &csv)?;
    Ok(csv)
}

/// Groups run directories by their parent-relative label and plots them.
pub fn cmd_plot(run_dirs: &[std::path::PathBuf], out_dir: &Path) -> Result<String, PlotError> {
    std::fs::create_dir_all(out_dir)?;
    let mut groups: Vec<PlotGroup> = Vec::new();
    for dir in run_dirs {
        let evals = read_eval_csv(&dir.join("eval.csv"))?;
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        // Strip a trailing seed suffix so seeds group together.
        let label = match label.rfind("-seed") {
            Some(p) => label[..p].to_string(),
            None => label,
        };
        match groups.iter_mut().find(|g| g.label == label) {
            Some(g) => g.runs.push(evals),
            None => groups.push(PlotGroup {
                label,
                runs: vec![evals],
            }),
        }
    }
    plot_groups(&groups, &out_dir.join("curves.svg"), &out_dir.join("summary.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(points: &[(u64, f64)]) -> Vec<EvalRecord> {
        points
            .iter()
            .map(|&(step, success_rate)| EvalRecord {
                step,
                success_rate,
                mean_return: 0.0,
            })
            .collect()
    }

    #[test]
    fn single_seed_band_collapses() {
        let (points, _) = aggregate(&[run(&[(100, 0.2), (200, 0.6)])]);
        assert!(points.iter().all(|p| p.half_width == 0.0));
    }

    #[test]
    fn identical_runs_have_zero_width_band() {
        let r = run(&[(100, 0.3), (200, 0.5)]);
        let (points, resampled) = aggregate(&[r.clone(), r]);
        assert!(!resampled);
        assert!(points.iter().all(|p| p.half_width == 0.0));
    }

    #[test]
    fn three_seed_band_matches_t_interval() {
        // Known variance at one grid point: band = t * s / sqrt(3).
        let runs = vec![
            run(&[(100, 0.2)]),
            run(&[(100, 0.5)]),
            run(&[(100, 0.8)]),
        ];
        let (points, _) = aggregate(&runs);
        let mean: f64 = 0.5;
        let var = ((0.2f64 - mean).powi(2) + (0.5 - mean).powi(2) + (0.8 - mean).powi(2)) / 2.0;
        let want = 4.303 * (var / 3.0).sqrt();
        assert!((points[0].half_width - want).abs() < 1e-6);
        assert!((points[0].mean - mean).abs() < 1e-12);
    }

    #[test]
    fn mismatched_grids_resample_with_note() {
        let a = run(&[(100, 0.0), (200, 1.0)]);
        let b = run(&[(100, 0.0), (150, 0.5), (200, 1.0)]);
        let (points, resampled) = aggregate(&[a, b]);
        assert!(resampled);
        assert_eq!(points.len(), 2);
        assert!((points[1].mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svg_and_csv_emitted() {
        let dir = std::env::temp_dir().join(format!("gsa_plot_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let groups = vec![PlotGroup {
            label: "demo".into(),
            runs: vec![run(&[(0, 0.0), (1000, 0.4), (2000, 0.9)])],
        }];
        let csv = plot_groups(&groups, &dir.join("c.svg"), &dir.join("s.csv")).unwrap();
        assert!(csv.contains("demo"));
        let svg = std::fs::read_to_string(dir.join("c.svg")).unwrap();
        assert!(svg.contains("<svg") && svg.contains("polyline"));
    }
}
