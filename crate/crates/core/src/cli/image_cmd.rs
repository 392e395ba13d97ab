//! `metrics`: saturation and contrast over a directory of images.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::metrics::{batch_color_report, kde, load_images, rgb_to_hsv, ColorReport, ImageRGB};

use super::output::{num, OutputSet};
use super::svg::{Plot, Series, Style};
use super::CliError;

pub const KDE_MAX_VALUES: usize = 200_000;
pub const KDE_GRID: usize = 512;

#[derive(Debug, Clone, Serialize)]
pub struct MetricsArgs {
    pub dir: PathBuf,
    pub glob: String,
    pub out: PathBuf,
    pub kde: bool,
    pub bandwidth: Option<f64>,
}

#[derive(Debug)]
pub struct MetricsOutcome {
    pub report: ColorReport,
    pub skipped: Vec<PathBuf>,
    pub manifest: PathBuf,
}

/// Files directly inside `dir` whose names match `pattern`, sorted.
pub fn matching_files(dir: &Path, pattern: &str) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::validation(format!(
            "input directory {} does not exist",
            dir.display()
        )));
    }
    let pat = glob::Pattern::new(pattern)
        .map_err(|e| CliError::validation(format!("--glob {pattern:?}: {e}")))?;
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::runtime(format!("reading {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .filter(|p| {
            p.file_name()
                .map(|n| pat.matches(&n.to_string_lossy()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::validation(format!(
            "no files in {} match {pattern:?}",
            dir.display()
        )));
    }
    Ok(files)
}

/// Pooled R, G, B and saturation values, strided down to at most `max` each.
pub fn channel_values(images: &[(String, ImageRGB)], max: usize) -> [Vec<f64>; 4] {
    let total: usize = images.iter().map(|(_, im)| im.pixels().len()).sum();
    let stride = total.div_ceil(max.max(1)).max(1);
    let mut out: [Vec<f64>; 4] = Default::default();
    let pixels = images.iter().flat_map(|(_, im)| im.pixels().iter());
    for p in pixels.step_by(stride) {
        out[0].push(p[0]);
        out[1].push(p[1]);
        out[2].push(p[2]);
        out[3].push(rgb_to_hsv(*p)[1]);
    }
    out
}

fn write_kde(
    out: &mut OutputSet,
    images: &[(String, ImageRGB)],
    bandwidth: Option<f64>,
) -> Result<(), CliError> {
    let names = ["r", "g", "b", "saturation"];
    let values = channel_values(images, KDE_MAX_VALUES);
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (name, vals) in names.iter().zip(&values) {
        let est = match kde(vals, bandwidth, KDE_GRID) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("kde for {name} skipped: {e}");
                continue;
            }
        };
        for (&x, &d) in est.grid.iter().zip(&est.density) {
            rows.push(vec![name.to_string(), num(est.bandwidth), num(x), num(d)]);
        }
        series.push(Series {
            name: name.to_string(),
            points: est.grid.iter().copied().zip(est.density.iter().copied()).collect(),
        });
    }
    let header: Vec<String> = ["channel", "bandwidth", "x", "density"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    out.write_csv("kde.csv", &header, &rows)?;
    let plot = Plot {
        title: "channel densities".into(),
        x_label: "value".into(),
        y_label: "density".into(),
        style: Style::Lines,
        series,
    };
    out.write("kde.svg", plot.render().as_bytes())?;
    Ok(())
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<MetricsOutcome, CliError> {
    if let Some(h) = args.bandwidth {
        if !(h.is_finite() && h > 0.0) {
            return Err(CliError::validation("--bandwidth must be positive"));
        }
    }
    let files = matching_files(&args.dir, &args.glob)?;
    let (images, failures) = load_images(&files);
    if images.is_empty() {
        return Err(CliError::runtime(format!(
            "none of the {} matching files could be read",
            files.len()
        )));
    }
    let mut report = batch_color_report(&images)?;
    report.skipped = failures.len();

    let mut out = OutputSet::create(&args.out)?;
    let header: Vec<String> = ["name", "status", "width", "height", "saturation", "contrast"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                "ok".into(),
                r.width.to_string(),
                r.height.to_string(),
                num(r.saturation),
                num(r.contrast),
            ]
        })
        .collect();
    for (path, _) in &failures {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        rows.push(vec![name, "skipped".into(), String::new(), String::new(), String::new(), String::new()]);
    }
    rows.push(vec![
        "mean".into(),
        "aggregate".into(),
        String::new(),
        String::new(),
        num(report.mean_saturation),
        num(report.mean_contrast),
    ]);
    out.write_csv("metrics.csv", &header, &rows)?;
    if args.kde {
        write_kde(&mut out, &images, args.bandwidth)?;
    }
    let manifest = out.finish("metrics", args, None)?;
    println!(
        "{} images, {} skipped; mean saturation {:.6}, mean contrast {:.6}",
        report.rows.len(),
        report.skipped,
        report.mean_saturation,
        report.mean_contrast
    );
    Ok(MetricsOutcome {
        report,
        skipped: failures.into_iter().map(|(p, _)| p).collect(),
        manifest,
    })
}
