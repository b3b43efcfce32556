use std::fmt::Write as _;
use std::path::Path;

use super::{ClassAp, MetricsReport, SegScores};
use crate::dataio::ClassRegistry;
use crate::error::{Error, Result};

fn key(name: &str) -> String {
    name.replace(' ', "_")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

/// Flat `key,value` rows: totals first, then per-class rows.
pub fn metrics_csv(report: &MetricsReport, registry: &ClassRegistry) -> String {
    let mut s = String::from("key,value\n");
    let mut row = |k: &str, v: String| writeln!(s, "{k},{v}").unwrap();
    row("images", report.images.to_string());
    row("gt_boxes", report.gt_boxes.to_string());
    row("detections", report.detections.to_string());
    row("depth_pairs", report.depth_pairs.to_string());
    row("map", report.map.to_string());
    row("mean_distance_error", opt(report.mean_distance_error));
    row("miou", report.seg.mean_iou.to_string());
    row("pixel_accuracy", report.seg.pixel_accuracy.to_string());
    for a in &report.ap {
        let name = registry.detection_name(a.class).map_or(a.class.to_string(), key);
        row(&format!("ap.{name}"), opt(a.ap));
        row(&format!("n_gt.{name}"), a.n_gt.to_string());
    }
    for (c, e) in &report.class_distance_error {
        let name = registry.detection_name(*c).map_or(c.to_string(), key);
        row(&format!("distance_error.{name}"), opt(*e));
    }
    for (c, iou) in report.seg.iou.iter().enumerate() {
        let name = registry.segmentation.get(c).map_or(c.to_string(), |n| key(n));
        row(&format!("iou.{name}"), opt(*iou));
    }
    s
}

pub fn cdf_csv(report: &MetricsReport) -> String {
    let mut s = String::from("x,F\n");
    for (x, f) in &report.cdf {
        writeln!(s, "{x},{f}").unwrap();
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn svg_frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0).unwrap();
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - 16.0, 28.0);
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, (x0 + x1) / 2.0, H - 10.0).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    )
    .unwrap();
    s
}

fn plot_x(u: f64) -> f64 {
    MARGIN + u * (W - 16.0 - MARGIN)
}

fn plot_y(v: f64) -> f64 {
    (H - MARGIN) - v * (H - MARGIN - 28.0)
}

/// Step plot of the distance-error CDF.
pub fn cdf_svg(report: &MetricsReport) -> String {
    let mut s = svg_frame("Distance error CDF", "relative distance error", "fraction of objects");
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v}</text>"#, plot_x(v), H - MARGIN + 14.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v}</text>"#, MARGIN - 4.0, plot_y(v) + 4.0).unwrap();
    }
    let points: Vec<String> = report
        .cdf
        .iter()
        .map(|(x, f)| format!("{:.2},{:.2}", plot_x(*x), plot_y(*f)))
        .collect();
    writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
    s.push_str("</svg>\n");
    s
}

/// Bars of mean relative distance error per class with paired objects.
pub fn per_class_error_svg(report: &MetricsReport, registry: &ClassRegistry) -> String {
    let mut s = svg_frame("Distance error per class", "class", "mean relative error");
    let bars: Vec<(String, f64)> = report
        .class_distance_error
        .iter()
        .filter_map(|(c, e)| e.map(|e| (registry.detection_name(*c).map_or(c.to_string(), String::from), e)))
        .collect();
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-9);
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{top:.3}</text>"#, MARGIN - 4.0, plot_y(1.0) + 4.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">0</text>"#, MARGIN - 4.0, plot_y(0.0) + 4.0).unwrap();
    let slot = 1.0 / bars.len().max(1) as f64;
    for (i, (name, e)) in bars.iter().enumerate() {
        let x = plot_x(i as f64 * slot + 0.15 * slot);
        let width = plot_x(0.7 * slot) - MARGIN;
        let y = plot_y(e / top);
        writeln!(
            s,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{width:.2}" height="{:.2}" fill="indianred"/>"#,
            plot_y(0.0) - y
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{name}</text>"#,
            x + width / 2.0,
            H - MARGIN + 14.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes metrics.csv, cdf.csv, cdf.svg and perclass_error.svg into `dir`.
pub fn write_report(dir: &Path, report: &MetricsReport, registry: &ClassRegistry) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        ("metrics.csv", metrics_csv(report, registry)),
        ("cdf.csv", cdf_csv(report)),
        ("cdf.svg", cdf_svg(report)),
        ("perclass_error.svg", per_class_error_svg(report, registry)),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn parse_opt(v: &str) -> Option<Option<f64>> {
    if v == "nan" {
        Some(None)
    } else {
        v.parse().ok().map(Some)
    }
}

/// Reads back what [`write_report`] wrote to `dir` (metrics.csv and cdf.csv).
pub fn read_report(dir: &Path, registry: &ClassRegistry) -> Result<MetricsReport> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map(|t| (path.clone(), t)).map_err(|e| Error::io(&path, e))
    };
    let (metrics_path, metrics) = read("metrics.csv")?;
    let bad = |path: &Path, line: usize, reason: &str| Error::format("metrics", path, format!("line {line}: {reason}"));

    let det_id = |name: &str| {
        registry
            .detection
            .iter()
            .position(|n| key(n) == name)
            .map(|i| i + 1)
            .or_else(|| name.parse().ok())
    };
    let seg_id = |name: &str| registry.segmentation.iter().position(|n| key(n) == name).or_else(|| name.parse().ok());

    let mut report = MetricsReport {
        ap: Vec::new(),
        map: 0.0,
        class_distance_error: Vec::new(),
        mean_distance_error: None,
        cdf: Vec::new(),
        seg: SegScores {
            iou: Vec::new(),
            mean_iou: 0.0,
            pixel_accuracy: 0.0,
        },
        images: 0,
        gt_boxes: 0,
        detections: 0,
        depth_pairs: 0,
    };
    let mut lines = metrics.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some("key,value") {
        return Err(bad(&metrics_path, 1, "expected key,value header"));
    }
    for (n, line) in lines {
        let n = n + 1;
        let (k, v) = line.split_once(',').ok_or_else(|| bad(&metrics_path, n, "expected key,value"))?;
        let num = || v.parse::<f64>().map_err(|_| bad(&metrics_path, n, "bad number"));
        let count = || v.parse::<usize>().map_err(|_| bad(&metrics_path, n, "bad count"));
        let optional = || parse_opt(v).ok_or_else(|| bad(&metrics_path, n, "bad number"));
        match k.split_once('.') {
            None => match k {
                "images" => report.images = count()?,
                "gt_boxes" => report.gt_boxes = count()?,
                "detections" => report.detections = count()?,
                "depth_pairs" => report.depth_pairs = count()?,
                "map" => report.map = num()?,
                "mean_distance_error" => report.mean_distance_error = optional()?,
                "miou" => report.seg.mean_iou = num()?,
                "pixel_accuracy" => report.seg.pixel_accuracy = num()?,
                _ => return Err(bad(&metrics_path, n, "unknown key")),
            },
            Some((group, name)) => {
                let unknown = || bad(&metrics_path, n, "unknown class");
                match group {
                    "ap" => report.ap.push(ClassAp {
                        class: det_id(name).ok_or_else(unknown)?,
                        ap: optional()?,
                        n_gt: 0,
                    }),
                    "n_gt" => {
                        let class = det_id(name).ok_or_else(unknown)?;
                        let entry = report
                            .ap
                            .iter_mut()
                            .find(|a| a.class == class)
                            .ok_or_else(|| bad(&metrics_path, n, "n_gt before its ap row"))?;
                        entry.n_gt = count()?;
                    }
                    "distance_error" => report.class_distance_error.push((det_id(name).ok_or_else(unknown)?, optional()?)),
                    "iou" => {
                        let id = seg_id(name).ok_or_else(unknown)?;
                        if id != report.seg.iou.len() {
                            return Err(bad(&metrics_path, n, "iou rows out of order"));
                        }
                        report.seg.iou.push(optional()?);
                    }
                    _ => return Err(bad(&metrics_path, n, "unknown key")),
                }
            }
        }
    }

    let (cdf_path, cdf) = read("cdf.csv")?;
    for (n, line) in cdf.lines().enumerate().skip(1) {
        let parsed = line
            .split_once(',')
            .and_then(|(x, f)| Some((x.parse().ok()?, f.parse().ok()?)))
            .ok_or_else(|| bad(&cdf_path, n + 1, "expected x,F"))?;
        report.cdf.push(parsed);
    }
    Ok(report)
}
