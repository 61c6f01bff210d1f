//! Summary tables and parameter-space error plots from the `metrics.json`
//! files found under a run directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gfnrom::io;

use crate::{Metrics, METRICS_FILE};

/// One evaluated run.
#[derive(Debug, Clone)]
pub struct Entry {
    pub label: String,
    pub metrics: Metrics,
}

impl Entry {
    pub fn train_label(&self) -> String {
        self.metrics.train_meshes.join("+")
    }
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_metrics(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Loads every `metrics.json` under `run_dir`, in path order.
pub fn collect(run_dir: &Path) -> Result<Vec<Entry>> {
    if !run_dir.is_dir() {
        bail!("run directory {} does not exist", run_dir.display());
    }
    let mut paths = Vec::new();
    find_metrics(run_dir, &mut paths)?;
    if paths.is_empty() {
        bail!("no {METRICS_FILE} found under {}", run_dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let metrics: Metrics = io::read_json(p)?;
            let rel = p.parent().unwrap().strip_prefix(run_dir).unwrap_or(Path::new(""));
            let label = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("_");
            Ok(Entry {
                label: if label.is_empty() { "run".into() } else { label },
                metrics,
            })
        })
        .collect()
}

/// Error of the run trained only on the finest mesh with the same family
/// and evaluation mesh.
fn reference<'a>(entries: &'a [Entry], e: &Entry) -> Option<&'a Entry> {
    entries.iter().find(|r| {
        r.metrics.family == e.metrics.family
            && r.metrics.eval_mesh == e.metrics.eval_mesh
            && r.metrics.train_meshes == ["large"]
    })
}

fn signed(v: f64) -> String {
    format!("{v:+.2}")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn markdown_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

/// Writes `summary.csv`, `fidelity.csv`, `multifidelity.csv`, `report.md`
/// and one `<label>_errors.svg` per run into `out`.
pub fn run_report(run_dir: &Path, out: &Path) -> Result<()> {
    let entries = collect(run_dir)?;
    io::create_dir(out)?;

    let summary_header = [
        "label", "family", "train", "eval_mesh", "model_nodes", "eval_nodes", "n_train", "n_test",
        "error", "pod_rank", "pod_error",
    ];
    let summary: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            let m = &e.metrics;
            vec![
                e.label.clone(),
                format!("{:?}", m.family),
                e.train_label(),
                m.eval_mesh.clone(),
                m.model_nodes.to_string(),
                m.eval_nodes.to_string(),
                m.n_train.to_string(),
                m.n_test.to_string(),
                m.mean_relative_error.to_string(),
                m.pod.as_ref().map(|p| p.rank.to_string()).unwrap_or_default(),
                opt(m.pod.as_ref().map(|p| p.mean_relative_error)),
            ]
        })
        .collect();
    write_csv(&out.join("summary.csv"), &summary_header, &summary)?;

    // rows: family and evaluation mesh; columns: training meshes
    let columns: BTreeSet<String> = entries.iter().map(Entry::train_label).collect();
    let columns: Vec<String> = columns.into_iter().collect();
    let mut row_keys: Vec<(String, String)> = Vec::new();
    for e in &entries {
        let k = (format!("{:?}", e.metrics.family), e.metrics.eval_mesh.clone());
        if !row_keys.contains(&k) {
            row_keys.push(k);
        }
    }
    let mut fid_header: Vec<&str> = vec!["family", "eval_mesh"];
    fid_header.extend(columns.iter().map(String::as_str));
    fid_header.push("pod");
    let fidelity: Vec<Vec<String>> = row_keys
        .iter()
        .map(|(fam, mesh)| {
            let rows: Vec<&Entry> = entries
                .iter()
                .filter(|e| &format!("{:?}", e.metrics.family) == fam && &e.metrics.eval_mesh == mesh)
                .collect();
            let mut r = vec![fam.clone(), mesh.clone()];
            for c in &columns {
                r.push(
                    rows.iter()
                        .find(|e| &e.train_label() == c)
                        .map(|e| format!("{:.2}", e.metrics.mean_relative_error))
                        .unwrap_or_else(|| "-".into()),
                );
            }
            r.push(
                rows.iter()
                    .find_map(|e| e.metrics.pod.as_ref())
                    .map(|p| format!("{:.2}", p.mean_relative_error))
                    .unwrap_or_else(|| "-".into()),
            );
            r
        })
        .collect();
    write_csv(&out.join("fidelity.csv"), &fid_header, &fidelity)?;

    let multi_header = ["label", "family", "train", "eval_mesh", "error", "reference_error", "delta"];
    let multi: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            let r = reference(&entries, e);
            vec![
                e.label.clone(),
                format!("{:?}", e.metrics.family),
                e.train_label(),
                e.metrics.eval_mesh.clone(),
                format!("{:.2}", e.metrics.mean_relative_error),
                r.map(|r| format!("{:.2}", r.metrics.mean_relative_error)).unwrap_or_else(|| "-".into()),
                r.map(|r| format!("({})", signed(e.metrics.mean_relative_error - r.metrics.mean_relative_error)))
                    .unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    write_csv(&out.join("multifidelity.csv"), &multi_header, &multi)?;

    let mut md = String::from("# Mean relative errors (%)\n\n");
    md += &markdown_table(&fid_header, &fidelity);
    md += "\n# Change against training on the finest mesh only\n\n";
    md += &markdown_table(&multi_header, &multi);
    md += "\n# Runs\n\n";
    md += &markdown_table(&summary_header, &summary);
    std::fs::write(out.join("report.md"), md).with_context(|| format!("cannot write {}", out.display()))?;

    for e in &entries {
        let svg = error_map_svg(&e.metrics, &e.label);
        std::fs::write(out.join(format!("{}_errors.svg", e.label)), svg)?;
    }
    Ok(())
}

/// Colour for `t ∈ [0, 1]` on a blue-green-yellow ramp.
fn ramp(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 4] = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (253.0, 231.0, 37.0),
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let lerp = |p: f64, q: f64| (p + f * (q - p)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

/// Test errors over the first two parameters; training points as squares.
pub fn error_map_svg(m: &Metrics, title: &str) -> String {
    let (w, h, pad) = (480.0, 420.0, 50.0);
    let pts: Vec<(&[f64], Option<f64>)> = m.test.iter().map(|r| (r.mu.as_slice(), r.error)).collect();
    let coord = |mu: &[f64], k: usize| mu.get(k).copied().unwrap_or(0.0);
    let all_mu = pts.iter().map(|p| p.0).chain(m.train_params.iter().map(Vec::as_slice));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for mu in all_mu {
        x0 = x0.min(coord(mu, 0));
        x1 = x1.max(coord(mu, 0));
        y0 = y0.min(coord(mu, 1));
        y1 = y1.max(coord(mu, 1));
    }
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let sx = |x: f64| pad + (x - x0) / span(x0, x1) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / span(y0, y1) * (h - 2.0 * pad - 20.0);
    let errs: Vec<f64> = pts.iter().filter_map(|p| p.1).collect();
    let (e0, e1) = (
        errs.iter().copied().fold(f64::INFINITY, f64::min),
        errs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">{title}: mean {:.2}% on {}</text>"#,
        w / 2.0,
        m.mean_relative_error,
        m.eval_mesh
    );
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        pad - 10.0 + 20.0,
        w - 2.0 * pad,
        h - 2.0 * pad - 10.0
    );
    for (mu, e) in &pts {
        let t = match e {
            Some(e) if e1 > e0 => (e - e0) / (e1 - e0),
            _ => 0.0,
        };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="6" fill="{}"><title>{:.3}%</title></circle>"#,
            sx(coord(mu, 0)),
            sy(coord(mu, 1)),
            ramp(t),
            e.unwrap_or(f64::NAN)
        );
    }
    for mu in &m.train_params {
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="none" stroke="black" stroke-width="1.5"/>"#,
            sx(coord(mu, 0)) - 5.0,
            sy(coord(mu, 1)) - 5.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">mu_1</text><text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">mu_2</text>"#,
        w / 2.0,
        h - 10.0,
        h / 2.0,
        h / 2.0
    );
    if e1.is_finite() {
        let _ = writeln!(
            s,
            r#"<text x="{pad}" y="{}">min {e0:.2}%</text><text x="{}" y="{}" text-anchor="end">max {e1:.2}%</text>"#,
            h - 25.0,
            w - pad,
            h - 25.0
        );
    }
    s.push_str("</svg>\n");
    s
}
