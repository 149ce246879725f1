//! Accuracy-curve rendering. Deterministic filenames, byte-stable output for
//! identical inputs.

use crate::error::{Error, Result};
use crate::orchestrator::RoundReport;
use plotters::prelude::*;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

/// Register a system font for text rendering once; charts fall back to
/// text-free rendering when no font is available.
fn text_available() -> bool {
    static TEXT: OnceLock<bool> = OnceLock::new();
    *TEXT.get_or_init(|| {
        for path in FONT_CANDIDATES {
            if let Ok(bytes) = std::fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked).is_ok()
                {
                    return true;
                }
            }
        }
        false
    })
}

fn series_color(i: usize) -> RGBColor {
    const PALETTE: [RGBColor; 8] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
        RGBColor(127, 127, 127),
    ];
    PALETTE[i % PALETTE.len()]
}

fn line_chart(
    path: &Path,
    title: &str,
    y_label: &str,
    max_round: f64,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let root = BitMapBackend::new(path, (900, 600)).into_drawing_area();
    let text = text_available();
    (|| -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let mut builder = ChartBuilder::on(&root);
        builder
            .margin(14)
            .x_label_area_size(40)
            .y_label_area_size(52);
        if text {
            builder.caption(title, ("sans-serif", 24));
        }
        let mut chart = builder.build_cartesian_2d(0f64..max_round.max(1.0), 0f64..1.02f64)?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc("round").y_desc(y_label);
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw()?;
        for (i, (name, points)) in series.iter().enumerate() {
            let color = series_color(i);
            let drawn = chart.draw_series(LineSeries::new(
                points.iter().copied(),
                color.stroke_width(2),
            ))?;
            if text {
                drawn.label(name.clone()).legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
                });
            }
        }
        if text && !series.is_empty() {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.85))
                .border_style(BLACK)
                .draw()?;
        }
        root.present()?;
        Ok(())
    })()
    .map_err(|e| Error::Plot(format!("{title}: {e}")))
}

/// Render the three comparison charts into `out_dir`:
/// `main_acc.png`, `backdoor_acc.png`, `submodels.png`.
pub fn emit_plots(
    reports: &[(String, Vec<RoundReport>)],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if reports.is_empty() || reports.iter().all(|(_, r)| r.is_empty()) {
        return Err(Error::InvalidArgument("no reports to plot".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let max_round = reports
        .iter()
        .flat_map(|(_, r)| r.iter().map(|x| x.round))
        .max()
        .unwrap_or(0) as f64;

    let main_series: Vec<(String, Vec<(f64, f64)>)> = reports
        .iter()
        .map(|(name, r)| {
            (
                name.clone(),
                r.iter().map(|x| (x.round as f64, x.main_acc)).collect(),
            )
        })
        .collect();
    let backdoor_series: Vec<(String, Vec<(f64, f64)>)> = reports
        .iter()
        .map(|(name, r)| {
            (
                name.clone(),
                r.iter().map(|x| (x.round as f64, x.backdoor_acc)).collect(),
            )
        })
        .collect();

    // Sub-model curves come from whichever runs recorded them (GANcrop).
    let mut submodel_series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (name, r) in reports {
        let pick = |f: fn(&crate::orchestrator::SubmodelStats) -> Option<f64>| {
            r.iter()
                .filter_map(|x| {
                    x.submodels
                        .as_ref()
                        .and_then(f)
                        .map(|v| (x.round as f64, v))
                })
                .collect::<Vec<_>>()
        };
        let benign_main = pick(|s| s.benign_main);
        if !benign_main.is_empty() {
            submodel_series.push((format!("{name} benign main"), benign_main));
            submodel_series.push((format!("{name} repaired main"), pick(|s| s.repaired_main)));
            submodel_series.push((
                format!("{name} benign backdoor"),
                pick(|s| s.benign_backdoor),
            ));
            submodel_series.push((
                format!("{name} repaired backdoor"),
                pick(|s| s.repaired_backdoor),
            ));
        }
    }

    let main_path = out_dir.join("main_acc.png");
    let backdoor_path = out_dir.join("backdoor_acc.png");
    let submodel_path = out_dir.join("submodels.png");
    line_chart(&main_path, "Main task accuracy", "accuracy", max_round, &main_series)?;
    line_chart(
        &backdoor_path,
        "Backdoor accuracy",
        "attack success rate",
        max_round,
        &backdoor_series,
    )?;
    line_chart(
        &submodel_path,
        "Sub-model accuracy (benign vs repaired)",
        "accuracy",
        max_round,
        &submodel_series,
    )?;
    Ok(vec![main_path, backdoor_path, submodel_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::SubmodelStats;

    fn fake_report(round: usize, main: f64, backdoor: f64, sub: bool) -> RoundReport {
        RoundReport {
            round,
            main_acc: main,
            backdoor_acc: backdoor,
            verdicts: Vec::new(),
            n_suspects: 0,
            true_positives: 0,
            false_positives: 0,
            t_train: 0.1,
            t_detect: 0.0,
            t_recover: 0.0,
            t_aggregate: 0.01,
            global_digest: "d".into(),
            submodels: sub.then(|| SubmodelStats {
                benign_main: Some(0.9),
                benign_backdoor: Some(0.1),
                repaired_main: Some(0.8),
                repaired_backdoor: Some(0.05),
                n_repaired: 2,
            }),
            dropped_clients: Vec::new(),
        }
    }

    #[test]
    fn creates_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![(
            "fedavg".to_string(),
            vec![fake_report(0, 0.5, 0.9, false), fake_report(1, 0.6, 0.95, false)],
        )];
        let files = emit_plots(&reports, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for f in &files {
            assert!(f.exists(), "{f:?} missing");
            assert!(std::fs::metadata(f).unwrap().len() > 0);
        }
        let names: Vec<_> = files
            .iter()
            .map(|f| f.file_name().unwrap().to_string_lossy().to_string())
            .collect();
        assert_eq!(names, ["main_acc.png", "backdoor_acc.png", "submodels.png"]);
    }

    #[test]
    fn output_is_byte_stable() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let reports = vec![
            (
                "gancrop".to_string(),
                vec![fake_report(0, 0.7, 0.2, true), fake_report(1, 0.75, 0.1, true)],
            ),
            (
                "fedavg".to_string(),
                vec![fake_report(0, 0.8, 0.9, false), fake_report(1, 0.82, 0.92, false)],
            ),
        ];
        emit_plots(&reports, dir_a.path()).unwrap();
        emit_plots(&reports, dir_b.path()).unwrap();
        for name in ["main_acc.png", "backdoor_acc.png", "submodels.png"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} not byte-stable");
        }
    }

    #[test]
    fn empty_reports_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(&[], dir.path()).is_err());
        assert!(emit_plots(&[("x".into(), vec![])], dir.path()).is_err());
    }
}
