//! SVG rendering of evaluation curves and attention heatmaps.

use std::path::{Path, PathBuf};

use atd_core::sgca::AttentionRecord;
use atd_core::training::EvalLog;
use atd_core::{Error, Result};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

pub const CURVES_FILE: &str = "curves.json";

/// The exact points drawn, written next to the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub steps: Vec<usize>,
    pub seen_sr: Vec<f64>,
    pub unseen_sr: Vec<f64>,
    pub seen_spl: Vec<f64>,
    pub unseen_spl: Vec<f64>,
}

fn draw_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot: {e}"))
}

pub fn read_eval_log(path: &Path) -> Result<Vec<EvalLog>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn curves_from(log: &[EvalLog]) -> Curves {
    Curves {
        steps: log.iter().map(|e| e.step).collect(),
        seen_sr: log.iter().map(|e| e.seen.aggregate.sr).collect(),
        unseen_sr: log.iter().map(|e| e.unseen.aggregate.sr).collect(),
        seen_spl: log.iter().map(|e| e.seen.aggregate.spl).collect(),
        unseen_spl: log.iter().map(|e| e.unseen.aggregate.spl).collect(),
    }
}

fn line_chart(path: &Path, title: &str, steps: &[usize], series: &[(&str, &[f64], RGBColor)]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let x_max = steps.last().copied().unwrap_or(1).max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.0..x_max, 0.0..1.0)
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("step").y_desc(title).draw().map_err(draw_err)?;
    for &(name, ys, color) in series {
        let pts: Vec<(f64, f64)> = steps.iter().zip(ys).map(|(&s, &y)| (s as f64, y)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(draw_err)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

/// `sr.svg`, `spl.svg` and `curves.json` in `out`.
pub fn plot_curves(log: &[EvalLog], out: &Path) -> Result<Vec<PathBuf>> {
    if log.is_empty() {
        return Err(Error::Empty("evaluation log"));
    }
    std::fs::create_dir_all(out)?;
    let c = curves_from(log);
    let sr = out.join("sr.svg");
    let spl = out.join("spl.svg");
    line_chart(&sr, "SR", &c.steps, &[("seen", &c.seen_sr, BLUE), ("unseen", &c.unseen_sr, RED)])?;
    line_chart(&spl, "SPL", &c.steps, &[("seen", &c.seen_spl, BLUE), ("unseen", &c.unseen_spl, RED)])?;
    let json = out.join(CURVES_FILE);
    std::fs::write(&json, serde_json::to_string_pretty(&c)?)?;
    Ok(vec![sr, spl, json])
}

fn heat(v: f64) -> RGBColor {
    let t = v.clamp(0.0, 1.0);
    RGBColor((255.0 * t) as u8, (80.0 * (1.0 - t)) as u8, (255.0 * (1.0 - t)) as u8)
}

/// One heatmap per record, rows are queries and columns keys.
pub fn plot_heatmap(record: &AttentionRecord, path: &Path) -> Result<()> {
    if record.data.len() != record.rows * record.cols || record.rows == 0 || record.cols == 0 {
        return Err(Error::Shape(format!(
            "attention record {}x{} with {} values",
            record.rows,
            record.cols,
            record.data.len()
        )));
    }
    let cell = 40;
    let (w, h) = (record.cols as u32 * cell + 80, record.rows as u32 * cell + 80);
    let root = SVGBackend::new(path, (w, h)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let title = format!(
        "{} step {} cand {} layer {}",
        record.episode_id, record.step, record.candidate_index, record.layer_index
    );
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 12))
        .margin(8)
        .x_label_area_size(20)
        .y_label_area_size(20)
        .build_cartesian_2d(0..record.cols, 0..record.rows)
        .map_err(draw_err)?;
    chart.configure_mesh().disable_mesh().draw().map_err(draw_err)?;
    let m = record.matrix();
    chart
        .draw_series((0..record.rows).flat_map(|r| {
            let m = &m;
            (0..record.cols).map(move |c| {
                let y = record.rows - 1 - r;
                Rectangle::new([(c, y), (c + 1, y + 1)], heat(m.get(r, c)).filled())
            })
        }))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

pub fn plot_heatmaps(records: &[AttentionRecord], out: &Path, limit: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut paths = Vec::new();
    for r in records.iter().take(limit) {
        let name = format!("attn_{}_s{}_c{}_l{}.svg", r.episode_id, r.step, r.candidate_index, r.layer_index);
        let p = out.join(name);
        plot_heatmap(r, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(rows: usize, cols: usize, data: Vec<f64>) -> AttentionRecord {
        AttentionRecord { episode_id: "e".into(), step: 0, layer_index: 0, candidate_index: 0, rows, cols, data }
    }

    #[test]
    fn heatmap_rejects_mismatched_data() {
        let dir = tempfile::tempdir().unwrap();
        assert!(plot_heatmap(&record(2, 2, vec![0.5; 3]), &dir.path().join("x.svg")).is_err());
        plot_heatmap(&record(2, 2, vec![0.5; 4]), &dir.path().join("y.svg")).unwrap();
        assert!(std::fs::read_to_string(dir.path().join("y.svg")).unwrap().starts_with("<svg"));
    }

    #[test]
    fn empty_log_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(plot_curves(&[], dir.path()).is_err());
    }
}
