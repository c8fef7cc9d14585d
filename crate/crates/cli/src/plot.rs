//! Per-task mAP curves as SVG.

use std::path::Path;

use plotters::prelude::*;

const PALETTE: [RGBColor; 7] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(127, 127, 127),
];

/// Draws one line per method: "all" mAP (percent) after each task.
pub fn task_curves_svg(
    path: &Path,
    title: &str,
    curves: &[(String, Vec<(usize, f64)>)],
) -> Result<(), Box<dyn std::error::Error>> {
    let max_task = curves
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(2);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.8f64..max_task as f64 + 0.2, 0f64..100f64)?;
    chart
        .configure_mesh()
        .x_desc("task")
        .y_desc("mAP (all classes)")
        .x_labels(max_task)
        .x_label_formatter(&|x| format!("{}", x.round() as i64))
        .draw()?;
    for (i, (method, pts)) in curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let series: Vec<(f64, f64)> = pts.iter().map(|&(t, v)| (t as f64, v)).collect();
        chart
            .draw_series(LineSeries::new(series.clone(), colour.stroke_width(2)))?
            .label(method.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], colour.stroke_width(2)));
        chart.draw_series(series.into_iter().map(|p| Circle::new(p, 3, colour.filled())))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}
