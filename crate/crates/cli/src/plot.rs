use std::path::Path;

use anyhow::{anyhow, Result};
use patchvo::costsweep::ParetoPoint;
use plotters::prelude::*;

/// Scatter of every evaluated cell with the Pareto front and knee marked.
pub fn sweep_plot(path: &Path, points: &[ParetoPoint], front: &[ParetoPoint], knee: Option<ParetoPoint>) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| anyhow!("drawing {}: {e}", path.display());
    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let span = |f: fn(&ParetoPoint) -> f64| {
        let (lo, hi) = points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi > lo {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = span(|p| p.x);
    let (y0, y1) = span(|p| p.y);
    let mut chart = ChartBuilder::on(&root)
        .caption("patch-graph sweep", ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("GMAC per frame")
        .y_desc("metric")
        .draw()
        .map_err(|e| err(&e))?;
    chart
        .draw_series(points.iter().map(|p| Circle::new((p.x, p.y), 3, BLUE.mix(0.5).filled())))
        .map_err(|e| err(&e))?
        .label("cells")
        .legend(|(x, y)| Circle::new((x, y), 3, BLUE.filled()));
    chart
        .draw_series(LineSeries::new(front.iter().map(|p| (p.x, p.y)), RED.stroke_width(2)))
        .map_err(|e| err(&e))?
        .label("Pareto front")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RED));
    if let Some(k) = knee {
        chart
            .draw_series(std::iter::once(TriangleMarker::new((k.x, k.y), 8, BLACK.filled())))
            .map_err(|e| err(&e))?
            .label(format!("knee ({}, {}, {})", k.n_patches, k.removal_window, k.patch_lifetime))
            .legend(|(x, y)| TriangleMarker::new((x, y), 6, BLACK.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
