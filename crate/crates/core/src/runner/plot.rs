//! PNG artifacts: dataset contact sheet, loss curves, metric bars.

use std::path::Path;

use image::{imageops, Rgb, RgbImage};
use plotters::prelude::*;

use crate::data::io::{image_to_rgb, mask_for};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::prompting::exemplars::{mask_value, palette_color};
use crate::tasks::{TaskKind, NUM_TASKS};
use crate::train::StepRecord;

const TASK_COLORS: [RGBColor; NUM_TASKS] = [
    RGBColor(214, 39, 40),
    RGBColor(31, 119, 180),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
];

const PLOT_SIZE: (u32, u32) = (800, 480);

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Invalid(format!("plotting failed: {e}"))
}

fn save_rgb(buf: Vec<u8>, path: &Path) -> Result<()> {
    let img = RgbImage::from_raw(PLOT_SIZE.0, PLOT_SIZE.1, buf).expect("buffer matches plot size");
    img.save(path)?;
    Ok(())
}

/// Image with its labels painted on: masks blended in category colors,
/// boxes as outlines.
pub fn annotate(s: &Sample) -> RgbImage {
    let mut img = image_to_rgb(&s.image);
    for t in [TaskKind::Sem, TaskKind::Driv, TaskKind::Lane] {
        let Some(m) = mask_for(&s.annotations, t) else {
            continue;
        };
        for ((y, x), &v) in m.indexed_iter() {
            let k = (0..t.num_categories()).find(|&k| mask_value(t, k) == v);
            if let Some(k) = k {
                let c = palette_color(t, k);
                let p = img.get_pixel_mut(x as u32, y as u32);
                for ch in 0..3 {
                    p[ch] = (0.5 * p[ch] as f32 + 0.5 * 255.0 * c[ch]).round() as u8;
                }
            }
        }
    }
    let (w, h) = img.dimensions();
    for b in &s.annotations.boxes {
        let c = palette_color(TaskKind::Det, b.category);
        let px = Rgb([
            (c[0] * 255.0) as u8,
            (c[1] * 255.0) as u8,
            (c[2] * 255.0) as u8,
        ]);
        let (x1, y1) = (
            (b.x1.max(0.0) as u32).min(w - 1),
            (b.y1.max(0.0) as u32).min(h - 1),
        );
        let (x2, y2) = (
            (b.x2.ceil() as u32).min(w).saturating_sub(1),
            (b.y2.ceil() as u32).min(h).saturating_sub(1),
        );
        for x in x1..=x2 {
            img.put_pixel(x, y1, px);
            img.put_pixel(x, y2, px);
        }
        for y in y1..=y2 {
            img.put_pixel(x1, y, px);
            img.put_pixel(x2, y, px);
        }
    }
    img
}

/// Grid of raw and annotated image pairs, four pairs per row.
pub fn contact_sheet(samples: &[Sample], path: &Path) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("no samples for the contact sheet".into()))?;
    let (h, w, _) = first.image.dim();
    let (w, h) = (w as u32, h as u32);
    let cols = 4u32;
    let rows = (samples.len() as u32).div_ceil(cols);
    let pad = 2u32;
    let mut sheet = RgbImage::from_pixel(
        cols * (2 * w + 3 * pad),
        rows * (h + pad) + pad,
        Rgb([255, 255, 255]),
    );
    for (i, s) in samples.iter().enumerate() {
        let (c, r) = (i as u32 % cols, i as u32 / cols);
        let x0 = (c * (2 * w + 3 * pad) + pad) as i64;
        let y0 = (r * (h + pad) + pad) as i64;
        imageops::overlay(&mut sheet, &image_to_rgb(&s.image), x0, y0);
        imageops::overlay(&mut sheet, &annotate(s), x0 + (w + pad) as i64, y0);
    }
    sheet.save(path)?;
    Ok(())
}

/// Total loss in black and per-task losses in task colors, against step.
pub fn loss_curve(records: &[StepRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Invalid("empty training log".into()));
    }
    let mut buf = vec![0u8; (PLOT_SIZE.0 * PLOT_SIZE.1 * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, PLOT_SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let last = records.last().unwrap().step as f64 + 1.0;
        let ymax = records
            .iter()
            .flat_map(|r| std::iter::once(r.total).chain(r.losses.0.iter().flatten().copied()))
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max)
            .max(1e-6);
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .build_cartesian_2d(0f64..last, 0f64..ymax * 1.05)
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(
                records.iter().map(|r| (r.step as f64, r.total)),
                &BLACK,
            ))
            .map_err(plot_err)?;
        for t in TaskKind::ALL {
            let pts: Vec<(f64, f64)> = records
                .iter()
                .filter_map(|r| r.losses[t].map(|v| (r.step as f64, v)))
                .collect();
            if !pts.is_empty() {
                chart
                    .draw_series(LineSeries::new(pts, &TASK_COLORS[t.index()]))
                    .map_err(plot_err)?;
            }
        }
        root.present().map_err(plot_err)?;
    }
    save_rgb(buf, path)
}

/// Grouped bars of the four headline metrics (0–100), one group per run.
pub fn metric_bars(reports: &[EvalReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Invalid("no reports to plot".into()));
    }
    let mut buf = vec![0u8; (PLOT_SIZE.0 * PLOT_SIZE.1 * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, PLOT_SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let groups = reports.len() as f64;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .build_cartesian_2d(0f64..groups, 0f64..100f64)
            .map_err(plot_err)?;
        let width = 0.8 / NUM_TASKS as f64;
        for (g, r) in reports.iter().enumerate() {
            for t in TaskKind::ALL {
                let x0 = g as f64 + 0.1 + width * t.index() as f64;
                let v = r.metrics().get(t);
                chart
                    .draw_series(std::iter::once(Rectangle::new(
                        [(x0, 0.0), (x0 + width * 0.9, v)],
                        TASK_COLORS[t.index()].filled(),
                    )))
                    .map_err(plot_err)?;
            }
        }
        root.present().map_err(plot_err)?;
    }
    save_rgb(buf, path)
}
