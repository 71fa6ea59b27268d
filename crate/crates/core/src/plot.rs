//! PNG figures: loss curves, the learning-rate schedule and reconstruction triptychs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use eomae_grad::{Matrix, ParamStore};
use image::{Rgb, RgbImage};
use plotters::prelude::*;

use crate::datamodel::{Modality, MultiModalSample, Raster};
use crate::error::{Error, Result};
use crate::masking::{MaskPlan, VisibilityGrid};
use crate::model::MultiMae;
use crate::objective::PATCH_STD_FLOOR;
use crate::tokenizer::unpatchify;

const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a system font for chart labels; charts are drawn unlabeled when none is found.
fn fonts_available() -> bool {
    static FOUND: OnceLock<bool> = OnceLock::new();
    *FOUND.get_or_init(|| {
        FONT_PATHS.iter().any(|p| match std::fs::read(p) {
            Ok(bytes) => {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
            }
            Err(_) => false,
        })
    })
}

const SERIES_COLORS: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(0, 0, 0),
    RGBColor(227, 119, 194),
];

pub type Series = (String, Vec<(f64, f64)>);

/// Line chart of several named series; `log_y` plots log10 of positive values.
pub fn line_chart(path: &Path, title: &str, x_label: &str, series: &[Series], log_y: bool) -> Result<()> {
    let err = |e: String| Error::Format { path: path.to_path_buf(), reason: e };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(_, s)| {
            s.iter()
                .filter(|(_, y)| y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, if log_y { y.log10() } else { y }))
                .collect()
        })
        .collect();
    if pts.iter().all(Vec::is_empty) {
        return Err(err("nothing to plot".into()));
    }
    let (w, h) = (900u32, 540u32);
    let mut buf = vec![0u8; (w * h * 3) as usize];
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    draw_lines(&mut buf, (w, h), title, if log_y { "log10" } else { "" }, x_label, &names, &pts).map_err(err)?;
    let img = RgbImage::from_raw(w, h, buf).ok_or_else(|| err("bitmap size mismatch".into()))?;
    save_png(&img, path)
}

fn draw_lines(
    buf: &mut [u8],
    size: (u32, u32),
    title: &str,
    y_label: &str,
    x_label: &str,
    names: &[&str],
    pts: &[Vec<(f64, f64)>],
) -> std::result::Result<(), String> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts.iter().flatten() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-12);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let s = |e: &dyn std::fmt::Display| e.to_string();

    let labeled = fonts_available();
    let root = BitMapBackend::with_buffer(buf, size).into_drawing_area();
    root.fill(&WHITE).map_err(|e| s(&e))?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if labeled {
        builder.caption(title, ("sans-serif", 22)).x_label_area_size(40).y_label_area_size(60);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(|e| s(&e))?;
    let mut mesh = chart.configure_mesh();
    if labeled {
        mesh.x_desc(x_label).y_desc(y_label);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(|e| s(&e))?;
    for (i, (name, p)) in names.iter().zip(pts).enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let drawn = chart.draw_series(LineSeries::new(p.iter().copied(), color.stroke_width(2))).map_err(|e| s(&e))?;
        if labeled {
            drawn.label(*name).legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], color.stroke_width(3)));
        }
    }
    if labeled {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(|e| s(&e))?;
    }
    root.present().map_err(|e| s(&e))
}

/// Fixed palette for land-cover classes; class `k` always gets the same color.
pub const CLASS_PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

fn class_color(k: usize) -> [u8; 3] {
    CLASS_PALETTE[k % CLASS_PALETTE.len()]
}

/// Renders a raster as an image: first three channels as RGB for
/// multi-channel modalities, grayscale otherwise, palette colors for SEG.
/// `range` fixes the stretch so panels of one modality are comparable.
pub fn render(m: Modality, r: &Raster, range: (f32, f32)) -> RgbImage {
    let (h, w) = (r.height() as u32, r.width() as u32);
    let (lo, hi) = range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to8 = |v: f32| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(w, h, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if m.is_categorical() {
            return Rgb(class_color(r.get(0, y, x).max(0.0) as usize));
        }
        if r.channels() >= 3 {
            Rgb([to8(r.get(0, y, x)), to8(r.get(1, y, x)), to8(r.get(2, y, x))])
        } else {
            let g = to8(r.get(0, y, x));
            Rgb([g, g, g])
        }
    })
}

/// 2nd and 98th percentile over all values of the given rasters.
pub fn stretch_range(rasters: &[&Raster]) -> (f32, f32) {
    let mut v: Vec<f32> = rasters.iter().flat_map(|r| r.data().iter().copied()).filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (0.0, 1.0);
    }
    v.sort_by(f32::total_cmp);
    let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
    (at(0.02), at(0.98))
}

/// Grays out masked patches.
pub fn gray_masked(img: &mut RgbImage, grid: &VisibilityGrid, patch: usize) {
    let (w, h) = img.dimensions();
    for y in 0..h {
        for x in 0..w {
            let (gy, gx) = (y as usize / patch, x as usize / patch);
            if gy < grid.rows && gx < grid.cols && !grid.is_visible(gy, gx) {
                img.put_pixel(x, y, Rgb([128, 128, 128]));
            }
        }
    }
}

/// One row per modality, three panels per row: masked input, prediction, ground truth.
pub struct TriptychRow {
    pub modality: Modality,
    pub masked_input: RgbImage,
    pub prediction: RgbImage,
    pub truth: RgbImage,
}

pub const TRIPTYCH_SCALE: u32 = 4;
const GAP: u32 = 4;

pub fn triptych(rows: &[TriptychRow]) -> RgbImage {
    let (pw, ph) = rows.first().map(|r| r.truth.dimensions()).unwrap_or((1, 1));
    let (pw, ph) = (pw * TRIPTYCH_SCALE, ph * TRIPTYCH_SCALE);
    let width = 3 * pw + 4 * GAP;
    let height = rows.len() as u32 * (ph + GAP) + GAP;
    let mut out = RgbImage::from_pixel(width, height.max(1), Rgb([255, 255, 255]));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, panel) in [&row.masked_input, &row.prediction, &row.truth].into_iter().enumerate() {
            let ox = GAP + ci as u32 * (pw + GAP);
            let oy = GAP + ri as u32 * (ph + GAP);
            for y in 0..ph {
                for x in 0..pw {
                    let p = *panel.get_pixel((x / TRIPTYCH_SCALE).min(panel.width() - 1), (y / TRIPTYCH_SCALE).min(panel.height() - 1));
                    out.put_pixel(ox + x, oy + y, p);
                }
            }
        }
    }
    out
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

/// Per-modality loss series from `(x, per-modality losses)` points, plus the total.
pub fn loss_series(points: &[(f64, f64, BTreeMap<Modality, f64>)]) -> Vec<Series> {
    let mut by_mod: BTreeMap<Modality, Vec<(f64, f64)>> = BTreeMap::new();
    for (x, _, per) in points {
        for (&m, &v) in per {
            by_mod.entry(m).or_default().push((*x, v));
        }
    }
    let mut out: Vec<Series> = by_mod.into_iter().map(|(m, s)| (m.name().to_string(), s)).collect();
    out.push(("total".into(), points.iter().map(|(x, t, _)| (*x, *t)).collect()));
    out
}

/// Predicted rasters of every modality plus the triptych rows for a sample
/// that has already been dataset-normalized.
pub fn reconstruct_sample(
    model: &MultiMae,
    store: &ParamStore,
    sample: &MultiModalSample,
    plan: &MaskPlan,
) -> Result<(BTreeMap<Modality, Raster>, Vec<TriptychRow>)> {
    let prepared = model.prepare(sample)?;
    let preds = model.reconstruct(store, &prepared, plan)?;
    let p = model.config.patch_size;
    let mut rasters = BTreeMap::new();
    let mut rows = Vec::new();
    for (m, mut pred) in preds {
        if model.config.objective.normalize_per_patch && !m.is_categorical() {
            denormalize_like(&mut pred, &prepared.inputs[&m]);
        }
        let raster = unpatchify(&pred, m.channels(), p, prepared.grid)?;
        let truth = sample
            .raster(m)
            .ok_or_else(|| Error::Load { sample: sample.sample_id.clone(), modality: m.name().into(), reason: "missing raster".into() })?;
        let range = stretch_range(&[truth]);
        let mut masked_input = render(m, truth, range);
        if let Some(grid) = plan.grid(m) {
            gray_masked(&mut masked_input, grid, p);
        }
        rows.push(TriptychRow { modality: m, masked_input, prediction: render(m, &raster, range), truth: render(m, truth, range) });
        rasters.insert(m, raster);
    }
    Ok((rasters, rows))
}

/// Maps per-patch-normalized predictions back using the reference patches' mean and std.
fn denormalize_like(pred: &mut Matrix, reference: &Matrix) {
    let n = reference.cols() as f64;
    for r in 0..pred.rows() {
        let row = reference.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let std = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(PATCH_STD_FLOOR);
        pred.row_mut(r).iter_mut().for_each(|v| *v = *v * std + mean);
    }
}
