//! Bird's-eye renders of occupancy grids and metric curves.
//!
//! Canvas convention: ego +x points up and +y points left, so voxel
//! `(x, y)` of a grid with dims `(X, Y, _)` covers the `scale`-pixel block
//! at column `Y - 1 - y`, row `X - 1 - x`. Each column shows the label of
//! its highest occupied voxel.

use std::fmt::Write as _;

use crate::evaluator::MetricReport;
use crate::scene_data::classes::{class_color, FREE_COLOR, NUM_CLASSES, PALETTE};
use crate::scene_data::{Image, OccupancyGrid};

/// Gap between panels and around the legend, pixels.
pub const GAP: usize = 4;
/// Legend swatch edge, pixels.
pub const SWATCH: usize = 8;
const BACKGROUND: [u8; 3] = [40, 40, 40];

/// Label seen from above in every `(x, y)` column, `None` when free.
pub fn top_labels(grid: &OccupancyGrid) -> Vec<Option<u8>> {
    let [nx, ny, nz] = grid.spec.dims;
    let mut out = vec![None; nx * ny];
    for x in 0..nx {
        for y in 0..ny {
            out[x * ny + y] = (0..nz)
                .rev()
                .map(|z| grid.get([x, y, z]))
                .find(|&l| l != grid.free());
        }
    }
    out
}

/// Canvas pixel (column, row) of the top-left corner of voxel column `(x, y)`.
pub fn voxel_pixel(grid: &OccupancyGrid, x: usize, y: usize, scale: usize) -> (usize, usize) {
    let [nx, ny, _] = grid.spec.dims;
    ((ny - 1 - y) * scale, (nx - 1 - x) * scale)
}

fn blit(canvas: &mut Image, grid: &OccupancyGrid, left: usize, top: usize, scale: usize) {
    let [nx, ny, _] = grid.spec.dims;
    let labels = top_labels(grid);
    for x in 0..nx {
        for y in 0..ny {
            let color = labels[x * ny + y].map_or(FREE_COLOR, class_color);
            let (u0, v0) = voxel_pixel(grid, x, y, scale);
            for dv in 0..scale {
                for du in 0..scale {
                    canvas.set(left + u0 + du, top + v0 + dv, color);
                }
            }
        }
    }
}

/// Single top-down render with the legend strip on the right.
pub fn render_bev(grid: &OccupancyGrid, scale: usize) -> Image {
    render_rows(&[vec![grid.clone()]], scale)
}

/// Grid of panels, one row per entry of `rows` (for example ground truth
/// then prediction), one column per horizon, legend on the right. Every
/// grid must share the first grid's dims.
pub fn render_rows(rows: &[Vec<OccupancyGrid>], scale: usize) -> Image {
    let first = rows.iter().flatten().next().expect("at least one grid");
    let [nx, ny, _] = first.spec.dims;
    let (pw, ph) = (ny * scale, nx * scale);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let legend_h = NUM_CLASSES * (SWATCH + 2);
    let width = GAP + cols * (pw + GAP) + SWATCH + GAP;
    let height = (GAP + rows.len() * (ph + GAP)).max(GAP + legend_h + GAP);
    let mut canvas = Image::new(width, height);
    for v in 0..height {
        for u in 0..width {
            canvas.set(u, v, BACKGROUND);
        }
    }
    for (r, row) in rows.iter().enumerate() {
        for (c, grid) in row.iter().enumerate() {
            assert_eq!(
                grid.spec.dims, first.spec.dims,
                "panels must share grid dims"
            );
            blit(
                &mut canvas,
                grid,
                GAP + c * (pw + GAP),
                GAP + r * (ph + GAP),
                scale,
            );
        }
    }
    let lx = GAP + cols * (pw + GAP);
    for (k, color) in PALETTE.iter().enumerate() {
        let top = GAP + k * (SWATCH + 2);
        for dv in 0..SWATCH {
            for du in 0..SWATCH {
                canvas.set(lx + du, top + dv, *color);
            }
        }
    }
    canvas
}

/// Pixel origin of panel `(row, col)` in a [`render_rows`] canvas.
pub fn panel_origin(grid: &OccupancyGrid, row: usize, col: usize, scale: usize) -> (usize, usize) {
    let [nx, ny, _] = grid.spec.dims;
    (
        GAP + col * (ny * scale + GAP),
        GAP + row * (nx * scale + GAP),
    )
}

/// SVG line chart of IoU and mIoU against horizon for one or more reports.
pub fn metric_curves_svg(reports: &[(String, MetricReport)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let max_h = reports
        .iter()
        .flat_map(|(_, r)| r.horizons.iter().map(|m| m.horizon))
        .max()
        .unwrap_or(1)
        .max(2) as f64;
    let px = |t: f64| pad + (t - 1.0) / (max_h - 1.0) * (w - 2.0 * pad);
    let py = |v: f64| h - pad - v / 100.0 * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
        h - pad
    );
    for t in 1..=max_h as usize {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">t+{t}</text>"#,
            px(t as f64),
            h - pad + 16.0
        );
    }
    for v in [0, 25, 50, 75, 100] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v}</text>"#,
            pad - 4.0,
            py(f64::from(v)) + 4.0
        );
    }
    let colors = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    ];
    for (k, (name, r)) in reports.iter().enumerate() {
        let color = colors[k % colors.len()];
        for (metric, dash) in [("IoU", ""), ("mIoU", r#" stroke-dasharray="5,3""#)] {
            let pts: Vec<String> = r
                .horizons
                .iter()
                .map(|m| {
                    format!(
                        "{:.1},{:.1}",
                        px(m.horizon as f64),
                        py(if metric == "IoU" { m.iou } else { m.miou })
                    )
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
                pts.join(" ")
            );
        }
        let y = pad + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" font-size="11" fill="{color}">{name} (solid IoU, dashed mIoU)</text>"#,
            w - pad - 180.0
        );
    }
    s.push_str("</svg>\n");
    s
}
