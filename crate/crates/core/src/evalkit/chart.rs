//! Grouped bar charts of aggregated results.

use image::{Rgb, RgbImage};

use super::report::ResultsFile;

const BAR_W: u32 = 12;
const GAP: u32 = 10;
const HEIGHT: u32 = 220;
const MARGIN: u32 = 20;
const PALETTE: [[u8; 3]; 4] = [[66, 114, 196], [237, 125, 49], [112, 173, 71], [165, 105, 189]];

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: [u8; 3]) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(c));
        }
    }
}

/// One group of bars per aggregated row, one bar per numeric column, on a
/// fixed 0..100 scale with grid lines every 25 points.
pub fn render_bar_chart(file: &ResultsFile) -> RgbImage {
    let agg = file.aggregate();
    let series = file.meta.experiment.columns().1.len() as u32;
    let group_w = series * BAR_W + GAP;
    let width = 2 * MARGIN + (agg.len() as u32).max(1) * group_w;
    let mut img = RgbImage::from_pixel(width, HEIGHT + 2 * MARGIN, Rgb([255, 255, 255]));
    let base = MARGIN + HEIGHT;
    for tick in 0..=4 {
        let y = base - tick * HEIGHT / 4;
        fill(&mut img, MARGIN, y, width - MARGIN, y + 1, [220, 220, 220]);
    }
    for (g, (_, values)) in agg.iter().enumerate() {
        let gx = MARGIN + GAP / 2 + g as u32 * group_w;
        for (s, v) in values.iter().enumerate() {
            let h = if v.is_finite() {
                (v.clamp(0.0, 100.0) / 100.0 * HEIGHT as f64).round() as u32
            } else {
                0
            };
            let x = gx + s as u32 * BAR_W;
            fill(&mut img, x, base - h, x + BAR_W - 2, base, PALETTE[s % PALETTE.len()]);
        }
    }
    fill(&mut img, MARGIN, base, width - MARGIN, base + 1, [0, 0, 0]);
    img
}
