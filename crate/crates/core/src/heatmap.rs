//! Confusion-matrix heatmap rendered with a bitmap font.

use font8x8::legacy::BASIC_LEGACY;
use image::{Rgb, RgbImage};

use crate::data::CoarseEmotion;
use crate::heads::N_CLASSES;
use crate::metrics::Confusion;

pub const CELL: u32 = 80;
const LEFT: u32 = 80;
const TOP: u32 = 24;

fn draw_text(img: &mut RgbImage, text: &str, x: u32, y: u32, scale: u32, color: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let glyph = BASIC_LEGACY[(ch as usize).min(127)];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let px = x + (i as u32 * 8 + col) * scale + dx;
                        let py = y + row as u32 * scale + dy;
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
    }
}

/// Cell colour scales with the row-normalised count (per-class recall).
pub fn render(confusion: &Confusion) -> RgbImage {
    let n = N_CLASSES as u32;
    let mut img = RgbImage::from_pixel(LEFT + n * CELL, TOP + n * CELL, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    for (i, class) in CoarseEmotion::ALL.iter().enumerate() {
        let name = class.name();
        let i = i as u32;
        let w = name.len() as u32 * 8;
        draw_text(&mut img, name, LEFT + i * CELL + (CELL - w.min(CELL)) / 2, 8, 1, black);
        draw_text(&mut img, name, 4, TOP + i * CELL + CELL / 2 - 4, 1, black);
    }
    for r in 0..N_CLASSES {
        let row_total: u64 = confusion.counts[r].iter().sum();
        for c in 0..N_CLASSES {
            let count = confusion.counts[r][c];
            let frac = if row_total == 0 { 0.0 } else { count as f64 / row_total as f64 };
            let shade = |full: f64| (255.0 - frac * (255.0 - full)).round() as u8;
            let fill = Rgb([shade(25.0), shade(70.0), shade(160.0)]);
            let (x0, y0) = (LEFT + c as u32 * CELL, TOP + r as u32 * CELL);
            for y in y0 + 1..y0 + CELL - 1 {
                for x in x0 + 1..x0 + CELL - 1 {
                    img.put_pixel(x, y, fill);
                }
            }
            let text = count.to_string();
            let color = if frac > 0.5 { Rgb([255, 255, 255]) } else { black };
            let w = text.len() as u32 * 16;
            draw_text(&mut img, &text, x0 + (CELL - w.min(CELL)) / 2, y0 + CELL / 2 - 8, 2, color);
        }
    }
    img
}
