//! RGB rasterization of synthetic scenes.

use alloc::vec;
use alloc::vec::Vec;

use super::synth::Scene;

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const PALETTE: [[u8; 3]; 4] = [[220, 40, 40], [40, 160, 70], [40, 80, 220], [230, 190, 20]];

/// Draws each object as a filled shape inside its cell on a white canvas.
///
/// Returns `size * size * 3` bytes, row-major RGB.
pub fn render_scene(scene: &Scene, size: usize) -> Vec<u8> {
    let mut img = vec![255u8; size * size * 3];
    let cell = size as f64 / scene.grid as f64;
    for o in &scene.objects {
        let x0 = o.col as f64 * cell;
        let y0 = o.row as f64 * cell;
        let margin = 0.15 * cell;
        let (lo_x, hi_x) = (x0 + margin, x0 + cell - margin);
        let (lo_y, hi_y) = (y0 + margin, y0 + cell - margin);
        let (cx, cy) = ((lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0);
        let half = (hi_x - lo_x) / 2.0;
        let color = PALETTE[o.color as usize % PALETTE.len()];
        let px_lo = x0.floor() as usize;
        let py_lo = y0.floor() as usize;
        let px_hi = ((x0 + cell).ceil() as usize).min(size);
        let py_hi = ((y0 + cell).ceil() as usize).min(size);
        for py in py_lo..py_hi {
            for px in px_lo..px_hi {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let (dx, dy) = (x - cx, y - cy);
                let inside = match o.shape {
                    0 => dx * dx + dy * dy <= half * half,
                    1 => dx.abs() <= half && dy.abs() <= half,
                    // apex up: width grows linearly from top to bottom
                    2 => dy.abs() <= half && dx.abs() <= (dy + half) / 2.0,
                    _ => dx.abs() + dy.abs() <= half,
                };
                if inside {
                    let i = (py * size + px) * 3;
                    img[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }
    img
}
