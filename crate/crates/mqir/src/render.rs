//! PNG thumbnails of synthetic scenes.

use std::io::Cursor;

use image::{ImageFormat, RgbImage};
use mqir_core::data::render::render_scene;
use mqir_core::data::Scene;

pub const THUMBNAIL_SIZE: u32 = 256;

pub fn scene_png(scene: &Scene) -> Vec<u8> {
    let pixels = render_scene(scene, THUMBNAIL_SIZE as usize);
    let img = RgbImage::from_raw(THUMBNAIL_SIZE, THUMBNAIL_SIZE, pixels).expect("renderer returns size*size*3 bytes");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("PNG encoding into memory");
    out.into_inner()
}
