//! Grasp overlays on RGB images.
//!
//! The plate edges of a grasp (the two sides of length `h` at either end of
//! the opening) get their own color.

use image::{Rgb, RgbImage};

use crate::geometry::{GraspRect, Point};
use crate::preprocess::RgdImage;

pub const GT_PLATE: Rgb<u8> = Rgb([0, 0, 255]);
pub const GT_EDGE: Rgb<u8> = Rgb([0, 200, 0]);
pub const PRED_PLATE: Rgb<u8> = Rgb([255, 220, 0]);
pub const PRED_EDGE: Rgb<u8> = Rgb([230, 0, 0]);

/// Draws the segment `a`-`b` by sampling at sub-pixel steps; off-image
/// samples are ignored.
pub fn draw_line(img: &mut RgbImage, a: Point, b: Point, color: Rgb<u8>) {
    let steps = (a.distance(b) * 2.0).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t);
        if x >= 0.0 && y >= 0.0 && x < img.width() as f64 && y < img.height() as f64 {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

pub fn draw_grasp(img: &mut RgbImage, g: &GraspRect, plate: Rgb<u8>, edge: Rgb<u8>) {
    let v = g.corners();
    draw_line(img, v[0], v[1], edge);
    draw_line(img, v[2], v[3], edge);
    draw_line(img, v[1], v[2], plate);
    draw_line(img, v[3], v[0], plate);
}

/// Ground truths first, then predictions on top.
pub fn render_overlay(base: &RgbImage, ground_truth: &[GraspRect], predicted: &[GraspRect]) -> RgbImage {
    let mut img = base.clone();
    for g in ground_truth {
        draw_grasp(&mut img, g, GT_PLATE, GT_EDGE);
    }
    for g in predicted {
        draw_grasp(&mut img, g, PRED_PLATE, PRED_EDGE);
    }
    img
}

/// Displayable RGB for an RG-D image; `offset` is added back first (use the
/// mean offset for centered images, 0 otherwise).
pub fn rgd_preview(img: &RgdImage, offset: f32) -> RgbImage {
    RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let p = img.pixel(y as usize, x as usize);
        Rgb(p.map(|v| (v + offset).round().clamp(0.0, 255.0) as u8))
    })
}

pub fn has_color(img: &RgbImage, color: Rgb<u8>) -> bool {
    img.pixels().any(|p| *p == color)
}
