//! RG-D input construction and the crop / translate / rotate / resize
//! augmentation, with grasp labels carried through the same transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DepthImage, GraspExample};
use crate::geometry::{GraspRect, Point, Similarity};

pub const MEAN_OFFSET: f32 = 144.0;
/// Attempts per sample before giving up when every grasp leaves the crop.
pub const MAX_AUGMENT_ATTEMPTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("dimension mismatch: rgb {rgb:?} vs depth {depth:?}")]
    DimensionMismatch { rgb: (usize, usize), depth: (usize, usize) },
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("example {example_id} sample {index}: no grasp survived {attempts} attempts")]
    SampleSkipped { example_id: String, index: u64, attempts: usize },
}

/// Three-channel float image, row-major, interleaved `(red, green, depth)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgdImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgdImage {
    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        RgdImage { width, height, data: vec![v; width * height * 3] }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Channel-major (`C x H x W`) copy as network input.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f64;
            }
        }
        out
    }

    /// Bilinear sample at continuous coordinates (pixel centers at `i + 0.5`);
    /// taps that fall outside the image read `fill`.
    fn sample(&self, x: f64, y: f64, fill: f32) -> [f32; 3] {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let ax = (fx - x0) as f32;
        let ay = (fy - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let tap = |r: i64, c: i64| -> [f32; 3] {
            if r < 0 || c < 0 || r >= self.height as i64 || c >= self.width as i64 {
                [fill; 3]
            } else {
                self.pixel(r as usize, c as usize)
            }
        };
        let (p00, p01, p10, p11) = (tap(y0, x0), tap(y0, x0 + 1), tap(y0 + 1, x0), tap(y0 + 1, x0 + 1));
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + ax * (p01[c] - p00[c]);
            let bot = p10[c] + ax * (p11[c] - p10[c]);
            out[c] = top + ay * (bot - top);
        }
        out
    }
}

/// Maps present depths of this image affinely onto `[0, 255]`; missing pixels
/// and constant-depth images map to 0.
pub fn normalize_depth(depth: &DepthImage) -> Vec<f32> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (v, p) in depth.values.iter().zip(&depth.present) {
        if *p {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let range = hi - lo;
    depth
        .values
        .iter()
        .zip(&depth.present)
        .map(|(v, p)| if *p && range > 0.0 { (v - lo) / range * 255.0 } else { 0.0 })
        .collect()
}

/// Replaces the blue channel with normalized depth.
pub fn fuse_rgd(rgb: &image::RgbImage, depth: &[f32], depth_dims: (usize, usize)) -> Result<RgdImage, PreprocessError> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if (w, h) != depth_dims || depth.len() != w * h {
        return Err(PreprocessError::DimensionMismatch { rgb: (w, h), depth: depth_dims });
    }
    let mut data = Vec::with_capacity(w * h * 3);
    for (px, d) in rgb.pixels().zip(depth) {
        data.extend_from_slice(&[px[0] as f32, px[1] as f32, *d]);
    }
    Ok(RgdImage { width: w, height: h, data })
}

pub fn mean_center(img: &RgdImage) -> RgdImage {
    RgdImage { data: img.data.iter().map(|v| v - MEAN_OFFSET).collect(), ..img.clone() }
}

/// The un-centered RG-D image for an example.
pub fn source_image(example: &GraspExample) -> Result<RgdImage, PreprocessError> {
    let d = normalize_depth(&example.depth);
    fuse_rgd(&example.rgb, &d, (example.depth.width, example.depth.height))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub max_translation: usize,
    /// Rotations are drawn uniformly from `[0, rotation_range)` degrees.
    pub rotation_range: f64,
    pub output_size: usize,
    pub count_per_image: usize,
    pub mean_offset: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_size: 320,
            max_translation: 50,
            rotation_range: 360.0,
            output_size: 224,
            count_per_image: 3000,
            mean_offset: MEAN_OFFSET,
        }
    }
}

impl AugmentConfig {
    pub fn scale(&self) -> f64 {
        self.output_size as f64 / self.crop_size as f64
    }

    pub fn validate(&self, src_width: usize, src_height: usize) -> Result<(), PreprocessError> {
        if self.crop_size == 0 || self.output_size == 0 || self.count_per_image == 0 {
            return Err(PreprocessError::InvalidConfig("sizes and counts must be positive".into()));
        }
        if !(self.rotation_range >= 0.0 && self.rotation_range <= 360.0) {
            return Err(PreprocessError::InvalidConfig(format!("rotation range {} outside [0, 360]", self.rotation_range)));
        }
        if self.crop_size + 2 * self.max_translation > src_width.min(src_height) {
            return Err(PreprocessError::InvalidConfig(format!(
                "crop {} + 2 x translation {} does not fit a {src_width}x{src_height} image",
                self.crop_size, self.max_translation
            )));
        }
        Ok(())
    }
}

/// A network-ready view of an example: centered image, grasps in the output
/// frame, and the source-to-output transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub example_id: String,
    pub index: Option<u64>,
    pub image: RgdImage,
    pub grasps: Vec<GraspRect>,
    pub transform: Similarity,
}

/// Source-to-output transform for a crop whose center sits at `image center +
/// shift`, rotated by `rotation_deg` about that center, then resized.
pub fn crop_transform(src_width: usize, src_height: usize, cfg: &AugmentConfig, shift: Point, rotation_deg: f64) -> Similarity {
    let center = Point::new(src_width as f64 / 2.0 + shift.x, src_height as f64 / 2.0 + shift.y);
    let half = cfg.crop_size as f64 / 2.0;
    Similarity::new(rotation_deg, center, Point::new(half - center.x, half - center.y), cfg.scale())
}

/// Resamples `src` into an `out x out` image through `transform`, filling
/// uncovered pixels with the mean value, then mean-centers.
pub fn warp(src: &RgdImage, transform: &Similarity, out: usize, cfg: &AugmentConfig) -> RgdImage {
    let inv = transform.inverse();
    let mut data = Vec::with_capacity(out * out * 3);
    for v in 0..out {
        for u in 0..out {
            let p = inv.apply(Point::new(u as f64 + 0.5, v as f64 + 0.5));
            let px = src.sample(p.x, p.y, cfg.mean_offset);
            data.extend(px.iter().map(|c| c - cfg.mean_offset));
        }
    }
    RgdImage { width: out, height: out, data }
}

fn grasps_in_frame(grasps: &[GraspRect], t: &Similarity, size: usize) -> Vec<GraspRect> {
    let s = size as f64;
    grasps
        .iter()
        .map(|g| t.apply_rect(g))
        .filter(|g| g.x >= 0.0 && g.y >= 0.0 && g.x < s && g.y < s)
        .collect()
}

/// Seed for one augmented sample, derived from the global seed, example id and
/// sample index so that samples can be generated in any order.
pub fn sample_seed(global_seed: u64, example_id: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update((example_id.len() as u64).to_le_bytes());
    h.update(example_id.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Draws the transform for one sample, retrying while no grasp survives.
pub fn draw_augment_transform(
    example: &GraspExample,
    cfg: &AugmentConfig,
    global_seed: u64,
    index: u64,
) -> Result<(Similarity, Vec<GraspRect>), PreprocessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(global_seed, &example.example_id, index));
    let m = cfg.max_translation as f64;
    for _ in 0..MAX_AUGMENT_ATTEMPTS {
        let shift = Point::new(rng.gen_range(-m..=m), rng.gen_range(-m..=m));
        let rot = if cfg.rotation_range > 0.0 { rng.gen_range(0.0..cfg.rotation_range) } else { 0.0 };
        let t = crop_transform(example.width(), example.height(), cfg, shift, rot);
        let grasps = grasps_in_frame(&example.positive_grasps, &t, cfg.output_size);
        if !grasps.is_empty() {
            return Ok((t, grasps));
        }
    }
    Err(PreprocessError::SampleSkipped {
        example_id: example.example_id.clone(),
        index,
        attempts: MAX_AUGMENT_ATTEMPTS,
    })
}

/// One augmented training sample. `source` is the un-centered RG-D image of
/// `example` (see [`source_image`]).
pub fn augment_one(
    example: &GraspExample,
    source: &RgdImage,
    cfg: &AugmentConfig,
    global_seed: u64,
    index: u64,
) -> Result<Sample, PreprocessError> {
    cfg.validate(source.width, source.height)?;
    let (transform, grasps) = draw_augment_transform(example, cfg, global_seed, index)?;
    Ok(Sample {
        example_id: example.example_id.clone(),
        index: Some(index),
        image: warp(source, &transform, cfg.output_size, cfg),
        grasps,
        transform,
    })
}

/// Center crop and resize, no randomness. Grasps whose centers fall outside
/// the crop are dropped (the list may end up empty).
pub fn preprocess_test(example: &GraspExample, source: &RgdImage, cfg: &AugmentConfig) -> Sample {
    let transform = crop_transform(source.width, source.height, cfg, Point::new(0.0, 0.0), 0.0);
    Sample {
        example_id: example.example_id.clone(),
        index: None,
        image: warp(source, &transform, cfg.output_size, cfg),
        grasps: grasps_in_frame(&example.positive_grasps, &transform, cfg.output_size),
        transform,
    }
}

/// `cfg.count_per_image` samples, each seeded independently by index.
pub fn augment_stream<'a>(
    example: &'a GraspExample,
    source: &'a RgdImage,
    cfg: &'a AugmentConfig,
    global_seed: u64,
) -> impl Iterator<Item = Result<Sample, PreprocessError>> + 'a {
    (0..cfg.count_per_image as u64).map(move |i| augment_one(example, source, cfg, global_seed, i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DepthImage;
    use crate::geometry::angle_distance;

    fn example(w: u32, h: u32, grasps: Vec<GraspRect>) -> GraspExample {
        let rgb = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let mut depth = DepthImage::missing(w as usize, h as usize);
        for r in 0..h as usize {
            for c in 0..w as usize {
                depth.set(r, c, 1.0 + (r + c) as f32 * 1e-3);
            }
        }
        GraspExample {
            example_id: "0100".into(),
            rgb,
            depth,
            positive_grasps: grasps,
            object_id: 1,
            category: None,
        }
    }

    #[test]
    fn depth_normalization() {
        let mut d = DepthImage::missing(2, 2);
        for i in 0..4 {
            d.set(i / 2, i % 2, 2.0);
        }
        assert!(normalize_depth(&d).iter().all(|v| *v == 0.0));

        let mut d = DepthImage::missing(2, 1);
        d.set(0, 0, 1.0);
        d.set(0, 1, 3.0);
        assert_eq!(normalize_depth(&d), vec![0.0, 255.0]);

        let mut d = DepthImage::missing(4, 1);
        d.set(0, 0, 1.0);
        d.set(0, 1, 2.0);
        d.set(0, 2, 3.0);
        assert_eq!(normalize_depth(&d), vec![0.0, 127.5, 255.0, 0.0]);

        assert!(normalize_depth(&DepthImage::missing(3, 3)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fusion() {
        let rgb = image::RgbImage::from_pixel(3, 2, image::Rgb([10, 20, 30]));
        let f = fuse_rgd(&rgb, &[99.0; 6], (3, 2)).unwrap();
        assert!(f.data.chunks(3).all(|p| p == [10.0, 20.0, 99.0]));
        let z = fuse_rgd(&rgb, &normalize_depth(&DepthImage::missing(3, 2)), (3, 2)).unwrap();
        assert!(z.channel(2).iter().all(|v| *v == 0.0));
        let depth: Vec<f32> = (0..6).map(|i| i as f32 * 10.0).collect();
        assert_eq!(fuse_rgd(&rgb, &depth, (3, 2)).unwrap().channel(2), depth);
        assert!(matches!(fuse_rgd(&rgb, &[0.0; 4], (2, 2)), Err(PreprocessError::DimensionMismatch { .. })));
    }

    #[test]
    fn centering_constants() {
        let img = RgdImage { width: 3, height: 1, data: vec![144.0, 0.0, 255.0, 144.0, 0.0, 255.0, 1.0, 2.0, 3.0] };
        let c = mean_center(&img);
        assert_eq!(&c.data[..3], &[0.0, -144.0, 111.0]);
    }

    #[test]
    fn test_view_maps_center() {
        let g = GraspRect::new(320.0, 240.0, 10.0, 20.0, 40.0).unwrap();
        let outside = GraspRect::new(20.0, 20.0, 0.0, 5.0, 5.0).unwrap();
        let ex = example(640, 480, vec![g, outside]);
        let src = source_image(&ex).unwrap();
        let cfg = AugmentConfig::default();
        let s = preprocess_test(&ex, &src, &cfg);
        assert_eq!(s.grasps.len(), 1);
        let t = s.grasps[0];
        assert!((t.x - 112.0).abs() < 1e-9 && (t.y - 112.0).abs() < 1e-9);
        assert!((t.h - 14.0).abs() < 1e-9 && (t.w - 28.0).abs() < 1e-9);
        assert!((t.theta - 10.0).abs() < 1e-9);
        assert_eq!(s.image.width, 224);
        assert_eq!(preprocess_test(&ex, &src, &cfg), s);
    }

    #[test]
    fn zero_motion_augment_matches_test_view() {
        let g = GraspRect::new(320.0, 240.0, 0.0, 20.0, 40.0).unwrap();
        let ex = example(640, 480, vec![g]);
        let t = crop_transform(640, 480, &AugmentConfig::default(), Point::new(0.0, 0.0), 0.0);
        let m = t.apply_rect(&g);
        assert!((m.x - 112.0).abs() < 1e-9 && (m.y - 112.0).abs() < 1e-9);
        assert!((m.w - 28.0).abs() < 1e-9);

        let r = crop_transform(640, 480, &AugmentConfig::default(), Point::new(0.0, 0.0), 90.0);
        let off = GraspRect::new(340.0, 240.0, 0.0, 20.0, 40.0).unwrap();
        let mr = r.apply_rect(&off);
        assert!(angle_distance(mr.theta, 90.0) < 1e-9);
        // 20 px right of the crop center turns into 20 px below it, scaled by 0.7
        assert!((mr.x - 112.0).abs() < 1e-9 && (mr.y - (112.0 + 14.0)).abs() < 1e-9);
        let _ = ex;
    }

    #[test]
    fn augmentation_is_deterministic_and_in_range() {
        let g = GraspRect::new(320.0, 240.0, 30.0, 30.0, 60.0).unwrap();
        let ex = example(640, 480, vec![g]);
        let src = source_image(&ex).unwrap();
        let cfg = AugmentConfig { output_size: 64, count_per_image: 3, ..AugmentConfig::default() };
        let a: Vec<Sample> = augment_stream(&ex, &src, &cfg, 9).map(Result::unwrap).collect();
        assert_eq!(a.len(), 3);
        let reordered = [2u64, 0, 1].map(|i| augment_one(&ex, &src, &cfg, 9, i).unwrap());
        assert_eq!(reordered[1], a[0]);
        assert_eq!(reordered[2], a[1]);
        assert_eq!(reordered[0], a[2]);
        for s in &a {
            assert!(s.image.data.iter().all(|v| (-144.0..=111.0).contains(v)));
            assert!(!s.grasps.is_empty());
        }
        assert_ne!(a[0].transform, a[1].transform);
    }

    #[test]
    fn seeds_depend_on_every_input() {
        let base = sample_seed(1, "0100", 0);
        assert_ne!(base, sample_seed(2, "0100", 0));
        assert_ne!(base, sample_seed(1, "0101", 0));
        assert_ne!(base, sample_seed(1, "0100", 1));
        assert_eq!(base, sample_seed(1, "0100", 0));
    }

    #[test]
    fn unreachable_grasps_skip_the_sample() {
        let g = GraspRect::new(2.0, 2.0, 0.0, 2.0, 2.0).unwrap();
        let ex = example(640, 480, vec![g]);
        let src = source_image(&ex).unwrap();
        let cfg = AugmentConfig { output_size: 32, ..AugmentConfig::default() };
        assert!(matches!(augment_one(&ex, &src, &cfg, 0, 0), Err(PreprocessError::SampleSkipped { .. })));
    }

    #[test]
    fn config_validation() {
        let cfg = AugmentConfig::default();
        assert!(cfg.validate(640, 480).is_ok());
        assert!(cfg.validate(400, 400).is_err());
        assert!(AugmentConfig { output_size: 0, ..cfg }.validate(640, 480).is_err());
    }
}
