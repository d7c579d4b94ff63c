//! Synthetic RG-D scenes with analytic grasps, written in the Cornell layout.
//!
//! Grasp convention: `w` (the gripper opening) runs along θ and spans the
//! part being grasped; `h` is the plate size.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_depth_cloud, write_rect_file, DepthImage, GraspExample};
use crate::geometry::{GraspRect, Point};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("example id {0:?} is not a number")]
    BadId(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    /// Grasps anywhere along the bar.
    Bar,
    /// A bar graspable only near its two ends.
    BarEnds,
    /// Grasps across the rim only.
    Disc,
    /// Two perpendicular limbs sharing a corner; grasps on either limb.
    Ell,
}

impl ShapeKind {
    /// Category label used in label files.
    pub fn category(&self) -> &'static str {
        match self {
            ShapeKind::Bar | ShapeKind::BarEnds => "bar",
            ShapeKind::Disc => "disc",
            ShapeKind::Ell => "ell",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Bar => "bar",
            ShapeKind::BarEnds => "bar-ends",
            ShapeKind::Disc => "disc",
            ShapeKind::Ell => "ell",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bar" => Ok(ShapeKind::Bar),
            "bar-ends" => Ok(ShapeKind::BarEnds),
            "disc" => Ok(ShapeKind::Disc),
            "ell" => Ok(ShapeKind::Ell),
            _ => Err(format!("unknown shape {s:?}")),
        }
    }
}

/// Two-cluster grasps sit at least this fraction of the bar length from its middle.
pub const END_BAND: f64 = 0.36;

pub const SYNTH_VOCABULARY: [&str; 3] = ["bar", "disc", "ell"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: ShapeKind,
    pub width: usize,
    pub height: usize,
    /// Bar midpoint, disc center, or the middle of an ell's bounding square.
    pub center: Point,
    /// Direction of the bar axis (or the ell's first limb), degrees.
    pub orientation: f64,
    /// Bar or limb length.
    pub length: f64,
    /// Bar or limb thickness.
    pub thickness: f64,
    pub radius: f64,
    pub grasp_count: usize,
    /// Grasp `h`.
    pub plate: f64,
    /// Extra opening beyond the grasped part's width.
    pub clearance: f64,
    pub background_rgb: [u8; 3],
    pub foreground_rgb: [u8; 3],
    pub background_depth: f32,
    /// Height of the shape above the background (depth decreases by this much).
    pub raise: f32,
    /// Half-width of the uniform depth noise.
    pub depth_noise: f32,
}

fn dir(deg: f64) -> Point {
    let r = deg.to_radians();
    Point::new(r.cos(), r.sin())
}

fn along(c: Point, d: Point, t: f64) -> Point {
    Point::new(c.x + d.x * t, c.y + d.y * t)
}

impl SceneSpec {
    /// A random scene of `kind` sized relative to the image.
    pub fn random<R: Rng + ?Sized>(kind: ShapeKind, width: usize, height: usize, rng: &mut R) -> Self {
        let s = width.min(height) as f64;
        let jitter = 0.05 * s;
        let center = Point::new(
            width as f64 / 2.0 + rng.gen_range(-jitter..=jitter),
            height as f64 / 2.0 + rng.gen_range(-jitter..=jitter),
        );
        let fg = [rng.gen_range(40..140), rng.gen_range(40..140), rng.gen_range(40..140)];
        let (length, thickness, radius) = match kind {
            ShapeKind::Bar => (rng.gen_range(0.31 * s..=0.44 * s), rng.gen_range(0.08 * s..=0.11 * s), 0.0),
            ShapeKind::BarEnds => (rng.gen_range(0.5 * s..=0.56 * s), rng.gen_range(0.06 * s..=0.08 * s), 0.0),
            ShapeKind::Disc => (0.0, 0.0, rng.gen_range(0.13 * s..=0.17 * s)),
            ShapeKind::Ell => (rng.gen_range(0.22 * s..=0.28 * s), rng.gen_range(0.08 * s..=0.1 * s), 0.0),
        };
        SceneSpec {
            kind,
            width,
            height,
            center,
            orientation: rng.gen_range(0.0..180.0),
            length,
            thickness,
            radius,
            grasp_count: 6,
            plate: if kind == ShapeKind::BarEnds { 0.07 * s } else { 0.11 * s },
            clearance: if kind == ShapeKind::BarEnds { 0.08 * s } else { 0.11 * s },
            background_rgb: [200, 196, 188],
            foreground_rgb: fg,
            background_depth: 1.0,
            raise: 0.05,
            depth_noise: 5e-4,
        }
    }

    fn opening(&self) -> f64 {
        match self.kind {
            ShapeKind::Disc => 0.5 * self.radius,
            _ => self.thickness + self.clearance,
        }
    }

    /// Ell corner (where the two limbs meet).
    fn corner(&self) -> Point {
        let (u, n) = (dir(self.orientation), dir(self.orientation + 90.0));
        let m = (self.length - self.thickness / 2.0) / 2.0;
        Point::new(self.center.x - m * (u.x + n.x), self.center.y - m * (u.y + n.y))
    }

    /// Extreme points of the shape.
    fn hull(&self) -> Vec<Point> {
        let (u, n) = (dir(self.orientation), dir(self.orientation + 90.0));
        let box_pts = |c: Point, a0: f64, a1: f64, b0: f64, b1: f64| {
            [(a0, b0), (a1, b0), (a1, b1), (a0, b1)].map(|(a, b)| Point::new(c.x + a * u.x + b * n.x, c.y + a * u.y + b * n.y))
        };
        let (l, t) = (self.length, self.thickness);
        match self.kind {
            ShapeKind::Bar | ShapeKind::BarEnds => box_pts(self.center, -l / 2.0, l / 2.0, -t / 2.0, t / 2.0).to_vec(),
            ShapeKind::Disc => [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)]
                .map(|(a, b)| Point::new(self.center.x + a * self.radius, self.center.y + b * self.radius))
                .to_vec(),
            ShapeKind::Ell => {
                let c = self.corner();
                let mut v = box_pts(c, -t / 2.0, l, -t / 2.0, t / 2.0).to_vec();
                v.extend(box_pts(c, -t / 2.0, t / 2.0, -t / 2.0, l));
                v
            }
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.width == 0 || self.height == 0 || self.grasp_count == 0 {
            return bad("image size and grasp count must be positive".into());
        }
        let sizes_ok = match self.kind {
            ShapeKind::Disc => self.radius > 0.0,
            _ => self.length > 0.0 && self.thickness > 0.0 && self.length > self.thickness,
        };
        if !sizes_ok || !(self.plate > 0.0) || !(self.clearance >= 0.0) {
            return bad(format!("non-positive size in {self:?}"));
        }
        if self.kind == ShapeKind::BarEnds && self.plate >= 0.28 * self.length {
            return bad("plate too large for the end bands of the bar".into());
        }
        if self.kind == ShapeKind::Ell && self.length < self.thickness + self.plate {
            return bad("limbs too short for a grasp".into());
        }
        if self.kind == ShapeKind::Bar && self.length < self.plate {
            return bad("bar shorter than the plate".into());
        }
        let margin = self.opening().max(self.plate);
        for p in self.hull() {
            if p.x < margin || p.y < margin || p.x > self.width as f64 - margin || p.y > self.height as f64 - margin {
                return bad(format!("shape point ({:.1}, {:.1}) closer than {margin:.1} px to the border", p.x, p.y));
            }
        }
        Ok(())
    }

    /// Whether an image point lies on the shape.
    pub fn contains(&self, p: Point) -> bool {
        let (u, n) = (dir(self.orientation), dir(self.orientation + 90.0));
        let local = |c: Point| {
            let d = Point::new(p.x - c.x, p.y - c.y);
            (d.x * u.x + d.y * u.y, d.x * n.x + d.y * n.y)
        };
        let (l, t) = (self.length, self.thickness);
        match self.kind {
            ShapeKind::Bar | ShapeKind::BarEnds => {
                let (a, b) = local(self.center);
                a.abs() <= l / 2.0 && b.abs() <= t / 2.0
            }
            ShapeKind::Disc => p.distance(self.center) <= self.radius,
            ShapeKind::Ell => {
                let (a, b) = local(self.corner());
                let h = t / 2.0;
                (a >= -h && a <= l && b.abs() <= h) || (b >= -h && b <= l && a.abs() <= h)
            }
        }
    }

    /// The analytic grasps for this scene.
    pub fn grasps<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<GraspRect> {
        let (u, n) = (dir(self.orientation), dir(self.orientation + 90.0));
        let (l, t, ph) = (self.length, self.thickness, self.plate / 2.0);
        let w = self.opening();
        let mk = |c: Point, theta: f64| GraspRect::new(c.x, c.y, theta, self.plate, w).expect("valid grasp");
        (0..self.grasp_count)
            .map(|i| match self.kind {
                ShapeKind::Bar => mk(along(self.center, u, rng.gen_range(-(l / 2.0 - ph)..=(l / 2.0 - ph))), self.orientation + 90.0),
                ShapeKind::BarEnds => {
                    let side = if i % 2 == 0 { 1.0 } else { -1.0 };
                    let off = rng.gen_range(END_BAND * l..=(l / 2.0 - ph));
                    mk(along(self.center, u, side * off), self.orientation + 90.0)
                }
                ShapeKind::Disc => {
                    let a = rng.gen_range(0.0..360.0);
                    let rho = rng.gen_range(0.8 * self.radius..=self.radius);
                    mk(along(self.center, dir(a), rho), a)
                }
                ShapeKind::Ell => {
                    let c = self.corner();
                    let off = rng.gen_range((t / 2.0 + ph)..=(l - ph));
                    if i % 2 == 0 {
                        mk(along(c, u, off), self.orientation + 90.0)
                    } else {
                        mk(along(c, n, off), self.orientation)
                    }
                }
            })
            .collect()
    }
}

/// Renders `spec`: flat colors and a depth plateau over the shape, with depth
/// noise, and the analytic grasps.
pub fn generate_scene<R: Rng + ?Sized>(
    spec: &SceneSpec,
    example_id: &str,
    object_id: u32,
    rng: &mut R,
) -> Result<GraspExample, SynthError> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    let mut depth = DepthImage::missing(w, h);
    for r in 0..h {
        for c in 0..w {
            let on = spec.contains(Point::new(c as f64 + 0.5, r as f64 + 0.5));
            rgb.put_pixel(c as u32, r as u32, image::Rgb(if on { spec.foreground_rgb } else { spec.background_rgb }));
            let base = if on { spec.background_depth - spec.raise } else { spec.background_depth };
            let noise = if spec.depth_noise > 0.0 { rng.gen_range(-spec.depth_noise..=spec.depth_noise) } else { 0.0 };
            depth.set(r, c, base + noise);
        }
    }
    let grasps = spec.grasps(rng);
    Ok(GraspExample {
        example_id: example_id.to_string(),
        rgb,
        depth,
        positive_grasps: grasps,
        object_id,
        category: Some(spec.kind.category().to_string()),
    })
}

/// Parses `a:b:c` relative weights for bar, disc and ell scenes.
pub fn parse_mix(s: &str) -> Result<[u32; 3], String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("mix {s:?} must have the form bar:disc:ell"));
    }
    let mut out = [0u32; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.trim().parse().map_err(|_| format!("mix weight {p:?} is not a non-negative integer"))?;
    }
    if out.iter().all(|v| *v == 0) {
        return Err("mix weights are all zero".into());
    }
    Ok(out)
}

/// `count` scenes split between kinds in proportion to `weights` (largest
/// remainder), in a seeded random order. Ids are four-digit numbers from 0100.
pub fn generate_dataset(
    count: usize,
    kinds: &[(ShapeKind, u32)],
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Vec<GraspExample>, SynthError> {
    let total: u64 = kinds.iter().map(|k| k.1 as u64).sum();
    if total == 0 {
        return Err(SynthError::Invalid("no scene kinds with positive weight".into()));
    }
    let mut counts: Vec<usize> = kinds.iter().map(|k| (count as u64 * k.1 as u64 / total) as usize).collect();
    let mut rems: Vec<(u64, usize)> = kinds.iter().enumerate().map(|(i, k)| ((count as u64 * k.1 as u64) % total, i)).collect();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(count - counts.iter().sum::<usize>()) {
        counts[i] += 1;
    }
    let mut order: Vec<ShapeKind> = kinds.iter().zip(&counts).flat_map(|(k, &c)| std::iter::repeat_n(k.0, c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let mut r = ChaCha8Rng::seed_from_u64(crate::preprocess::sample_seed(seed, "synth", i as u64));
            let spec = SceneSpec::random(kind, width, height, &mut r);
            generate_scene(&spec, &format!("{:04}", 100 + i), (i + 1) as u32, &mut r)
        })
        .collect()
}

/// Writes examples as `NN/pcdNNNNr.png`, `NN/pcdNNNN.txt`, `NN/pcdNNNNcpos.txt`
/// (`NN` = number / 100), plus `z.txt` and, when every example has a category,
/// `labels.csv`.
pub fn write_cornell_format(examples: &[GraspExample], root: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(root)?;
    let mut z = String::new();
    let mut labels = format!("# vocabulary: {}\nobject_id,category\n", SYNTH_VOCABULARY.join(","));
    let mut labeled = std::collections::BTreeMap::new();
    for ex in examples {
        let number: u32 = ex.example_id.parse().map_err(|_| SynthError::BadId(ex.example_id.clone()))?;
        let dir = root.join(format!("{:02}", number / 100));
        fs::create_dir_all(&dir)?;
        let stem = format!("pcd{:04}", number);
        ex.rgb.save_with_format(dir.join(format!("{stem}r.png")), image::ImageFormat::Png)?;
        fs::write(dir.join(format!("{stem}.txt")), write_depth_cloud(&ex.depth))?;
        fs::write(dir.join(format!("{stem}cpos.txt")), write_rect_file(&ex.positive_grasps))?;
        z.push_str(&format!("{number} {} {}\n", ex.object_id, ex.category.as_deref().unwrap_or("unlabeled")));
        if let Some(c) = &ex.category {
            labeled.insert(ex.object_id, c.clone());
        }
    }
    fs::write(root.join("z.txt"), z)?;
    if labeled.len() == examples.iter().map(|e| e.object_id).collect::<std::collections::BTreeSet<_>>().len() {
        for (o, c) in labeled {
            labels.push_str(&format!("{o},{c}\n"));
        }
        fs::write(root.join("labels.csv"), labels)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_distance;

    fn spec(kind: ShapeKind) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        SceneSpec::random(kind, 128, 128, &mut rng)
    }

    #[test]
    fn axis_aligned_bar_grasps_are_vertical() {
        let s = SceneSpec { orientation: 0.0, ..spec(ShapeKind::Bar) };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = generate_scene(&s, "0100", 1, &mut rng).unwrap();
        assert!(ex.positive_grasps.iter().all(|g| g.theta == 90.0));
    }

    #[test]
    fn disc_rim_construction() {
        let s = spec(ShapeKind::Disc);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all = Vec::new();
        for _ in 0..50 {
            all.extend(s.grasps(&mut rng));
        }
        for g in &all {
            let d = g.center().distance(s.center);
            assert!(d >= 0.8 * s.radius - 1e-9 && d <= s.radius + 1e-9);
            assert!(d > s.radius / 2.0);
        }
        let cx = all.iter().map(|g| g.x).sum::<f64>() / all.len() as f64;
        let cy = all.iter().map(|g| g.y).sum::<f64>() / all.len() as f64;
        assert!(Point::new(cx, cy).distance(s.center) < 0.1 * s.radius);
    }

    #[test]
    fn scenes_are_seeded() {
        let s = spec(ShapeKind::Ell);
        let a = generate_scene(&s, "0100", 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = generate_scene(&s, "0100", 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.positive_grasps, b.positive_grasps);
    }

    #[test]
    fn grasps_sit_on_the_shape() {
        for kind in [ShapeKind::Bar, ShapeKind::BarEnds, ShapeKind::Ell] {
            let s = spec(kind);
            let gs = s.grasps(&mut ChaCha8Rng::seed_from_u64(3));
            for g in gs {
                assert!(s.contains(g.center()), "{kind} grasp off the shape");
            }
        }
        let s = spec(ShapeKind::BarEnds);
        for g in s.grasps(&mut ChaCha8Rng::seed_from_u64(3)) {
            assert!(g.center().distance(s.center) >= END_BAND * s.length - 1e-9);
            assert!(angle_distance(g.theta, s.orientation + 90.0) < 1e-9);
        }
    }

    #[test]
    fn margins_enforced() {
        let s = SceneSpec { center: Point::new(10.0, 64.0), ..spec(ShapeKind::Bar) };
        assert!(matches!(s.validate(), Err(SynthError::Invalid(_))));
        for kind in [ShapeKind::Bar, ShapeKind::BarEnds, ShapeKind::Disc, ShapeKind::Ell] {
            for seed in 0..50 {
                let s = SceneSpec::random(kind, 128, 128, &mut ChaCha8Rng::seed_from_u64(seed));
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn mix_parsing_and_counts() {
        assert_eq!(parse_mix("2:1:1").unwrap(), [2, 1, 1]);
        assert!(parse_mix("2:1").is_err());
        assert!(parse_mix("a:1:1").is_err());
        assert!(parse_mix("0:0:0").is_err());
        let kinds = [(ShapeKind::Bar, 1), (ShapeKind::Disc, 1), (ShapeKind::Ell, 1)];
        let ex = generate_dataset(10, &kinds, 64, 64, 1).unwrap();
        assert_eq!(ex.len(), 10);
        let bars = ex.iter().filter(|e| e.category.as_deref() == Some("bar")).count();
        assert_eq!(bars, 4);
    }
}
