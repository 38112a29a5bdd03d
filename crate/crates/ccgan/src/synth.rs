//! Procedural shapes dataset.
//!
//! Each image shows one shape on a textured background. The class is the
//! shape type, drawn upright; position, size, colors and the background
//! texture are nuisance factors drawn independently per image. Scene
//! parameters are written next to the images so labels can be recomputed
//! from them.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IoContext, Result};
use crate::manifest::{Entry, Label, LabelMode, Manifest, Split};
use crate::ppm::{self, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether `(u, v)`, in shape-local units where the shape spans roughly
    /// `[-1, 1]`, lies inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => {
                // Equilateral, centroid at the origin, circumradius 1.
                (0..3).all(|k| {
                    let a = PI / 2.0 + 2.0 * PI * f64::from(k) / 3.0 + PI;
                    u * a.cos() + v * a.sin() <= 0.5
                })
            }
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.45..=1.0).contains(&r2)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Flat,
    Gradient,
    Stripes,
    Checker,
    Noise,
}

impl Texture {
    const ALL: [Texture; 5] = [Texture::Flat, Texture::Gradient, Texture::Stripes, Texture::Checker, Texture::Noise];

    fn name(self) -> &'static str {
        match self {
            Texture::Flat => "flat",
            Texture::Gradient => "gradient",
            Texture::Stripes => "stripes",
            Texture::Checker => "checker",
            Texture::Noise => "noise",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Background {
    pub texture: Texture,
    pub a: [u8; 3],
    pub b: [u8; 3],
    /// Pixels per texture period.
    pub period: f64,
    pub angle: f64,
    pub seed: u64,
}

/// Everything needed to render one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub shape: Shape,
    /// Center in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Shape radius in pixels.
    pub radius: f64,
    pub color: [u8; 3],
    pub background: Background,
}

/// The class of a scene.
pub fn label_of(p: &SceneParams) -> usize {
    Shape::ALL.iter().position(|&s| s == p.shape).expect("shape is listed")
}

fn color<R: Rng>(rng: &mut R) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter().zip(&b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>().sqrt()
}

/// Largest per-channel difference between the two background colors.
const BG_CONTRAST: i16 = 40;

/// Draws nuisance factors for a scene of the given shape.
pub fn sample_scene<R: Rng>(shape: Shape, resolution: usize, rng: &mut R) -> SceneParams {
    let res = resolution as f64;
    let radius = rng.random_range(0.18 * res..0.32 * res);
    let cx = rng.random_range(radius..res - radius);
    let cy = rng.random_range(radius..res - radius);
    let texture = Texture::ALL[rng.random_range(0..Texture::ALL.len())];
    let a = color(rng);
    // Textures are low-contrast so the object dominates the image.
    let b = a.map(|v| (i16::from(v) + rng.random_range(-BG_CONTRAST..=BG_CONTRAST)).clamp(0, 255) as u8);
    let background = Background {
        texture,
        a,
        b,
        period: rng.random_range(3.0..10.0),
        angle: rng.random_range(0.0..PI),
        seed: rng.random(),
    };
    let bg_mean = [0, 1, 2].map(|i| ((u16::from(background.a[i]) + u16::from(background.b[i])) / 2) as u8);
    let mut fg = color(rng);
    while distance(fg, bg_mean) < 120.0 {
        fg = color(rng);
    }
    SceneParams { shape, cx, cy, radius, color: fg, background }
}

fn background_pixel(bg: &Background, x: f64, y: f64, noise: &mut ChaCha8Rng, res: f64) -> [u8; 3] {
    let t = match bg.texture {
        Texture::Flat => 0.0,
        Texture::Gradient => ((x * bg.angle.cos() + y * bg.angle.sin()) / (res * 1.5) + 0.5).clamp(0.0, 1.0),
        Texture::Stripes => {
            let s = (x * bg.angle.cos() + y * bg.angle.sin()) / bg.period;
            if s.rem_euclid(1.0) < 0.5 { 0.0 } else { 1.0 }
        }
        Texture::Checker => {
            let (i, j) = ((x / bg.period).floor() as i64, (y / bg.period).floor() as i64);
            ((i + j).rem_euclid(2)) as f64
        }
        Texture::Noise => noise.random_range(0.0..1.0),
    };
    [0, 1, 2].map(|i| (f64::from(bg.a[i]) * (1.0 - t) + f64::from(bg.b[i]) * t).round() as u8)
}

/// Renders a scene with 2x2 supersampling of the shape edge.
pub fn render(p: &SceneParams, resolution: usize) -> RgbImage {
    let mut img = RgbImage::new(resolution, resolution);
    let mut noise = ChaCha8Rng::seed_from_u64(p.background.seed);
    let res = resolution as f64;
    for y in 0..resolution {
        for x in 0..resolution {
            let bg = background_pixel(&p.background, x as f64, y as f64, &mut noise, res);
            let mut cover = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let (u, v) = ((x as f64 + ox - p.cx) / p.radius, (y as f64 + oy - p.cy) / p.radius);
                if p.shape.contains(u, v) {
                    cover += 0.25;
                }
            }
            let px = [0, 1, 2].map(|i| (f64::from(p.color[i]) * cover + f64::from(bg[i]) * (1.0 - cover)).round() as u8);
            img.put(x, y, px);
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub classes: usize,
    pub resolution: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    /// Number of equal labeled folds; 0 leaves labeled entries unfolded.
    pub folds: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { classes: 3, resolution: 32, labeled: 50, unlabeled: 5000, test: 500, folds: 0, seed: 7 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::config(format!("resolution {} below the minimum of 16", self.resolution)));
        }
        if !(2..=Shape::ALL.len()).contains(&self.classes) {
            return Err(Error::config(format!("classes must be between 2 and {}", Shape::ALL.len())));
        }
        if self.labeled == 0 {
            return Err(Error::config("a semi-supervised dataset needs at least one labeled image"));
        }
        if self.folds > 0 && !self.labeled.is_multiple_of(self.folds) {
            return Err(Error::config(format!("{} labeled images cannot form {} equal folds", self.labeled, self.folds)));
        }
        Ok(())
    }
}

fn write_params_line(out: &mut String, path: &str, p: &SceneParams) {
    let rgb = |c: [u8; 3]| format!("{},{},{}", c[0], c[1], c[2]);
    let bg = &p.background;
    writeln!(
        out,
        "{path}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        p.shape.name(),
        p.cx,
        p.cy,
        p.radius,
        rgb(p.color),
        bg.texture.name(),
        rgb(bg.a),
        rgb(bg.b),
        bg.period,
        bg.angle,
        bg.seed
    )
    .expect("writing to a string");
}

/// Renders the dataset into `dir`: `images/*.ppm`, `manifest.tsv`, `params.tsv`.
///
/// Classes cycle within every split so class counts differ by at most one.
pub fn write_dataset(spec: &SynthSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let images = dir.join("images");
    fs::create_dir_all(&images).at(&images)?;
    let mut entries = Vec::new();
    let mut params = String::new();
    let mut index = 0u64;
    for (split, count) in [(Split::LabeledTrain, spec.labeled), (Split::Unlabeled, spec.unlabeled), (Split::Test, spec.test)] {
        for i in 0..count {
            let class = i % spec.classes;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index);
            index += 1;
            let scene = sample_scene(Shape::ALL[class], spec.resolution, &mut rng);
            let rel = format!("images/{}_{i:05}.ppm", split.name());
            ppm::write(&dir.join(&rel), &render(&scene, spec.resolution))?;
            write_params_line(&mut params, &rel, &scene);
            let label = if split == Split::Unlabeled { Label::None } else { Label::Class(class) };
            let fold = (split == Split::LabeledTrain && spec.folds > 0).then(|| i % spec.folds);
            entries.push(Entry { path: rel, label, split, fold, line: entries.len() + 1 });
        }
    }
    let manifest = Manifest { root: dir.to_path_buf(), entries, label_mode: Some(LabelMode::Single { classes: spec.classes }) };
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest.to_text()).at(&path)?;
    let path = dir.join("params.tsv");
    fs::write(&path, params).at(&path)?;
    Ok(manifest)
}

/// Reads `params.tsv` back into `(relative path, scene)` pairs.
pub fn read_params(dir: &Path) -> Result<Vec<(String, SceneParams)>> {
    let path = dir.join("params.tsv");
    let text = fs::read_to_string(&path).at(&path)?;
    let bad = |line: usize, what: &str| Error::format(&path, format!("line {line}: bad {what}"));
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            let line = i + 1;
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 12 {
                return Err(bad(line, "field count"));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(line, "number"));
            let rgb = |k: usize| -> Result<[u8; 3]> {
                let v: Vec<u8> = f[k].split(',').map(|c| c.parse().map_err(|_| bad(line, "color"))).collect::<Result<_>>()?;
                v.try_into().map_err(|_| bad(line, "color"))
            };
            let scene = SceneParams {
                shape: Shape::parse(f[1]).ok_or_else(|| bad(line, "shape"))?,
                cx: num(2)?,
                cy: num(3)?,
                radius: num(4)?,
                color: rgb(5)?,
                background: Background {
                    texture: Texture::parse(f[6]).ok_or_else(|| bad(line, "texture"))?,
                    a: rgb(7)?,
                    b: rgb(8)?,
                    period: num(9)?,
                    angle: num(10)?,
                    seed: f[11].parse().map_err(|_| bad(line, "seed"))?,
                },
            };
            Ok((f[0].to_string(), scene))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_cover_their_center_and_not_the_corners() {
        for s in Shape::ALL {
            assert!(!s.contains(1.2, 1.2), "{s:?}");
            if s != Shape::Ring {
                assert!(s.contains(0.0, 0.0), "{s:?}");
            }
        }
        assert!(Shape::Ring.contains(0.85, 0.0) && !Shape::Ring.contains(0.2, 0.0));
    }

    #[test]
    fn shapes_stay_inside_the_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..200 {
            let p = sample_scene(Shape::ALL[i % 5], 32, &mut rng);
            assert!(p.cx - p.radius >= 0.0 && p.cx + p.radius <= 32.0);
            assert!(distance(p.color, p.background.a).max(distance(p.color, p.background.b)) > 0.0);
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        let ok = SynthSpec::default();
        ok.validate().unwrap();
        for bad in [
            SynthSpec { resolution: 8, ..ok },
            SynthSpec { classes: 1, ..ok },
            SynthSpec { labeled: 0, ..ok },
            SynthSpec { folds: 3, labeled: 10, ..ok },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
