//! Procedural datasets, image directories and the dataset manifest.
//!
//! All generators place the object at the geometric image center, so a
//! rotation about that center changes only the orientation label. Every
//! sample draws from its own random stream derived from `(seed, index)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imageops::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    LitSphere,
    OrientedGlyph,
    GradientDisk,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::LitSphere => "lit_sphere",
            SyntheticKind::OrientedGlyph => "oriented_glyph",
            SyntheticKind::GradientDisk => "gradient_disk",
        }
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lit_sphere" => Ok(SyntheticKind::LitSphere),
            "oriented_glyph" => Ok(SyntheticKind::OrientedGlyph),
            "gradient_disk" => Ok(SyntheticKind::GradientDisk),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub image_size: usize,
    pub count: usize,
    /// Canonical light direction in degrees, counter-clockwise from the
    /// positive column axis; 90° lights the sphere from the top.
    pub light_azimuth: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, image_size: usize, count: usize, seed: u64) -> Self {
        Self {
            kind,
            image_size,
            count,
            light_azimuth: 90.0,
            noise_std: 0.0,
            seed,
        }
    }
}

/// Grayscale images with their file stems.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Writes every image as `<name>.png` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.images
            .iter()
            .zip(&self.names)
            .map(|(img, name)| {
                let path = dir.join(format!("{name}.png"));
                img.save_png(&path)?;
                Ok(path)
            })
            .collect()
    }
}

/// Elevation of the light above the image plane.
pub const LIGHT_ELEVATION_DEG: f64 = 45.0;

/// Nine light azimuths 40° apart, starting at the canonical top light.
pub fn light_orbit() -> [f64; 9] {
    std::array::from_fn(|i| (90.0 + 40.0 * i as f64).rem_euclid(360.0))
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Centered frame: `(x, y)` with `y` up, in units of `radius`.
fn centered(row: usize, col: usize, size: usize, radius: f64) -> (f64, f64) {
    let c = (size as f64 - 1.0) / 2.0;
    ((col as f64 - c) / radius, (c - row as f64) / radius)
}

/// Fraction of a pixel inside the unit disk, from the signed distance
/// to the rim in pixels.
fn rim_coverage(rho: f64, radius: f64) -> f64 {
    ((1.0 - rho) * radius + 0.5).clamp(0.0, 1.0)
}

fn add_noise(img: &mut Image, std: f64, rng: &mut ChaCha8Rng) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    for v in img.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
}

fn check_size(size: usize, min: usize) -> Result<()> {
    if size < min {
        return Err(Error::DomainError(format!("image size {size} below the minimum of {min}")));
    }
    Ok(())
}

/// One Lambertian sphere under a directional light.
///
/// The light sits at `azimuth_deg` (counter-clockwise from the positive
/// column axis) and 45° elevation. `radius_frac` scales the sphere
/// against the image side and `gain` its brightness.
pub fn lit_sphere(size: usize, azimuth_deg: f64, radius_frac: f64, gain: f64) -> Image {
    let radius = radius_frac * size as f64;
    let (az, el) = (azimuth_deg.to_radians(), LIGHT_ELEVATION_DEG.to_radians());
    let light = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
    Image::from_fn(size, size, 1, |r, c, _| {
        let (x, y) = centered(r, c, size, radius);
        let rho = (x * x + y * y).sqrt();
        let cover = rim_coverage(rho, radius);
        if cover == 0.0 {
            return 0.0;
        }
        let (xs, ys) = if rho > 1.0 { (x / rho, y / rho) } else { (x, y) };
        let nz = (1.0 - xs * xs - ys * ys).max(0.0).sqrt();
        let shade = (xs * light[0] + ys * light[1] + nz * light[2]).max(0.0);
        (gain * shade * cover).clamp(0.0, 1.0)
    })
}

/// Lit spheres with per-sample radius and brightness.
pub fn gen_lit_sphere(spec: &SyntheticSpec) -> Result<Dataset> {
    check_size(spec.image_size, 32)?;
    let mut out = Dataset::default();
    for i in 0..spec.count {
        let mut rng = sample_rng(spec.seed, i);
        let radius = rng.random_range(0.30..0.42);
        let gain = rng.random_range(0.6..1.0);
        let mut img = lit_sphere(spec.image_size, spec.light_azimuth, radius, gain);
        add_noise(&mut img, spec.noise_std, &mut rng);
        out.images.push(img);
        out.names.push(format!("sphere_{i:05}"));
    }
    Ok(out)
}

fn in_glyph(x: f64, y: f64) -> bool {
    // arrow head: triangle with apex (0, 0.85), base y = 0.3, half width 0.4
    let head = (0.3..=0.85).contains(&y) && x.abs() <= 0.4 * (0.85 - y) / 0.55;
    let shaft = x.abs() <= 0.12 && (-0.75..0.3).contains(&y);
    // side flag on the right breaks the mirror symmetry
    let flag = (0.12..=0.45).contains(&x) && (-0.75..=-0.5).contains(&y);
    head || shaft || flag
}

/// Arrow pointing up with a flag on its right side; 4×4 supersampled.
pub fn oriented_glyph(size: usize, scale: f64, gain: f64) -> Image {
    let radius = 0.45 * scale * size as f64;
    let c = (size as f64 - 1.0) / 2.0;
    const SS: usize = 4;
    Image::from_fn(size, size, 1, |r, col, _| {
        let mut hits = 0;
        for sy in 0..SS {
            for sx in 0..SS {
                let fr = r as f64 - 0.5 + (sy as f64 + 0.5) / SS as f64;
                let fc = col as f64 - 0.5 + (sx as f64 + 0.5) / SS as f64;
                if in_glyph((fc - c) / radius, (c - fr) / radius) {
                    hits += 1;
                }
            }
        }
        gain * hits as f64 / (SS * SS) as f64
    })
}

pub fn gen_oriented_glyph(spec: &SyntheticSpec) -> Result<Dataset> {
    check_size(spec.image_size, 16)?;
    let mut out = Dataset::default();
    for i in 0..spec.count {
        let mut rng = sample_rng(spec.seed, i);
        let scale = rng.random_range(0.75..1.0);
        let gain = rng.random_range(0.6..1.0);
        let mut img = oriented_glyph(spec.image_size, scale, gain);
        add_noise(&mut img, spec.noise_std, &mut rng);
        out.images.push(img);
        out.names.push(format!("glyph_{i:05}"));
    }
    Ok(out)
}

/// Disk whose intensity ramps linearly towards `azimuth_deg`, fading out
/// smoothly at the rim.
pub fn gradient_disk(size: usize, azimuth_deg: f64, radius_frac: f64) -> Image {
    let radius = radius_frac * size as f64;
    let (s, c) = azimuth_deg.to_radians().sin_cos();
    Image::from_fn(size, size, 1, |r, col, _| {
        let (x, y) = centered(r, col, size, radius);
        let rho2 = x * x + y * y;
        if rho2 >= 1.0 {
            return 0.0;
        }
        let fade = (1.0 - rho2).powi(2);
        (0.5 + 0.5 * (x * c + y * s)) * fade
    })
}

pub fn gen_gradient_disk(spec: &SyntheticSpec) -> Result<Dataset> {
    check_size(spec.image_size, 8)?;
    let mut out = Dataset::default();
    for i in 0..spec.count {
        let mut rng = sample_rng(spec.seed, i);
        let radius = rng.random_range(0.35..0.48);
        let mut img = gradient_disk(spec.image_size, spec.light_azimuth, radius);
        add_noise(&mut img, spec.noise_std, &mut rng);
        out.images.push(img);
        out.names.push(format!("disk_{i:05}"));
    }
    Ok(out)
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    match spec.kind {
        SyntheticKind::LitSphere => gen_lit_sphere(spec),
        SyntheticKind::OrientedGlyph => gen_oriented_glyph(spec),
        SyntheticKind::GradientDisk => gen_gradient_disk(spec),
    }
}

/// Loads every `*.png` of `dir` in lexicographic file-name order.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::UnreadableFile {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Dataset::default();
    let mut first: Option<usize> = None;
    for path in paths {
        let img = Image::load_png(&path)?;
        if !img.is_square() {
            return Err(Error::NonSquareImage {
                width: img.width(),
                height: img.height(),
            });
        }
        match first {
            None => first = Some(img.width()),
            Some(f) if f != img.width() => {
                return Err(Error::MixedSizes {
                    first: f,
                    other: img.width(),
                    path,
                })
            }
            _ => {}
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        out.images.push(img);
        out.names.push(stem);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Shuffled, disjoint train/test index sets; the train set holds
/// `round(n · fraction)` indices.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * fraction).round() as usize).min(n);
    let test = idx.split_off(n_train);
    (idx, test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub filename: String,
    pub theta_degrees: f64,
    /// Rotation index in the finite regime; `None` when continuous.
    pub k: Option<usize>,
    pub split: Split,
}

pub const MANIFEST_HEADER: [&str; 4] = ["filename", "theta_degrees", "k", "split"];

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        w.write_record([
            r.filename.clone(),
            format!("{}", r.theta_degrees),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.split.name().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Format(format!("manifest: bad {what} in {rec:?}"));
        if rec.len() != 4 {
            return Err(bad("column count"));
        }
        let theta_degrees = rec[1].parse().map_err(|_| bad("theta_degrees"))?;
        let k = if rec[2].is_empty() {
            None
        } else {
            Some(rec[2].parse().map_err(|_| bad("k"))?)
        };
        let split = match &rec[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(bad("split")),
        };
        out.push(ManifestRow {
            filename: rec[0].to_string(),
            theta_degrees,
            k,
            split,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::angles::Angle;
    use crate::imageops::{rotate, Interpolation};

    fn argmax_pixel(img: &Image) -> (usize, usize) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for r in 0..img.height() {
            for c in 0..img.width() {
                if img.get(r, c, 0) > best.2 {
                    best = (r, c, img.get(r, c, 0));
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn top_light_brightens_the_top_half() {
        let ds = gen_lit_sphere(&SyntheticSpec::new(SyntheticKind::LitSphere, 64, 3, 1)).unwrap();
        for img in &ds.images {
            let (r, _) = argmax_pixel(img);
            assert!(r < 32);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [SyntheticKind::LitSphere, SyntheticKind::OrientedGlyph, SyntheticKind::GradientDisk] {
            let mut spec = SyntheticSpec::new(kind, 40, 4, 7);
            spec.noise_std = 0.05;
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
            spec.seed = 8;
            let other = generate(&spec).unwrap();
            spec.seed = 7;
            assert_ne!(generate(&spec).unwrap(), other);
        }
    }

    #[test]
    fn size_guard() {
        assert!(gen_lit_sphere(&SyntheticSpec::new(SyntheticKind::LitSphere, 31, 1, 0)).is_err());
    }

    #[test]
    fn rotating_the_sphere_moves_the_light() {
        for theta in [30.0, 95.0, 200.0] {
            let base = lit_sphere(64, 90.0, 0.38, 0.9);
            let rotated = rotate(&base, Angle::from_degrees(theta), Interpolation::Bilinear).unwrap();
            let moved = lit_sphere(64, 90.0 + theta, 0.38, 0.9);
            let err = rotated.mean_abs_diff(&moved).unwrap();
            assert!(err < 0.01, "θ={theta}: {err}");
        }
    }

    #[test]
    fn light_orbit_spacing() {
        let o = light_orbit();
        assert_eq!(o[0], 90.0);
        for w in o.windows(2) {
            assert!(((w[1] - w[0]).rem_euclid(360.0) - 40.0).abs() < 1e-12);
        }
    }

    #[test]
    fn glyph_points_up_and_is_asymmetric() {
        let ds = gen_oriented_glyph(&SyntheticSpec::new(SyntheticKind::OrientedGlyph, 48, 5, 2)).unwrap();
        assert_eq!(ds.len(), 5);
        for img in &ds.images {
            let apex_row = (0..48)
                .find(|&r| (0..48).any(|c| img.get(r, c, 0) > 0.0))
                .unwrap();
            assert!(apex_row < 24);
            let flipped = rotate(img, Angle::from_degrees(180.0), Interpolation::Bilinear).unwrap();
            assert!(img.mean_abs_diff(&flipped).unwrap() > 0.0);
        }
    }

    #[test]
    fn image_dir_loading() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image_dir(dir.path()), Err(Error::EmptyDataset)));

        for name in ["b", "c", "a"] {
            Image::filled(8, 8, 1, 1.0).save_png(dir.path().join(format!("{name}.png"))).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "skip me").unwrap();
        let ds = load_image_dir(dir.path()).unwrap();
        assert_eq!(ds.names, ["a", "b", "c"]);
        assert!(ds.images[0].data().iter().all(|&v| v == 1.0));

        Image::zeros(9, 9, 1).save_png(dir.path().join("d.png")).unwrap();
        assert!(matches!(load_image_dir(dir.path()), Err(Error::MixedSizes { .. })));
        fs::remove_file(dir.path().join("d.png")).unwrap();

        fs::write(dir.path().join("e.png"), b"not a png").unwrap();
        assert!(matches!(load_image_dir(dir.path()), Err(Error::UnreadableFile { .. })));
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        for n in [1usize, 5, 512, 1001] {
            let (tr, te) = split_indices(n, 0.8, 3);
            assert_eq!(tr.len() + te.len(), n);
            assert!((tr.len() as f64 - 0.8 * n as f64).abs() <= 1.0);
            let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
            all.sort();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let rows = vec![
            ManifestRow {
                filename: "a.png".into(),
                theta_degrees: 22.5,
                k: Some(1),
                split: Split::Train,
            },
            ManifestRow {
                filename: "b.png".into(),
                theta_degrees: 301.25,
                k: None,
                split: Split::Test,
            },
        ];
        write_manifest(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("filename,theta_degrees,k,split\n"));
        assert_eq!(read_manifest(&path).unwrap(), rows);
    }
}
