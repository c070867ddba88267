//! Image container, isotropic padding and center rotation.
//!
//! Pixels are addressed as `(row, col)` with rows growing downwards. Values
//! are stored row-major with interleaved channels (`H × W × C`).

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::angles::Angle;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Vec<f64>,
    width: usize,
    height: usize,
    channels: usize,
    pad: usize,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            data: vec![0.0; width * height * channels],
            width,
            height,
            channels,
            pad: 0,
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            data: vec![value; width * height * channels],
            width,
            height,
            channels,
            pad: 0,
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::SizeMismatch {
                expected: width * height * channels,
                found: data.len(),
            });
        }
        Ok(Self {
            data,
            width,
            height,
            channels,
            pad: 0,
        })
    }

    /// Builds an image by evaluating `f(row, col, channel)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            data,
            width,
            height,
            channels,
            pad: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Border width already added by [`pad`].
    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.channels]
    }

    /// Sum of all samples.
    pub fn total_mass(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::SizeMismatch {
                expected: self.data.len(),
                found: other.data.len(),
            });
        }
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// Center pixel `(⌊H/2⌋, ⌊W/2⌋)`: the hub of every beam.
    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// Integer translation by `(dy, dx)` pixels (rows down, columns right),
    /// filling uncovered pixels with zero.
    pub fn translate(&self, dy: i64, dx: i64) -> Image {
        let mut out = Image::zeros(self.width, self.height, self.channels).with_pad(self.pad);
        for r in 0..self.height as i64 {
            let sr = r - dy;
            if sr < 0 || sr >= self.height as i64 {
                continue;
            }
            for c in 0..self.width as i64 {
                let sc = c - dx;
                if sc < 0 || sc >= self.width as i64 {
                    continue;
                }
                for ch in 0..self.channels {
                    out.set(r as usize, c as usize, ch, self.get(sr as usize, sc as usize, ch));
                }
            }
        }
        out
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Image::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Image {
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Image::from_vec(w as usize, h as usize, 3, data).expect("rgb buffer size")
        } else {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Image::from_vec(w as usize, h as usize, 1, data).expect("gray buffer size")
        }
    }

    /// Writes an 8-bit PNG. One channel is stored as gray, three as RGB.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => GrayImage::from_raw(w, h, bytes)
                .expect("gray buffer size")
                .save(path)?,
            3 => RgbImage::from_raw(w, h, bytes)
                .expect("rgb buffer size")
                .save(path)?,
            c => {
                return Err(Error::ShapeMismatch(format!(
                    "PNG export supports 1 or 3 channels, image has {c}"
                )))
            }
        }
        Ok(())
    }
}

/// Smallest isotropic border that keeps every pixel of a `width × width`
/// image on the grid under any rotation about its center:
/// `max(0, ⌈W(√2 − 1)/2⌉)`.
pub fn optimal_padding(width: usize) -> usize {
    let d = (width as f64 * (std::f64::consts::SQRT_2 - 1.0) / 2.0).ceil();
    d.max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Fill the border with the color of pixel `(0, 0)` of the unpadded image.
    CornerColor,
}

impl std::str::FromStr for PadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PadMode::Zero),
            "corner_color" => Ok(PadMode::CornerColor),
            other => Err(Error::Config(format!("unknown pad mode `{other}`"))),
        }
    }
}

impl PadMode {
    pub fn name(self) -> &'static str {
        match self {
            PadMode::Zero => "zero",
            PadMode::CornerColor => "corner_color",
        }
    }
}

pub fn pad(img: &Image, delta: usize, mode: PadMode) -> Image {
    let (w, h, ch) = (img.width + 2 * delta, img.height + 2 * delta, img.channels);
    let fill: Vec<f64> = match mode {
        PadMode::Zero => vec![0.0; ch],
        PadMode::CornerColor if img.width > 0 && img.height > 0 => img.pixel(0, 0).to_vec(),
        PadMode::CornerColor => vec![0.0; ch],
    };
    let mut out = Image::zeros(w, h, ch);
    for r in 0..h {
        for c in 0..w {
            let inside = r >= delta && r < delta + img.height && c >= delta && c < delta + img.width;
            for k in 0..ch {
                let v = if inside {
                    img.get(r - delta, c - delta, k)
                } else {
                    fill[k]
                };
                out.set(r, c, k, v);
            }
        }
    }
    out.pad = img.pad + delta;
    out
}

/// Pads by [`optimal_padding`] of the image width.
pub fn pad_optimal(img: &Image, mode: PadMode) -> Image {
    pad(img, optimal_padding(img.width), mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Rotates a square image counter-clockwise by `theta` about its geometric
/// center `((W−1)/2, (H−1)/2)`.
///
/// Every output pixel pulls its value from the inverse-rotated source
/// location; samples falling off the grid read as zero.
pub fn rotate(img: &Image, theta: Angle, interp: Interpolation) -> Result<Image> {
    if !img.is_square() {
        return Err(Error::NonSquareImage {
            width: img.width,
            height: img.height,
        });
    }
    if theta.radians() == 0.0 {
        return Ok(img.clone());
    }
    let n = img.width;
    let ch = img.channels;
    let pivot = (n as f64 - 1.0) / 2.0;
    let (s, c) = theta.radians().sin_cos();
    let mut out = Image::zeros(n, n, ch).with_pad(img.pad);

    for r in 0..n {
        // Cartesian frame: x right, y up.
        let y = pivot - r as f64;
        for col in 0..n {
            let x = col as f64 - pivot;
            let sx = x * c + y * s;
            let sy = -x * s + y * c;
            let src_col = sx + pivot;
            let src_row = pivot - sy;
            let o = (r * n + col) * ch;
            match interp {
                Interpolation::Nearest => {
                    let rr = src_row.round();
                    let cc = src_col.round();
                    if rr >= 0.0 && cc >= 0.0 && (rr as usize) < n && (cc as usize) < n {
                        let i = (rr as usize * n + cc as usize) * ch;
                        out.data[o..o + ch].copy_from_slice(&img.data[i..i + ch]);
                    }
                }
                Interpolation::Bilinear => {
                    let r0 = src_row.floor();
                    let c0 = src_col.floor();
                    let fr = src_row - r0;
                    let fc = src_col - c0;
                    let (r0, c0) = (r0 as i64, c0 as i64);
                    let taps = [
                        (r0, c0, (1.0 - fr) * (1.0 - fc)),
                        (r0, c0 + 1, (1.0 - fr) * fc),
                        (r0 + 1, c0, fr * (1.0 - fc)),
                        (r0 + 1, c0 + 1, fr * fc),
                    ];
                    for (tr, tc, w) in taps {
                        if w == 0.0 || tr < 0 || tc < 0 || tr >= n as i64 || tc >= n as i64 {
                            continue;
                        }
                        let i = (tr as usize * n + tc as usize) * ch;
                        for k in 0..ch {
                            out.data[o + k] += w * img.data[i + k];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Forward-rotates the continuous pixel position `(row, col)` by `theta`
/// about the geometric center of an `n × n` grid.
pub fn rotate_point(row: f64, col: f64, n: usize, theta: Angle) -> (f64, f64) {
    let pivot = (n as f64 - 1.0) / 2.0;
    let (s, c) = theta.radians().sin_cos();
    let x = col - pivot;
    let y = pivot - row;
    let rx = x * c - y * s;
    let ry = x * s + y * c;
    (pivot - ry, rx + pivot)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(n: usize) -> Image {
        let c = (n as f64 - 1.0) / 2.0;
        let sigma = n as f64 / 6.0;
        Image::from_fn(n, n, 1, |r, col, _| {
            let dx = col as f64 - c - n as f64 * 0.08;
            let dy = r as f64 - c + n as f64 * 0.05;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn padding_values() {
        assert_eq!(optimal_padding(0), 0);
        assert_eq!(optimal_padding(128), 27);
        assert_eq!(optimal_padding(100), 21);
        assert_eq!(optimal_padding(1), 1);
    }

    #[test]
    fn padding_keeps_corners_on_grid() {
        for w in 1..=200usize {
            let d = optimal_padding(w);
            let n = w + 2 * d;
            let pivot = (n as f64 - 1.0) / 2.0;
            for deg in (0..360).map(|d| d as f64).chain([45.0, 135.0, 225.0, 315.0]) {
                let theta = Angle::from_degrees(deg);
                for (r, c) in [(0, 0), (0, w - 1), (w - 1, 0), (w - 1, w - 1)] {
                    let (rr, cc) = rotate_point((r + d) as f64, (c + d) as f64, n, theta);
                    let lo = -1e-9;
                    let hi = n as f64 - 1.0 + 1e-9;
                    assert!(
                        rr >= lo && rr <= hi && cc >= lo && cc <= hi,
                        "w={w} θ={deg}: ({rr},{cc}) off a {n} grid (pivot {pivot})"
                    );
                }
            }
        }
    }

    #[test]
    fn pad_modes() {
        let img = Image::from_vec(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = pad(&img, 1, PadMode::Zero);
        assert_eq!((p.width(), p.height(), p.pad()), (4, 4, 1));
        for r in 0..4 {
            for c in 0..4 {
                let inside = (1..3).contains(&r) && (1..3).contains(&c);
                if inside {
                    assert_eq!(p.get(r, c, 0), img.get(r - 1, c - 1, 0));
                } else {
                    assert_eq!(p.get(r, c, 0), 0.0);
                }
            }
        }
        let flat = Image::filled(2, 2, 1, 0.5);
        assert_eq!(pad(&flat, 1, PadMode::CornerColor), Image::filled(4, 4, 1, 0.5).with_pad(1));
        let big = pad(&Image::zeros(128, 128, 3), optimal_padding(128), PadMode::Zero);
        assert_eq!((big.width(), big.height()), (182, 182));
    }

    #[test]
    fn corner_color_uses_top_left_pixel() {
        let img = Image::from_fn(3, 3, 3, |r, c, k| (r * 9 + c * 3 + k) as f64 / 30.0);
        let p = pad(&img, 2, PadMode::CornerColor);
        assert_eq!(p.pixel(0, 0), img.pixel(0, 0));
        assert_eq!(p.pixel(6, 6), img.pixel(0, 0));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = blob(21);
        assert_eq!(rotate(&img, Angle::ZERO, Interpolation::Bilinear).unwrap(), img);
    }

    #[test]
    fn quarter_turns_are_exact_permutations() {
        for n in [4usize, 7, 10] {
            let img = Image::from_fn(n, n, 2, |r, c, k| ((r * 31 + c * 7 + k * 3) % 17) as f64 / 16.0);
            let mut cur = img.clone();
            for _ in 0..4 {
                cur = rotate(&cur, Angle::from_degrees(90.0), Interpolation::Nearest).unwrap();
                let mut a = cur.data().to_vec();
                let mut b = img.data().to_vec();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a, b, "quarter turn is not a permutation at n={n}");
            }
            assert_eq!(cur, img);
        }
    }

    #[test]
    fn quarter_turn_direction_is_counter_clockwise() {
        let mut img = Image::zeros(5, 5, 1);
        img.set(0, 2, 0, 1.0); // top middle
        let r = rotate(&img, Angle::from_degrees(90.0), Interpolation::Nearest).unwrap();
        assert_eq!(r.get(2, 0, 0), 1.0); // moved to the left middle
    }

    #[test]
    fn bilinear_round_trip_on_smooth_image() {
        let img = pad_optimal(&blob(48), PadMode::Zero);
        let once = rotate(&img, Angle::from_degrees(120.0), Interpolation::Bilinear).unwrap();
        let back = rotate(&once, Angle::from_degrees(240.0), Interpolation::Bilinear).unwrap();
        let err = back.mean_abs_diff(&img).unwrap();
        assert!(err <= 0.02, "round-trip error {err}");
    }

    #[test]
    fn bilinear_rotation_preserves_mass_when_padded() {
        let img = pad_optimal(&blob(40), PadMode::Zero);
        let m0 = img.total_mass();
        for deg in [17.0, 45.0, 90.0, 133.3, 250.0] {
            let r = rotate(&img, Angle::from_degrees(deg), Interpolation::Bilinear).unwrap();
            let rel = (r.total_mass() - m0).abs() / m0;
            assert!(rel < 0.01, "θ={deg}: mass changed by {rel}");
        }
    }

    #[test]
    fn non_square_is_rejected() {
        let img = Image::zeros(4, 3, 1);
        assert!(matches!(
            rotate(&img, Angle::from_degrees(10.0), Interpolation::Bilinear),
            Err(Error::NonSquareImage { width: 4, height: 3 })
        ));
    }

    #[test]
    fn png_round_trip_scales_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 3, 3, |r, c, k| ((r + c + k) % 2) as f64);
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn translate_shifts_and_zero_fills() {
        let img = Image::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f64);
        let t = img.translate(1, -1);
        assert_eq!(t.get(1, 0, 0), img.get(0, 1, 0));
        assert_eq!(t.get(0, 0, 0), 0.0);
        assert_eq!(t.get(3, 3, 0), 0.0);
        assert_eq!(img.translate(0, 0), img);
    }
}
