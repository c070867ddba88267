//! Radial beam overlay: construction, sampling and coverage analytics.
//!
//! A beam is a thickened digital ray that starts next to the hub pixel
//! `(⌊N/2⌋, ⌊N/2⌋)` of an `N × N` grid and advances exactly `D` pixels along
//! its dominant axis, so all beams end on the square of Chebyshev radius `D`.
//! Beam `i` of `B` points at `90° − i·360°/B`: beam 0 is straight up and
//! indices grow clockwise. At every step the center-line pixel is widened by
//! `ε` pixels on each side along the minor axis; widening index `t = 0` is the
//! counter-clockwise side and `t = 2ε` the clockwise side, so the layout of a
//! beam rotates with the beam.
//!
//! Because the mask depends only on `(N, B, D, ε)`, it is computed once and
//! every image is evaluated with a plain gather.

use crate::imageops::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeamMask {
    grid_size: usize,
    num_beams: usize,
    length: usize,
    thickness: usize,
    /// `(row, col)` per `[beam][t][step]`.
    coords: Vec<(u32, u32)>,
}

/// Integer division rounding half away from zero.
fn div_round_away(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    let q = (2 * num.abs() + den) / (2 * den);
    if num < 0 {
        -q
    } else {
        q
    }
}

fn round_away(x: f64) -> i64 {
    let r = (x.abs() + 0.5).floor() as i64;
    if x < 0.0 {
        -r
    } else {
        r
    }
}

/// Relative `(row, col)` offsets of one beam, ordered `[t][step]`.
fn beam_offsets(index: usize, num_beams: usize, length: usize, thickness: usize) -> Vec<(i64, i64)> {
    let alpha_deg = (90.0 - index as f64 * 360.0 / num_beams as f64).rem_euclid(360.0);
    let alpha = alpha_deg.to_radians();
    let (drow, dcol) = (-alpha.sin(), alpha.cos());

    let major_is_row = if (drow.abs() - dcol.abs()).abs() < 1e-12 {
        // Exact diagonals: alternate by quadrant so a quarter turn maps a
        // row-major beam onto a column-major one.
        ((alpha_deg / 90.0).floor() as i64) % 2 == 0
    } else {
        drow.abs() > dcol.abs()
    };

    let d = length as i64;
    let (major_sign, end_minor, perp_sign) = if major_is_row {
        (
            drow.signum() as i64,
            round_away(d as f64 * dcol / drow.abs()),
            if -drow > 0.0 { 1 } else { -1 },
        )
    } else {
        (
            dcol.signum() as i64,
            round_away(d as f64 * drow / dcol.abs()),
            if dcol > 0.0 { 1 } else { -1 },
        )
    };

    let eps = thickness as i64;
    let width = 2 * thickness + 1;
    let mut out = Vec::with_capacity(width * length);
    for t in 0..width as i64 {
        let off = (t - eps) * perp_sign;
        for s in 1..=d {
            let major = major_sign * s;
            let minor = div_round_away(s * end_minor, d) + off;
            out.push(if major_is_row { (major, minor) } else { (minor, major) });
        }
    }
    out
}

impl BeamMask {
    /// Builds the mask, enforcing the beam-count bound `B ≤ ⌊8D/(2ε+1)⌋`.
    pub fn build(grid_size: usize, num_beams: usize, length: usize, thickness: usize) -> Result<Self> {
        let max = max_beams(length, thickness);
        if num_beams > max {
            return Err(Error::BeamBoundExceeded { num_beams, max });
        }
        Self::build_unbounded(grid_size, num_beams, length, thickness)
    }

    /// Same as [`BeamMask::build`] without the beam-count bound. Used by the
    /// brute-force checks of that bound.
    pub fn build_unbounded(
        grid_size: usize,
        num_beams: usize,
        length: usize,
        thickness: usize,
    ) -> Result<Self> {
        if num_beams == 0 {
            return Err(Error::DomainError("need at least one beam".into()));
        }
        if length == 0 {
            return Err(Error::DomainError("beam length must be ≥ 1".into()));
        }
        let hub = (grid_size / 2) as i64;
        let mut coords = Vec::with_capacity(num_beams * (2 * thickness + 1) * length);
        let mut needed = 0i64;
        let mut outside = false;
        for b in 0..num_beams {
            for (dr, dc) in beam_offsets(b, num_beams, length, thickness) {
                needed = needed.max(dr.abs()).max(dc.abs());
                let (r, c) = (hub + dr, hub + dc);
                if r < 0 || c < 0 || r >= grid_size as i64 || c >= grid_size as i64 {
                    outside = true;
                    continue;
                }
                coords.push((r as u32, c as u32));
            }
        }
        if outside {
            return Err(Error::MaskOutOfGrid {
                grid_size,
                needed: needed as usize,
            });
        }
        Ok(Self {
            grid_size,
            num_beams,
            length,
            thickness,
            coords,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn num_beams(&self) -> usize {
        self.num_beams
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn thickness(&self) -> usize {
        self.thickness
    }

    /// `2ε + 1`.
    pub fn width(&self) -> usize {
        2 * self.thickness + 1
    }

    pub fn hub(&self) -> (usize, usize) {
        (self.grid_size / 2, self.grid_size / 2)
    }

    /// Grid coordinate of widening index `t` at 0-based `step` of `beam`.
    pub fn coord(&self, beam: usize, t: usize, step: usize) -> (usize, usize) {
        let (r, c) = self.coords[(beam * self.width() + t) * self.length + step];
        (r as usize, c as usize)
    }

    /// The `D` rows of `beam`, each holding its `2ε + 1` coordinates.
    pub fn beam_rows(&self, beam: usize) -> Vec<Vec<(usize, usize)>> {
        (0..self.length)
            .map(|s| (0..self.width()).map(|t| self.coord(beam, t, s)).collect())
            .collect()
    }

    /// All coordinates in `[beam][t][step]` order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.coords.iter().map(|&(r, c)| (r as usize, c as usize))
    }

    fn beam_coords(&self, beam: usize) -> &[(u32, u32)] {
        let n = self.width() * self.length;
        &self.coords[beam * n..(beam + 1) * n]
    }

    /// Pixels of the final step of `beam` (its tip row).
    pub fn tip(&self, beam: usize) -> Vec<(usize, usize)> {
        (0..self.width())
            .map(|t| self.coord(beam, t, self.length - 1))
            .collect()
    }
}

/// Smallest odd grid holding a full mask of the given length and thickness.
pub fn min_grid_size(length: usize, thickness: usize) -> usize {
    2 * (length + thickness) + 1
}

/// Largest admissible beam count `⌊8D / (2ε + 1)⌋`.
pub fn max_beams(length: usize, thickness: usize) -> usize {
    8 * length / (2 * thickness + 1)
}

/// Sampled colors, laid out `[beam][t][step][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamTensor {
    num_beams: usize,
    width: usize,
    length: usize,
    channels: usize,
    data: Vec<f64>,
}

impl BeamTensor {
    pub fn from_vec(
        num_beams: usize,
        width: usize,
        length: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let n = num_beams * width * length * channels;
        if data.len() != n {
            return Err(Error::SizeMismatch {
                expected: n,
                found: data.len(),
            });
        }
        Ok(Self {
            num_beams,
            width,
            length,
            channels,
            data,
        })
    }

    pub fn num_beams(&self) -> usize {
        self.num_beams
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `[num_beams, 2ε+1, D, C]`.
    pub fn shape(&self) -> [usize; 4] {
        [self.num_beams, self.width, self.length, self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn beam_len(&self) -> usize {
        self.width * self.length * self.channels
    }

    pub fn beam(&self, b: usize) -> &[f64] {
        let n = self.beam_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, beam: usize, t: usize, step: usize, ch: usize) -> f64 {
        self.data[((beam * self.width + t) * self.length + step) * self.channels + ch]
    }

    pub fn mean_abs_diff(&self, other: &BeamTensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.data.len().max(1) as f64)
    }
}

/// Gathers the image colors under the mask.
pub fn sample(img: &Image, mask: &BeamMask) -> Result<BeamTensor> {
    if img.width() != mask.grid_size || img.height() != mask.grid_size {
        return Err(Error::SizeMismatch {
            expected: mask.grid_size,
            found: if img.width() != mask.grid_size {
                img.width()
            } else {
                img.height()
            },
        });
    }
    let ch = img.channels();
    let mut data = Vec::with_capacity(mask.coords.len() * ch);
    for &(r, c) in &mask.coords {
        data.extend_from_slice(img.pixel(r as usize, c as usize));
    }
    Ok(BeamTensor {
        num_beams: mask.num_beams,
        width: mask.width(),
        length: mask.length,
        channels: ch,
        data,
    })
}

/// Rolls the beam axis: beam `i` of the result is beam `(i + k) mod B` of
/// the input. With clockwise beam indices this is exactly the effect of
/// rotating the image counter-clockwise by `k · 360°/B`.
pub fn circular_shift(beams: &BeamTensor, k: usize) -> BeamTensor {
    let b = beams.num_beams;
    let n = beams.beam_len();
    let mut data = Vec::with_capacity(beams.data.len());
    for i in 0..b {
        let src = (i + k) % b;
        data.extend_from_slice(&beams.data[src * n..(src + 1) * n]);
    }
    BeamTensor {
        data,
        ..beams.clone()
    }
}

fn check_coverage_domain(num_beams: usize) -> Result<()> {
    if num_beams < 8 {
        return Err(Error::DomainError(format!(
            "coverage approximation needs at least 8 beams, got {num_beams}"
        )));
    }
    Ok(())
}

/// Uncovered area of one triangular sector between two adjacent beams.
fn uncovered_sector(num_beams: usize, length: usize, thickness: usize) -> f64 {
    let b = num_beams as f64;
    let base = 8.0 * length as f64 / b - (2 * thickness + 1) as f64;
    let gamma = std::f64::consts::TAU / b;
    base * base / (2.0 * gamma.tan())
}

/// Closed-form pixel coverage estimate
/// `B[4D²/B − (8D/B − (2ε+1))² / (2 tan(360°/B))]`.
pub fn coverage_approx(num_beams: usize, length: usize, thickness: usize) -> Result<f64> {
    check_coverage_domain(num_beams)?;
    let b = num_beams as f64;
    let d = length as f64;
    let sector = 4.0 * d * d / b;
    Ok(b * (sector - uncovered_sector(num_beams, length, thickness)))
}

/// Closed-form overlap estimate
/// `B[(2ε+1)D − 4D²/B + (8D/B − (2ε+1))² / (2 tan(360°/B))]`.
pub fn overlap_approx(num_beams: usize, length: usize, thickness: usize) -> Result<f64> {
    check_coverage_domain(num_beams)?;
    let b = num_beams as f64;
    let d = length as f64;
    let w = (2 * thickness + 1) as f64;
    Ok(b * (w * d - 4.0 * d * d / b + uncovered_sector(num_beams, length, thickness)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageCount {
    /// Pixels hit by at least one beam.
    pub covered: usize,
    /// `Σ (m − 1)` over pixels hit `m ≥ 1` times.
    pub overlap: usize,
    /// `histogram[m]` = number of pixels hit exactly `m` times.
    pub histogram: Vec<usize>,
}

fn multiplicity_grid(mask: &BeamMask) -> Vec<u32> {
    let mut grid = vec![0u32; mask.grid_size * mask.grid_size];
    for &(r, c) in &mask.coords {
        grid[r as usize * mask.grid_size + c as usize] += 1;
    }
    grid
}

/// Exact coverage by rasterizing the mask into a multiplicity grid.
pub fn exact_coverage(mask: &BeamMask) -> CoverageCount {
    let grid = multiplicity_grid(mask);
    let max = grid.iter().copied().max().unwrap_or(0) as usize;
    let mut histogram = vec![0usize; max + 1];
    for &m in &grid {
        histogram[m as usize] += 1;
    }
    let covered = grid.iter().filter(|&&m| m > 0).count();
    let total: usize = grid.iter().map(|&m| m as usize).sum();
    CoverageCount {
        covered,
        overlap: total - covered,
        histogram,
    }
}

/// For every beam, whether it hits at least one pixel no other beam hits.
pub fn unique_pixel_flags(mask: &BeamMask) -> Vec<bool> {
    let mut owner = vec![u32::MAX; mask.grid_size * mask.grid_size];
    let mut count = vec![0u32; mask.grid_size * mask.grid_size];
    for b in 0..mask.num_beams {
        for &(r, c) in mask.beam_coords(b) {
            let i = r as usize * mask.grid_size + c as usize;
            if owner[i] != b as u32 {
                owner[i] = b as u32;
                count[i] += 1;
            }
        }
    }
    (0..mask.num_beams)
        .map(|b| {
            mask.beam_coords(b)
                .iter()
                .any(|&(r, c)| count[r as usize * mask.grid_size + c as usize] == 1)
        })
        .collect()
}

/// Whether the tip rows of all beams are pairwise disjoint.
pub fn tips_disjoint(mask: &BeamMask) -> bool {
    let mut seen = vec![false; mask.grid_size * mask.grid_size];
    for b in 0..mask.num_beams {
        let mut own = Vec::with_capacity(mask.width());
        for (r, c) in mask.tip(b) {
            let i = r * mask.grid_size + c;
            if own.contains(&i) {
                continue;
            }
            if seen[i] {
                return false;
            }
            own.push(i);
        }
        for i in own {
            seen[i] = true;
        }
    }
    true
}

/// Brute force: the largest `B ≤ limit` whose equally spaced beams keep
/// pairwise disjoint tips.
pub fn max_disjoint_tip_beams(length: usize, thickness: usize, limit: usize) -> Result<usize> {
    let grid = min_grid_size(length, thickness);
    let mut best = 0;
    for b in 1..=limit {
        let mask = BeamMask::build_unbounded(grid, b, length, thickness)?;
        if tips_disjoint(&mask) {
            best = b;
        }
    }
    Ok(best)
}

/// One line of the geometry report.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryRow {
    pub num_beams: usize,
    pub length: usize,
    pub thickness: usize,
    pub coverage_approx: f64,
    pub overlap_approx: f64,
    pub coverage_exact: Option<usize>,
    pub overlap_exact: Option<usize>,
    pub rel_error: Option<f64>,
}

impl GeometryRow {
    pub const HEADER: [&'static str; 8] = [
        "num_beams",
        "length",
        "thickness",
        "coverage_approx",
        "overlap_approx",
        "coverage_exact",
        "overlap_exact",
        "rel_error",
    ];

    pub fn record(&self) -> [String; 8] {
        let opt = |v: Option<String>| v.unwrap_or_default();
        [
            self.num_beams.to_string(),
            self.length.to_string(),
            self.thickness.to_string(),
            format!("{:.6}", self.coverage_approx),
            format!("{:.6}", self.overlap_approx),
            opt(self.coverage_exact.map(|v| v.to_string())),
            opt(self.overlap_exact.map(|v| v.to_string())),
            opt(self.rel_error.map(|v| format!("{v:.6}"))),
        ]
    }
}

/// Closed forms, and optionally the exact counts on a minimal grid, for
/// one `(B, D, ε)` configuration.
pub fn geometry_row(num_beams: usize, length: usize, thickness: usize, exact: bool) -> Result<GeometryRow> {
    let coverage = coverage_approx(num_beams, length, thickness)?;
    let overlap = overlap_approx(num_beams, length, thickness)?;
    let mut row = GeometryRow {
        num_beams,
        length,
        thickness,
        coverage_approx: coverage,
        overlap_approx: overlap,
        coverage_exact: None,
        overlap_exact: None,
        rel_error: None,
    };
    if exact {
        let mask = BeamMask::build(min_grid_size(length, thickness), num_beams, length, thickness)?;
        let count = exact_coverage(&mask);
        row.coverage_exact = Some(count.covered);
        row.overlap_exact = Some(count.overlap);
        row.rel_error = Some((coverage - count.covered as f64).abs() / count.covered as f64);
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_beams() {
        let m = BeamMask::build(9, 4, 4, 0).unwrap();
        assert_eq!(m.hub(), (4, 4));
        let up: Vec<_> = (0..4).map(|s| m.coord(0, 0, s)).collect();
        assert_eq!(up, vec![(3, 4), (2, 4), (1, 4), (0, 4)]);
        let right: Vec<_> = (0..4).map(|s| m.coord(1, 0, s)).collect();
        assert_eq!(right, vec![(4, 5), (4, 6), (4, 7), (4, 8)]);
        let down: Vec<_> = (0..4).map(|s| m.coord(2, 0, s)).collect();
        assert_eq!(down, vec![(5, 4), (6, 4), (7, 4), (8, 4)]);
        let left: Vec<_> = (0..4).map(|s| m.coord(3, 0, s)).collect();
        assert_eq!(left, vec![(4, 3), (4, 2), (4, 1), (4, 0)]);
    }

    #[test]
    fn thick_rows_have_width_three() {
        let m = BeamMask::build(11, 4, 4, 1).unwrap();
        for b in 0..4 {
            for row in m.beam_rows(b) {
                assert_eq!(row.len(), 3);
            }
        }
        // up beam, first step: counter-clockwise side is the left column
        assert_eq!(m.beam_rows(0)[0], vec![(4, 4), (4, 5), (4, 6)]);
        // right beam widens downwards from the top
        assert_eq!(m.beam_rows(1)[0], vec![(4, 6), (5, 6), (6, 6)]);
    }

    #[test]
    fn bound_and_grid_errors() {
        assert!(matches!(
            BeamMask::build(200, 171, 64, 1),
            Err(Error::BeamBoundExceeded { num_beams: 171, max: 170 })
        ));
        assert!(BeamMask::build(200, 170, 64, 1).is_ok());
        assert!(matches!(
            BeamMask::build(9, 4, 5, 0),
            Err(Error::MaskOutOfGrid { .. })
        ));
        assert!(matches!(BeamMask::build(9, 0, 4, 0), Err(Error::DomainError(_))));
    }

    #[test]
    fn construction_is_deterministic() {
        let a = BeamMask::build(91, 32, 40, 2).unwrap();
        let b = BeamMask::build(91, 32, 40, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_stays_within_chebyshev_square() {
        for (b, d, e) in [(16, 20, 1), (32, 12, 2), (7, 9, 0)] {
            let g = min_grid_size(d, e);
            let m = BeamMask::build_unbounded(g, b, d, e).unwrap();
            let hub = m.hub();
            for (r, c) in m.coords() {
                let dr = (r as i64 - hub.0 as i64).abs();
                let dc = (c as i64 - hub.1 as i64).abs();
                assert!(dr.max(dc) <= (d + e) as i64);
                assert!(dr.max(dc) >= 1);
            }
            // every beam reaches the outer square along its major axis
            for beam in 0..b {
                let (r, c) = m.coord(beam, e, d - 1);
                let dr = (r as i64 - hub.0 as i64).abs();
                let dc = (c as i64 - hub.1 as i64).abs();
                assert_eq!(dr.max(dc), d as i64);
            }
        }
    }

    #[test]
    fn sampling_constant_and_single_pixel() {
        let m = BeamMask::build(21, 8, 6, 1).unwrap();
        let t = sample(&Image::filled(21, 21, 3, 0.7), &m).unwrap();
        assert_eq!(t.shape(), [8, 3, 6, 3]);
        assert!(t.data().iter().all(|&v| v == 0.7));

        let d = 6;
        let mut img = Image::zeros(21, 21, 1);
        img.set(10 - d, 10, 0, 1.0);
        let t = sample(&img, &m).unwrap();
        assert_eq!(t.get(0, 1, d - 1, 0), 1.0);
        let lit: Vec<_> = (0..8)
            .flat_map(|b| (0..3).flat_map(move |w| (0..d).map(move |s| (b, w, s))))
            .filter(|&(b, w, s)| t.get(b, w, s, 0) > 0.0)
            .collect();
        assert_eq!(lit, vec![(0, 1, d - 1)]);
    }

    #[test]
    fn sampling_size_mismatch() {
        let m = BeamMask::build(21, 8, 6, 1).unwrap();
        assert!(matches!(
            sample(&Image::zeros(20, 20, 1), &m),
            Err(Error::SizeMismatch { expected: 21, found: 20 })
        ));
    }

    #[test]
    fn shift_group_action() {
        let data: Vec<f64> = (0..5 * 3 * 2).map(|v| v as f64).collect();
        let t = BeamTensor::from_vec(5, 3, 2, 1, data).unwrap();
        assert_eq!(circular_shift(&t, 0), t);
        assert_eq!(circular_shift(&t, 5), t);
        for a in 0..5 {
            for b in 0..5 {
                assert_eq!(
                    circular_shift(&circular_shift(&t, a), b),
                    circular_shift(&t, (a + b) % 5)
                );
            }
        }
        let s = circular_shift(&t, 2);
        assert_eq!(s.beam(0), t.beam(2));
        assert_eq!(s.beam(4), t.beam(1));
    }

    #[test]
    fn beam_bound_values() {
        assert_eq!(max_beams(64, 1), 170);
        assert_eq!(max_beams(1, 0), 8);
        for e in 0..4 {
            for d in 1..128 {
                assert!(max_beams(d + 1, e) >= max_beams(d, e));
            }
        }
    }

    #[test]
    fn closed_forms_sum_to_total_area() {
        let c = coverage_approx(16, 32, 1).unwrap();
        let o = overlap_approx(16, 32, 1).unwrap();
        assert!((c + o - 1536.0).abs() < 1e-9);
        assert!(matches!(coverage_approx(7, 32, 1), Err(Error::DomainError(_))));
        assert!(matches!(overlap_approx(7, 32, 1), Err(Error::DomainError(_))));
    }

    #[test]
    fn closed_form_against_counting_at_eight_beams() {
        // exact count on the real mask: 8 beams × 48 pixels, 20 shared
        let m = BeamMask::build(min_grid_size(16, 1), 8, 16, 1).unwrap();
        let exact = exact_coverage(&m);
        assert_eq!(exact.covered, 364);
        assert_eq!(exact.overlap, 20);
        let approx = coverage_approx(8, 16, 1).unwrap();
        assert!((approx - 348.0).abs() < 1e-9);
        assert!((approx - 364.0).abs() / 364.0 < 0.05);
    }

    #[test]
    fn exact_coverage_small_cases() {
        let one = BeamMask::build(min_grid_size(10, 2), 1, 10, 2).unwrap();
        let c = exact_coverage(&one);
        assert_eq!(c.covered, 5 * 10);
        assert_eq!(c.overlap, 0);
        assert_eq!(c.histogram[1], 50);

        // opposite beams start one pixel away from the hub on either side
        let two = BeamMask::build(min_grid_size(10, 0), 2, 10, 0).unwrap();
        let c = exact_coverage(&two);
        assert_eq!(c.covered, 20);
        assert_eq!(c.overlap, 0);

        for (b, d, e) in [(8, 16, 1), (24, 10, 2), (40, 30, 0)] {
            let m = BeamMask::build_unbounded(min_grid_size(d, e), b, d, e).unwrap();
            let c = exact_coverage(&m);
            assert!(c.covered <= b * (2 * e + 1) * d);
            assert_eq!(c.covered + c.overlap, b * (2 * e + 1) * d);
            let hist_total: usize = c.histogram.iter().enumerate().map(|(m, n)| m * n).sum();
            assert_eq!(hist_total, b * (2 * e + 1) * d);
        }
    }

    #[test]
    fn every_beam_owns_a_pixel_up_to_the_bound() {
        for e in [1usize, 2] {
            for d in [8usize, 13, 21, 32] {
                let g = min_grid_size(d, e);
                for b in 1..=max_beams(d, e) {
                    let m = BeamMask::build(g, b, d, e).unwrap();
                    assert!(
                        unique_pixel_flags(&m).iter().all(|&u| u),
                        "B={b} D={d} ε={e}"
                    );
                }
            }
        }
    }

    #[test]
    fn disjoint_tips_never_exceed_bound() {
        for e in 0..3 {
            for d in [8usize, 9, 16, 23] {
                let bound = max_beams(d, e);
                let best = max_disjoint_tip_beams(d, e, 2 * bound).unwrap();
                assert!(best <= bound, "D={d} ε={e}: {best} > {bound}");
            }
        }
    }
}
