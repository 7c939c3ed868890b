//! Pixel-wise ray orientations derived from pinhole intrinsics.
//!
//! For a pixel at column `u` and row `v` the horizontal angle is
//! `atan2(u - cx, fx)` and the vertical angle is `atan2(v - cy, fy)`.
//! Pixel `(row i, col j)` is sampled at `u = j`, `v = i`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Largest map (in pixels) [`orientation_maps`] will allocate.
pub const DEFAULT_MAP_BUDGET: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(invalid(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(invalid("principal point must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid(format!(
                "image size must be at least 1x1 (got {}x{})",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera whose principal point sits at the geometric image center.
    pub fn centered(fx: T, fy: T, width: usize, height: usize) -> Result<Self> {
        let half = T::from_f64_lossy(0.5);
        let cx = (T::from_usize(width).unwrap() - T::one()) * half;
        let cy = (T::from_usize(height).unwrap() - T::one()) * half;
        Self::new(fx, fy, cx, cy, width, height)
    }

    pub fn full_frame(&self) -> CropRect {
        CropRect {
            left: 0,
            top: 0,
            width: self.width,
            height: self.height,
        }
    }

    /// Parses the `key=value` intrinsics text format (keys fx, fy, cx, cy, width, height).
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut fx = None;
        let mut fy = None;
        let mut cx = None;
        let mut cy = None;
        let mut width = None;
        let mut height = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                line: line_no,
                message: format!("expected key=value, got {line:?}"),
            })?;
            let value = value.trim();
            let real = || -> Result<T> {
                value
                    .parse::<f64>()
                    .map(T::from_f64_lossy)
                    .map_err(|e| Error::Format {
                        line: line_no,
                        message: format!("bad number {value:?}: {e}"),
                    })
            };
            let count = || -> Result<usize> {
                value.parse::<usize>().map_err(|e| Error::Format {
                    line: line_no,
                    message: format!("bad integer {value:?}: {e}"),
                })
            };
            match key.trim() {
                "fx" => fx = Some(real()?),
                "fy" => fy = Some(real()?),
                "cx" => cx = Some(real()?),
                "cy" => cy = Some(real()?),
                "width" => width = Some(count()?),
                "height" => height = Some(count()?),
                other => {
                    return Err(Error::Format {
                        line: line_no,
                        message: format!("unknown intrinsics key {other:?}"),
                    })
                }
            }
        }
        let missing = |name: &str| Error::Format {
            line: 0,
            message: format!("missing intrinsics key {name}"),
        };
        Self::new(
            fx.ok_or_else(|| missing("fx"))?,
            fy.ok_or_else(|| missing("fy"))?,
            cx.ok_or_else(|| missing("cx"))?,
            cy.ok_or_else(|| missing("cy"))?,
            width.ok_or_else(|| missing("width"))?,
            height.ok_or_else(|| missing("height"))?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Renders the intrinsics file format. Reals are written with round-trip precision.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fx={:?}", self.fx.as_f64());
        let _ = writeln!(s, "fy={:?}", self.fy.as_f64());
        let _ = writeln!(s, "cx={:?}", self.cx.as_f64());
        let _ = writeln!(s, "cy={:?}", self.cy.as_f64());
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "height={}", self.height);
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Axis-aligned pixel rectangle `[left, left+width) x [top, top+height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl CropRect {
    pub fn new(left: usize, top: usize, width: usize, height: usize) -> Self {
        Self {
            left,
            top,
            width,
            height,
        }
    }

    pub fn check_inside(&self, width: usize, height: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid(format!("degenerate crop {self:?}")));
        }
        if self.left + self.width > width || self.top + self.height > height {
            return Err(invalid(format!(
                "crop {self:?} exceeds {width}x{height} frame"
            )));
        }
        Ok(())
    }

    /// Parses `left,top,width,height`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<_> = text.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(invalid(format!("crop must be left,top,width,height (got {text:?})")));
        }
        let mut v = [0usize; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| invalid(format!("crop component {p:?} is not an integer")))?;
        }
        Ok(Self::new(v[0], v[1], v[2], v[3]))
    }
}

impl std::fmt::Display for CropRect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.left, self.top, self.width, self.height)
    }
}

/// Dense row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn submap(&self, crop: &CropRect) -> Self {
        Self::from_fn(crop.height, crop.width, |r, c| {
            self.get(r + crop.top, c + crop.left)
        })
    }
}

/// Per-pixel horizontal (θ) and vertical (β) ray angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationMaps<T> {
    pub horizontal: Grid<T>,
    pub vertical: Grid<T>,
}

impl<T: Scalar> OrientationMaps<T> {
    pub fn rows(&self) -> usize {
        self.horizontal.rows
    }

    pub fn cols(&self) -> usize {
        self.horizontal.cols
    }

    pub fn submap(&self, crop: &CropRect) -> Self {
        Self {
            horizontal: self.horizontal.submap(crop),
            vertical: self.vertical.submap(crop),
        }
    }

    /// Both maps divided by π/2, so every value lies in (-1, 1).
    pub fn normalized<U: Scalar>(&self) -> (Vec<U>, Vec<U>) {
        let scale = T::FRAC_PI_2();
        let conv = |g: &Grid<T>| {
            g.data
                .iter()
                .map(|&x| U::from_f64_lossy((x / scale).as_f64()))
                .collect()
        };
        (conv(&self.horizontal), conv(&self.vertical))
    }
}

/// Ray angles of a (possibly fractional) pixel position.
pub fn pixel_orientation<T: Scalar>(u: T, v: T, k: &CameraIntrinsics<T>) -> Result<(T, T)> {
    if !u.is_finite() || !v.is_finite() {
        return Err(invalid(format!("pixel coordinates must be finite (u={u}, v={v})")));
    }
    Ok(((u - k.cx).atan2(k.fx), (v - k.cy).atan2(k.fy)))
}

pub fn orientation_maps<T: Scalar>(k: &CameraIntrinsics<T>) -> Result<OrientationMaps<T>> {
    orientation_maps_with_budget(k, DEFAULT_MAP_BUDGET)
}

pub fn orientation_maps_with_budget<T: Scalar>(
    k: &CameraIntrinsics<T>,
    max_pixels: usize,
) -> Result<OrientationMaps<T>> {
    k.validate()?;
    let pixels = k.width.checked_mul(k.height).unwrap_or(usize::MAX);
    if pixels > max_pixels {
        return Err(Error::Resource(format!(
            "{}x{} orientation map exceeds budget of {max_pixels} pixels",
            k.width, k.height
        )));
    }
    // θ depends only on the column and β only on the row.
    let theta: Vec<T> = (0..k.width)
        .map(|c| (T::from_usize(c).unwrap() - k.cx).atan2(k.fx))
        .collect();
    let beta: Vec<T> = (0..k.height)
        .map(|r| (T::from_usize(r).unwrap() - k.cy).atan2(k.fy))
        .collect();
    Ok(OrientationMaps {
        horizontal: Grid::from_fn(k.height, k.width, |_, c| theta[c]),
        vertical: Grid::from_fn(k.height, k.width, |r, _| beta[r]),
    })
}

/// Intrinsics after cropping to `crop` and scaling by `(sx, sy)`.
pub fn adjust_intrinsics<T: Scalar>(
    k: &CameraIntrinsics<T>,
    crop: &CropRect,
    scale: (T, T),
) -> Result<CameraIntrinsics<T>> {
    k.validate()?;
    crop.check_inside(k.width, k.height)?;
    let (sx, sy) = scale;
    if !(sx > T::zero() && sy > T::zero()) || !sx.is_finite() || !sy.is_finite() {
        return Err(invalid(format!("scale factors must be positive (got {sx}, {sy})")));
    }
    let half = T::from_f64_lossy(0.5);
    let left = T::from_usize(crop.left).unwrap();
    let top = T::from_usize(crop.top).unwrap();
    let width = (T::from_usize(crop.width).unwrap() * sx).round().to_usize().unwrap_or(0);
    let height = (T::from_usize(crop.height).unwrap() * sy).round().to_usize().unwrap_or(0);
    let (cx, cy) = if sx == T::one() && sy == T::one() {
        (k.cx - left, k.cy - top)
    } else {
        ((k.cx - left + half) * sx - half, (k.cy - top + half) * sy - half)
    };
    CameraIntrinsics::new(k.fx * sx, k.fy * sy, cx, cy, width, height)
}

/// Orientation maps for the same camera resampled to a `w x h` grid.
///
/// The values are recomputed from scaled intrinsics; `maps` only short-circuits
/// the identity case.
pub fn resize_maps_to<T: Scalar>(
    maps: &OrientationMaps<T>,
    k: &CameraIntrinsics<T>,
    w: usize,
    h: usize,
) -> Result<OrientationMaps<T>> {
    if w == 0 || h == 0 {
        return Err(invalid(format!("target size must be at least 1x1 (got {w}x{h})")));
    }
    if w == k.width && h == k.height && maps.cols() == w && maps.rows() == h {
        return Ok(maps.clone());
    }
    let sx = T::from_usize(w).unwrap() / T::from_usize(k.width).unwrap();
    let sy = T::from_usize(h).unwrap() / T::from_usize(k.height).unwrap();
    let adjusted = adjust_intrinsics(k, &k.full_frame(), (sx, sy))?;
    orientation_maps(&adjusted)
}

/// Writes `ha.f32`, `va.f32` (row-major little-endian f32) and `shape.txt` into `dir`.
pub fn write_map_files<T: Scalar>(maps: &OrientationMaps<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, grid) in [("ha.f32", &maps.horizontal), ("va.f32", &maps.vertical)] {
        let mut bytes = Vec::with_capacity(grid.data.len() * 4);
        for &x in &grid.data {
            bytes.extend_from_slice(&x.to_f32_bits().to_le_bytes());
        }
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("shape.txt");
    let header = format!(
        "rows={}\ncols={}\ndtype=f32le\nlayout=row-major\nfiles=ha.f32,va.f32\n",
        maps.rows(),
        maps.cols()
    );
    std::fs::write(&path, header).map_err(|e| Error::io(&path, e))
}

/// Reads a grid written by [`write_map_files`].
pub fn read_map_file(path: &Path, rows: usize, cols: usize) -> Result<Grid<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Corrupt(format!(
            "{}: expected {} bytes for {rows}x{cols}, found {}",
            path.display(),
            rows * cols * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Grid { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn cam(fx: f64, fy: f64, cx: f64, cy: f64, w: usize, h: usize) -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(fx, fy, cx, cy, w, h).unwrap()
    }

    #[test]
    fn principal_point_looks_down_the_axis() {
        let k = cam(500.0, 400.0, 320.0, 180.0, 640, 360);
        assert_eq!(pixel_orientation(320.0, 180.0, &k).unwrap(), (0.0, 0.0));
        let (t, b) = pixel_orientation(820.0, 180.0, &k).unwrap();
        assert_eq!(t, FRAC_PI_4);
        assert_eq!(b, 0.0);
        assert!((t - 0.785_398_163_397_448_3).abs() < 1e-15);
    }

    #[test]
    fn offsets_about_principal_point_are_odd() {
        let k = cam(321.5, 280.0, 100.0, 50.0, 200, 100);
        for d in [0.25, 1.0, 7.0, 99.0] {
            let (a, _) = pixel_orientation(100.0 + d, 3.0, &k).unwrap();
            let (b, _) = pixel_orientation(100.0 - d, 3.0, &k).unwrap();
            assert_eq!(a, -b);
        }
    }

    #[test]
    fn non_finite_pixel_is_rejected() {
        let k = cam(1.0, 1.0, 0.0, 0.0, 1, 1);
        assert!(matches!(
            pixel_orientation(f64::NAN, 0.0, &k),
            Err(Error::InvalidArgument(_))
        ));
        assert!(pixel_orientation(0.0, f64::INFINITY, &k).is_err());
    }

    #[test]
    fn constructor_rejects_bad_intrinsics() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 0.0, 0.0, 1, 1).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 1).is_err());
    }

    #[test]
    fn three_pixel_row() {
        let k = cam(1.0, 1.0, 1.0, 0.0, 3, 1);
        let m = orientation_maps(&k).unwrap();
        assert_eq!(m.horizontal.data, vec![-FRAC_PI_4, 0.0, FRAC_PI_4]);
    }

    #[test]
    fn budget_is_enforced() {
        let k = cam(1.0, 1.0, 0.0, 0.0, 100, 100);
        assert!(matches!(
            orientation_maps_with_budget(&k, 9_999),
            Err(Error::Resource(_))
        ));
        assert!(orientation_maps_with_budget(&k, 10_000).is_ok());
    }

    #[test]
    fn identity_adjustment() {
        let k = cam(500.0, 450.0, 319.5, 179.5, 640, 360);
        assert_eq!(adjust_intrinsics(&k, &k.full_frame(), (1.0, 1.0)).unwrap(), k);
    }

    #[test]
    fn crop_matches_submap() {
        let k = cam(210.0, 190.0, 150.3, 80.7, 300, 160);
        let full = orientation_maps(&k).unwrap();
        let crop = CropRect::new(17, 40, 200, 90);
        let adj = adjust_intrinsics(&k, &crop, (1.0, 1.0)).unwrap();
        let cropped = orientation_maps(&adj).unwrap();
        let sub = full.submap(&crop);
        for (a, b) in cropped.horizontal.data.iter().zip(&sub.horizontal.data) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in cropped.vertical.data.iter().zip(&sub.vertical.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn crop_outside_frame_is_rejected() {
        let k = cam(1.0, 1.0, 0.0, 0.0, 10, 10);
        assert!(adjust_intrinsics(&k, &CropRect::new(5, 0, 6, 10), (1.0, 1.0)).is_err());
        assert!(adjust_intrinsics(&k, &CropRect::new(0, 0, 0, 10), (1.0, 1.0)).is_err());
        assert!(adjust_intrinsics(&k, &k.full_frame(), (0.0, 1.0)).is_err());
    }

    #[test]
    fn half_scale_keeps_principal_point_on_axis() {
        let k = CameraIntrinsics::centered(300.0, 300.0, 640, 360).unwrap();
        let adj = adjust_intrinsics(&k, &k.full_frame(), (0.5, 0.5)).unwrap();
        assert_eq!((adj.width, adj.height), (320, 180));
        let (t, b) = pixel_orientation(adj.cx, adj.cy, &adj).unwrap();
        assert_eq!((t, b), (0.0, 0.0));
        assert_eq!(adj.cx, 159.5);
    }

    #[test]
    fn resize_identity_and_recompute() {
        let k = cam(1.0, 1.0, 1.0, 0.0, 3, 1);
        let m = orientation_maps(&k).unwrap();
        assert_eq!(resize_maps_to(&m, &k, 3, 1).unwrap(), m);

        // 3 -> 2 columns, so sx = w / width = 2/3
        let r = resize_maps_to(&m, &k, 2, 1).unwrap();
        let sx = 2.0 / 3.0;
        let fx = sx;
        let cx = (1.0 + 0.5) * sx - 0.5;
        let expect: Vec<f64> = (0..2).map(|u| (u as f64 - cx).atan2(fx)).collect();
        assert_eq!(r.horizontal.data, expect);
    }

    #[test]
    fn intrinsics_text_round_trip() {
        let k = cam(512.25, 498.0, 319.5, 181.125, 640, 360);
        let back = CameraIntrinsics::<f64>::parse_str(&k.to_text()).unwrap();
        assert_eq!(back, k);
        assert!(matches!(
            CameraIntrinsics::<f64>::parse_str("fx=1\nfy=1\ncx=0\ncy=oops\nwidth=1\nheight=1"),
            Err(Error::Format { line: 4, .. })
        ));
        assert!(CameraIntrinsics::<f64>::parse_str("fx=1\n").is_err());
    }

    #[test]
    fn generic_over_f32() {
        let k = CameraIntrinsics::<f32>::new(1.0, 1.0, 1.0, 0.0, 3, 1).unwrap();
        let m = orientation_maps(&k).unwrap();
        assert_eq!(m.horizontal.data[2], std::f32::consts::FRAC_PI_4);
    }
}
