//! Procedural road scenes with a controllable long-tail steering distribution.
//!
//! A drive is a road centerline sampled every [`STEP_M`] metres. Its curvature
//! `κ_j` is piecewise-targeted: each segment draws a target
//! `sign · κ_max · turn_scale · u^tail_alpha` with `u ~ U[0, 1)`, and the curvature
//! relaxes toward it by a fixed fraction per step. The camera advances one
//! step per frame, so the label of frame `i` is
//!
//! ```text
//! label_i = STEERING_GAIN · STEP_M · Σ_{j=i}^{i+m-1} κ_j,   m = LOOKAHEAD_M / STEP_M
//! ```
//!
//! which is `STEERING_GAIN` times the heading change over the lookahead
//! distance. `κ_max = max_angle / (STEERING_GAIN · LOOKAHEAD_M)` keeps every
//! label inside `[-max_angle, max_angle]`.
//!
//! All randomness comes from SplitMix64 (`rand_xoshiro::SplitMix64`), seeded
//! per drive with `seed ^ (drive_seed · 0x9E3779B97F4A7C15)`.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;

use crate::camera_geometry::{CameraIntrinsics, CropRect};
use crate::data_pipeline::{
    parallel_map, preprocess_frame, quantize_frame, Drive, DriveRecord, FrameStore, LoadedDrive, RAW_STEERING_SCALE,
};
use crate::error::{invalid, Error, Result};

/// Label per radian of heading change over the lookahead.
pub const STEERING_GAIN: f64 = 2.5;
pub const LOOKAHEAD_M: f64 = 10.0;
/// Distance travelled per frame.
pub const STEP_M: f64 = 1.0;
pub const FRAME_PERIOD_S: f64 = 0.1;
pub const CAMERA_HEIGHT_M: f64 = 1.5;
pub const ROAD_HALF_WIDTH_M: f64 = 3.5;
pub const LINE_WIDTH_M: f64 = 0.25;
/// Ground beyond this forward distance is drawn as haze.
pub const RENDER_DISTANCE_M: f64 = 45.0;
/// Fraction of the remaining gap to the segment target closed per step.
pub const CURVATURE_RELAXATION: f64 = 0.15;
pub const SEGMENT_STEPS: (usize, usize) = (15, 60);

const LOOKAHEAD_STEPS: usize = (LOOKAHEAD_M / STEP_M) as usize;
const RENDER_STEPS: usize = (RENDER_DISTANCE_M / STEP_M) as usize + 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackParams {
    /// Power applied to uniform segment magnitudes; larger means more mass near zero.
    pub tail_alpha: f64,
    /// Radians.
    pub max_angle: f64,
    pub frames_per_drive: usize,
    /// `(height, width)` of rendered frames.
    pub image_size: (usize, usize),
    /// Standard deviation of additive pixel noise, in 8-bit levels.
    pub noise_std: f64,
    pub seed: u64,
    /// Scales every curvature target; 0 gives a straight road. In `[0, 1]`.
    pub turn_scale: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            tail_alpha: 10.0,
            max_angle: 0.5,
            frames_per_drive: 200,
            image_size: (180, 320),
            noise_std: 2.0,
            seed: 0,
            turn_scale: 1.0,
        }
    }
}

impl TrackParams {
    /// Also requires every drive to hold at least one window of `seq_len` frames.
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if !(self.max_angle > 0.0 && self.max_angle <= std::f64::consts::PI) {
            return Err(invalid(format!("max_angle {} outside (0, π]", self.max_angle)));
        }
        if !(self.tail_alpha.is_finite() && self.tail_alpha > 0.0) {
            return Err(invalid(format!("tail_alpha {} must be positive", self.tail_alpha)));
        }
        if !(0.0..=1.0).contains(&self.turn_scale) {
            return Err(invalid(format!("turn_scale {} outside [0, 1]", self.turn_scale)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(invalid(format!("noise_std {} must be non-negative", self.noise_std)));
        }
        if self.frames_per_drive < seq_len.max(1) {
            return Err(invalid(format!(
                "frames_per_drive {} is shorter than seq_len {seq_len}",
                self.frames_per_drive
            )));
        }
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(invalid(format!("image size {h}x{w} too small")));
        }
        Ok(())
    }

    pub fn max_curvature(&self) -> f64 {
        self.max_angle / (STEERING_GAIN * LOOKAHEAD_M)
    }

    /// Pinhole camera centred on the frame, focal length 0.625 of the width.
    pub fn intrinsics(&self) -> CameraIntrinsics<f64> {
        let (h, w) = self.image_size;
        let f = 0.625 * w as f64;
        CameraIntrinsics::centered(f, f, w, h).expect("validated image size")
    }

    /// Full-width crop of the lower 55% of the frame: road plus a strip of horizon.
    pub fn default_crop(&self) -> CropRect {
        let (h, w) = self.image_size;
        let top = (0.45 * h as f64).round() as usize;
        CropRect::new(0, top, w, h - top)
    }
}

/// Curvature profile of one drive, one value per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub curvature: Vec<f64>,
}

impl Track {
    pub fn sample(p: &TrackParams, drive_seed: u64) -> Self {
        let n = p.frames_per_drive + LOOKAHEAD_STEPS.max(RENDER_STEPS);
        let mut rng = drive_rng(p.seed, drive_seed);
        let kmax = p.max_curvature() * p.turn_scale;
        let next_target = |rng: &mut SplitMix64| -> (f64, usize) {
            let len = rng.random_range(SEGMENT_STEPS.0..=SEGMENT_STEPS.1);
            let u: f64 = rng.random();
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (sign * kmax * u.powf(p.tail_alpha), len)
        };
        let (mut target, mut left) = next_target(&mut rng);
        let mut k = target;
        let mut curvature = Vec::with_capacity(n);
        for _ in 0..n {
            if left == 0 {
                (target, left) = next_target(&mut rng);
            }
            k += CURVATURE_RELAXATION * (target - k);
            curvature.push(k);
            left -= 1;
        }
        Self { curvature }
    }

    /// The same road reflected left to right.
    pub fn mirrored(&self) -> Self {
        Self {
            curvature: self.curvature.iter().map(|k| -k).collect(),
        }
    }

    /// Label of frame `i` (closed form in the module docs).
    pub fn label(&self, i: usize) -> f64 {
        let sum: f64 = self.curvature[i..i + LOOKAHEAD_STEPS].iter().sum();
        STEERING_GAIN * STEP_M * sum
    }

    /// `(lateral, forward, heading)` of every centerline sample, starting at the origin facing +forward.
    fn centerline(&self) -> Vec<(f64, f64, f64)> {
        let mut pts = Vec::with_capacity(self.curvature.len() + 1);
        let (mut x, mut z, mut psi) = (0.0f64, 0.0f64, 0.0f64);
        pts.push((x, z, psi));
        for &k in &self.curvature {
            x += STEP_M * psi.sin();
            z += STEP_M * psi.cos();
            psi += k * STEP_M;
            pts.push((x, z, psi));
        }
        pts
    }
}

fn drive_rng(seed: u64, drive_seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed ^ drive_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone)]
pub struct SyntheticDrive {
    pub frames: Vec<RgbImage>,
    pub labels: Vec<f64>,
    pub intrinsics: CameraIntrinsics<f64>,
    pub track: Track,
}

pub fn generate_drive(p: &TrackParams, drive_seed: u64) -> Result<SyntheticDrive> {
    p.validate(1)?;
    render_drive(p, &Track::sample(p, drive_seed), drive_seed)
}

/// Renders every frame of `track`. Pixel noise is seeded by `drive_seed` and the frame index.
pub fn render_drive(p: &TrackParams, track: &Track, drive_seed: u64) -> Result<SyntheticDrive> {
    p.validate(1)?;
    let needed = p.frames_per_drive + LOOKAHEAD_STEPS.max(RENDER_STEPS);
    if track.curvature.len() < needed {
        return Err(invalid(format!(
            "track has {} steps, {} frames need {needed}",
            track.curvature.len(),
            p.frames_per_drive
        )));
    }
    let k = p.intrinsics();
    let pts = track.centerline();
    let mut frames = Vec::with_capacity(p.frames_per_drive);
    let mut labels = Vec::with_capacity(p.frames_per_drive);
    for i in 0..p.frames_per_drive {
        let mut img = render_frame(p, &k, &pts, i);
        if p.noise_std > 0.0 {
            let mut rng = drive_rng(p.seed ^ 0x5DEE_CE66_D1CE_4E5B, drive_seed.wrapping_add((i as u64) << 32));
            let normal = Normal::new(0.0, p.noise_std).expect("finite non-negative std");
            for v in img.iter_mut() {
                let n: f64 = normal.sample(&mut rng);
                *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8;
            }
        }
        frames.push(img);
        labels.push(track.label(i));
    }
    Ok(SyntheticDrive {
        frames,
        labels,
        intrinsics: k,
        track: track.clone(),
    })
}

fn render_frame(p: &TrackParams, k: &CameraIntrinsics<f64>, pts: &[(f64, f64, f64)], i: usize) -> RgbImage {
    let (h, w) = p.image_size;
    let (x0, z0, psi) = pts[i];
    let (s, c) = psi.sin_cos();
    // centerline in the camera frame: (forward, lateral), forward strictly increasing
    let mut local: Vec<(f64, f64)> = Vec::with_capacity(RENDER_STEPS);
    for &(x, z, _) in &pts[i..(i + RENDER_STEPS).min(pts.len())] {
        let (dx, dz) = (x - x0, z - z0);
        let fwd = s * dx + c * dz;
        let lat = c * dx - s * dz;
        if local.last().is_some_and(|&(f, _)| fwd <= f) {
            break;
        }
        local.push((fwd, lat));
    }
    let travelled = i as f64 * STEP_M;
    let mut img = RgbImage::new(w as u32, h as u32);
    for v in 0..h {
        let dv = v as f64 - k.cy;
        let depth = if dv > 0.0 { CAMERA_HEIGHT_M * k.fy / dv } else { f64::INFINITY };
        if depth > RENDER_DISTANCE_M || depth > local.last().map_or(0.0, |l| l.0) {
            let shade = if dv > 0.0 {
                [176, 186, 180]
            } else {
                let t = (-dv / k.cy).min(1.0);
                let mix = |a: f64, b: f64| (a + (b - a) * t) as u8;
                [mix(200.0, 110.0), mix(215.0, 150.0), mix(230.0, 215.0)]
            };
            for u in 0..w {
                img.put_pixel(u as u32, v as u32, Rgb(shade));
            }
            continue;
        }
        let center = interpolate(&local, depth);
        let along = travelled + depth;
        let stripe = if (along / 2.0).rem_euclid(1.0) < 0.5 { 12.0 } else { -12.0 };
        let dash = (along / 3.0).rem_euclid(1.0) < 0.5;
        for u in 0..w {
            let lateral = (u as f64 - k.cx) * depth / k.fx;
            let d = (lateral - center).abs();
            let px = if d <= 0.08 && dash {
                [220, 200, 90]
            } else if d < ROAD_HALF_WIDTH_M - LINE_WIDTH_M {
                [62, 62, 68]
            } else if d <= ROAD_HALF_WIDTH_M {
                [235, 235, 235]
            } else {
                let tex = 14.0 * (0.9 * d).sin() + stripe;
                [(72.0 + tex) as u8, (118.0 + tex) as u8, (52.0 + 0.5 * tex) as u8]
            };
            img.put_pixel(u as u32, v as u32, Rgb(px));
        }
    }
    img
}

fn interpolate(pts: &[(f64, f64)], fwd: f64) -> f64 {
    let idx = pts.partition_point(|&(f, _)| f < fwd);
    if idx == 0 {
        return pts[0].1;
    }
    if idx >= pts.len() {
        return pts[pts.len() - 1].1;
    }
    let (f0, l0) = pts[idx - 1];
    let (f1, l1) = pts[idx];
    l0 + (l1 - l0) * (fwd - f0) / (f1 - f0)
}

/// Horizontal flip.
pub fn mirror_frame(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

/// Writes `n_drives` drives under `out_dir` (`drive_NNN/frame_NNNNN.png`,
/// `drive_NNN/intrinsics.txt`) plus `manifest.txt`; returns the manifest content.
pub fn generate_dataset(p: &TrackParams, n_drives: usize, out_dir: &Path, workers: usize) -> Result<Vec<Drive>> {
    p.validate(1)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ids: Vec<usize> = (0..n_drives).collect();
    let drives = parallel_map(&ids, workers.max(1), |&d| write_drive(p, d, out_dir))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    crate::data_pipeline::write_manifest(&out_dir.join("manifest.txt"), &drives)?;
    Ok(drives)
}

fn write_drive(p: &TrackParams, index: usize, out_dir: &Path) -> Result<Drive> {
    let id = format!("drive_{index:03}");
    let dir = out_dir.join(&id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let synth = generate_drive(p, index as u64)?;
    let intrinsics_path = dir.join("intrinsics.txt");
    synth.intrinsics.write(&intrinsics_path)?;
    let mut records = Vec::with_capacity(synth.frames.len());
    for (i, (frame, &label)) in synth.frames.iter().zip(&synth.labels).enumerate() {
        let image_path: PathBuf = dir.join(format!("frame_{i:05}.png"));
        frame.save(&image_path).map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?;
        records.push(DriveRecord {
            image_path,
            timestamp: i as f64 * FRAME_PERIOD_S,
            raw_steering: label * RAW_STEERING_SCALE,
            drive_id: id.clone(),
        });
    }
    Ok(Drive {
        id,
        intrinsics_path,
        records,
    })
}

/// Drives `0..n_drives` preprocessed straight into memory, identical to
/// writing them with [`generate_dataset`] and loading the manifest.
pub fn frame_store(p: &TrackParams, n_drives: usize, crop: Option<&CropRect>, workers: usize) -> Result<FrameStore> {
    p.validate(1)?;
    let ids: Vec<usize> = (0..n_drives).collect();
    let drives = parallel_map(&ids, workers.max(1), |&d| -> Result<LoadedDrive> {
        let synth = generate_drive(p, d as u64)?;
        let crop = crop.copied().unwrap_or_else(|| synth.intrinsics.full_frame());
        let mut frames = Vec::with_capacity(synth.frames.len());
        let mut intrinsics = synth.intrinsics;
        for img in &synth.frames {
            let (f, k) = preprocess_frame::<f32>(img, &crop, &synth.intrinsics)?;
            frames.push(quantize_frame(&f));
            intrinsics = k;
        }
        Ok(LoadedDrive {
            id: format!("drive_{d:03}"),
            intrinsics,
            frames,
            timestamps: (0..synth.labels.len()).map(|i| i as f64 * FRAME_PERIOD_S).collect(),
            labels: synth.labels,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(FrameStore::new(drives))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `n_bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Uniform bins over `[-limit, limit]`; `limit` defaults to the largest `|label|`
/// (1 if every label is zero). Out-of-range values land in the end bins.
/// Negative values are binned as the mirror of their magnitude, so a
/// sign-symmetric label set always gives mirror-symmetric counts.
pub fn steering_histogram(labels: &[f64], n_bins: usize, limit: Option<f64>) -> Result<Histogram> {
    if labels.is_empty() {
        return Err(Error::Validation("histogram of zero labels".into()));
    }
    if n_bins == 0 {
        return Err(invalid("n_bins must be at least 1"));
    }
    if labels.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("histogram labels must be finite".into()));
    }
    let max = limit.unwrap_or_else(|| labels.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let max = if max > 0.0 { max } else { 1.0 };
    let width = 2.0 * max / n_bins as f64;
    let edges = (0..=n_bins).map(|i| -max + width * i as f64).collect();
    let bin = |x: f64| -> usize { (((x + max) / width).floor().max(0.0) as usize).min(n_bins - 1) };
    let mut counts = vec![0; n_bins];
    for &v in labels {
        let idx = if v < 0.0 { n_bins - 1 - bin(-v) } else { bin(v) };
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}
