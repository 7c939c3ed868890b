//! Dataset manifests, frame preprocessing, orientation channels, windowing and splits.
//!
//! Manifest format (UTF-8 text, one record per line):
//!
//! ```text
//! # comment
//! drive,<drive_id>,<intrinsics file, relative to the manifest>
//! <image path>,<timestamp seconds>,<raw steering>
//! ...
//! ```
//!
//! A `drive,...` line selects the drive that the following records belong to; a
//! drive may be re-opened further down the file. Raw steering values are in
//! thousandths of a radian, `[-1000π, 1000π]`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use sha2::{Digest, Sha256};

use crate::camera_geometry::{adjust_intrinsics, orientation_maps, CameraIntrinsics, CropRect, OrientationMaps};
use crate::error::{invalid, Error, Result};
use crate::network::{FusionMaps, ModelConfig, INPUT_COLS, INPUT_ROWS};
use crate::scalar::Scalar;

pub const RAW_STEERING_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DriveRecord {
    pub image_path: PathBuf,
    pub timestamp: f64,
    pub raw_steering: f64,
    pub drive_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drive {
    pub id: String,
    /// Intrinsics file of the raw camera, resolved against the manifest directory.
    pub intrinsics_path: PathBuf,
    pub records: Vec<DriveRecord>,
}

impl Drive {
    /// Steering labels in radians.
    pub fn labels(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.raw_steering / RAW_STEERING_SCALE)
            .collect()
    }
}

/// Raw steering (thousandths of a radian) to radians.
pub fn normalize_angle(raw: f64) -> Result<f64> {
    let bound = std::f64::consts::PI * RAW_STEERING_SCALE;
    if !raw.is_finite() || raw.abs() > bound {
        return Err(Error::Validation(format!(
            "raw steering {raw} outside [-1000π, 1000π]"
        )));
    }
    Ok(raw / RAW_STEERING_SCALE)
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<Drive>> {
    let mut drives: Vec<Drive> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut current: Option<usize> = None;
    let mut problems = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let fmt_err = |message: String| Error::Format {
            line: line_no,
            message,
        };
        if fields[0] == "drive" {
            if fields.len() != 3 || fields[1].is_empty() {
                return Err(fmt_err(format!(
                    "drive header must be `drive,<id>,<intrinsics>`, got {line:?}"
                )));
            }
            let id = fields[1].to_string();
            let intrinsics_path = base_dir.join(fields[2]);
            let slot = match index.get(&id) {
                Some(&i) => {
                    if drives[i].intrinsics_path != intrinsics_path {
                        return Err(fmt_err(format!(
                            "drive {id} re-declared with a different intrinsics file"
                        )));
                    }
                    i
                }
                None => {
                    index.insert(id.clone(), drives.len());
                    drives.push(Drive {
                        id,
                        intrinsics_path,
                        records: Vec::new(),
                    });
                    drives.len() - 1
                }
            };
            current = Some(slot);
            continue;
        }
        if fields.len() != 3 {
            return Err(fmt_err(format!(
                "record must be `image_path,timestamp,raw_steering`, got {line:?}"
            )));
        }
        let Some(slot) = current else {
            return Err(fmt_err("record before any drive header".into()));
        };
        let timestamp: f64 = fields[1]
            .parse()
            .map_err(|e| fmt_err(format!("bad timestamp {:?}: {e}", fields[1])))?;
        let raw_steering: f64 = fields[2]
            .parse()
            .map_err(|e| fmt_err(format!("bad steering value {:?}: {e}", fields[2])))?;
        let drive = &mut drives[slot];
        if let Err(e) = normalize_angle(raw_steering) {
            problems.push(format!("line {line_no}: {e}"));
        }
        if !timestamp.is_finite() {
            problems.push(format!("line {line_no}: non-finite timestamp"));
        } else if let Some(prev) = drive.records.last() {
            if timestamp <= prev.timestamp {
                problems.push(format!(
                    "line {line_no}: timestamp {timestamp} not after {} in drive {}",
                    prev.timestamp, drive.id
                ));
            }
        }
        drive.records.push(DriveRecord {
            image_path: base_dir.join(fields[0]),
            timestamp,
            raw_steering,
            drive_id: drive.id.clone(),
        });
    }
    if !problems.is_empty() {
        return Err(Error::Validation(format!(
            "{} invalid record(s): {}",
            problems.len(),
            problems.join("; ")
        )));
    }
    Ok(drives)
}

pub fn load_manifest(path: &Path) -> Result<Vec<Drive>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

/// Renders drives in manifest format with paths made relative to `base_dir` where possible.
pub fn format_manifest(drives: &[Drive], base_dir: &Path) -> String {
    let rel = |p: &Path| -> String {
        p.strip_prefix(base_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut s = String::new();
    for d in drives {
        let _ = writeln!(s, "drive,{},{}", d.id, rel(&d.intrinsics_path));
        for r in &d.records {
            let _ = writeln!(s, "{},{:?},{:?}", rel(&r.image_path), r.timestamp, r.raw_steering);
        }
    }
    s
}

pub fn write_manifest(path: &Path, drives: &[Drive]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::write(path, format_manifest(drives, base)).map_err(|e| Error::io(path, e))
}

/// Crops, then bilinearly resizes to 200x66. Returns the planar `[3 x 66 x 200]`
/// image (values in `[0, 255]`) and the intrinsics of the resized frame.
pub fn preprocess_frame<T: Scalar>(
    image: &RgbImage,
    crop: &CropRect,
    k: &CameraIntrinsics<f64>,
) -> Result<(Vec<T>, CameraIntrinsics<f64>)> {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    if (k.width, k.height) != (w, h) {
        return Err(invalid(format!(
            "image is {w}x{h} but intrinsics describe {}x{}",
            k.width, k.height
        )));
    }
    crop.check_inside(w, h)?;
    let sx = INPUT_COLS as f64 / crop.width as f64;
    let sy = INPUT_ROWS as f64 / crop.height as f64;
    let adjusted = adjust_intrinsics(k, crop, (sx, sy))?;
    let raw = image.as_raw();
    let plane = INPUT_ROWS * INPUT_COLS;
    let mut out = vec![T::zero(); 3 * plane];
    // source coordinate and interpolation weight per output column / row
    let taps = |n_out: usize, n_in: usize, scale: f64, offset: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) / scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (offset + lo, offset + hi, src - lo as f64)
            })
            .collect()
    };
    let xs = taps(INPUT_COLS, crop.width, sx, crop.left);
    let ys = taps(INPUT_ROWS, crop.height, sy, crop.top);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let at = |x: usize, y: usize| raw[(y * w + x) * 3 + c] as f64;
                let v = if fx == 0.0 && fy == 0.0 {
                    at(x0, y0)
                } else {
                    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                    top * (1.0 - fy) + bottom * fy
                };
                out[c * plane + oy * INPUT_COLS + ox] = T::from_f64_lossy(v);
            }
        }
    }
    Ok((out, adjusted))
}

/// Appends normalized HA and VA channels: output channels are R, G, B, HA, VA.
pub fn attach_orientation_channels<T: Scalar>(image: &[T], maps: &OrientationMaps<f64>) -> Result<Vec<T>> {
    let plane = INPUT_ROWS * INPUT_COLS;
    if image.len() != 3 * plane {
        return Err(Error::Shape(format!(
            "image has {} values, expected 3x{INPUT_ROWS}x{INPUT_COLS}",
            image.len()
        )));
    }
    if maps.rows() != INPUT_ROWS || maps.cols() != INPUT_COLS {
        return Err(Error::Shape(format!(
            "orientation maps are {}x{}, expected {INPUT_ROWS}x{INPUT_COLS}",
            maps.rows(),
            maps.cols()
        )));
    }
    let (ha, va) = maps.normalized::<T>();
    let mut out = Vec::with_capacity(5 * plane);
    out.extend_from_slice(image);
    out.extend(ha);
    out.extend(va);
    Ok(out)
}

/// Splits a five-channel frame back into its image and `(HA, VA)` channels.
pub fn detach_orientation_channels<T: Copy>(frame: &[T]) -> Result<(&[T], &[T], &[T])> {
    let plane = INPUT_ROWS * INPUT_COLS;
    if frame.len() != 5 * plane {
        return Err(Error::Shape(format!("expected 5x{INPUT_ROWS}x{INPUT_COLS} frame")));
    }
    Ok((&frame[..3 * plane], &frame[3 * plane..4 * plane], &frame[4 * plane..]))
}

/// Minimal view of a drive needed for windowing.
pub trait DriveTimeline {
    fn id(&self) -> &str;
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> f64;
    fn timestamp(&self, i: usize) -> f64;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl DriveTimeline for Drive {
    fn id(&self) -> &str {
        &self.id
    }
    fn len(&self) -> usize {
        self.records.len()
    }
    fn label(&self, i: usize) -> f64 {
        self.records[i].raw_steering / RAW_STEERING_SCALE
    }
    fn timestamp(&self, i: usize) -> f64 {
        self.records[i].timestamp
    }
}

/// `seq_len` consecutive frames `start..start+seq_len` of drive `drive`, labelled
/// with the steering angle of the last frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceWindow {
    pub drive: usize,
    pub drive_id: String,
    pub start: usize,
    pub seq_len: usize,
    pub target: f64,
    pub end_timestamp: f64,
}

impl SequenceWindow {
    pub fn frame_range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.seq_len
    }

    pub fn last_frame(&self) -> usize {
        self.start + self.seq_len - 1
    }
}

pub fn window_sequences<D: DriveTimeline>(drives: &[D], seq_len: usize, stride: usize) -> Result<Vec<SequenceWindow>> {
    if seq_len == 0 || stride == 0 {
        return Err(invalid("seq_len and stride must be at least 1"));
    }
    let mut out = Vec::new();
    for (d, drive) in drives.iter().enumerate() {
        if drive.len() < seq_len {
            continue;
        }
        let mut start = 0;
        while start + seq_len <= drive.len() {
            let last = start + seq_len - 1;
            out.push(SequenceWindow {
                drive: d,
                drive_id: drive.id().to_string(),
                start,
                seq_len,
                target: drive.label(last),
                end_timestamp: drive.timestamp(last),
            });
            start += stride;
        }
    }
    Ok(out)
}

/// Parses `0.8,0.1,0.1`-style split ratios: one to three positive values summing to 1.
pub fn parse_ratios(text: &str) -> Result<Vec<f64>> {
    let ratios: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| invalid(format!("bad split ratio {s:?}: {e}"))))
        .collect::<Result<_>>()?;
    check_ratios(&ratios)?;
    Ok(ratios)
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() || ratios.len() > 3 {
        return Err(invalid("between one and three split ratios are required"));
    }
    if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(invalid(format!("split ratios must be positive (got {ratios:?})")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios sum to {sum}, not 1")));
    }
    Ok(())
}

/// Drive counts per split by largest-remainder apportionment, each split getting at least one.
pub fn apportion(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    check_ratios(ratios)?;
    if n < ratios.len() {
        return Err(Error::Validation(format!(
            "{n} drive(s) cannot fill {} non-empty splits",
            ratios.len()
        )));
    }
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..counts.len()).max_by_key(|&i| (counts[i], usize::MAX - i)).unwrap();
        counts[largest] -= 1;
        counts[empty] += 1;
    }
    Ok(counts)
}

/// Drive-index sets for train/val/test. Missing ratios yield empty splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    /// Short hash of the drive ids in each split, identical for identical splits.
    pub fn fingerprint<D: DriveTimeline>(&self, drives: &[D]) -> String {
        let mut h = Sha256::new();
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            h.update(name.as_bytes());
            let ids: BTreeSet<&str> = part.iter().map(|&i| drives[i].id()).collect();
            for id in ids {
                h.update(b"\x1f");
                h.update(id.as_bytes());
            }
            h.update(b"\x1e");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Shuffles drives with `seed` and cuts them into contiguous train/val/test groups.
pub fn split_dataset<D: DriveTimeline>(drives: &[D], ratios: &[f64], seed: u64) -> Result<DatasetSplit> {
    let counts = apportion(drives.len(), ratios)?;
    let mut order: Vec<usize> = (0..drives.len()).collect();
    order.shuffle(&mut SplitMix64::seed_from_u64(seed));
    let mut parts = vec![Vec::new(); 3];
    let mut cursor = 0;
    for (slot, &c) in counts.iter().enumerate() {
        parts[slot] = order[cursor..cursor + c].to_vec();
        parts[slot].sort_unstable();
        cursor += c;
    }
    let mut it = parts.into_iter();
    Ok(DatasetSplit {
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

/// A drive after preprocessing, held in memory.
#[derive(Debug, Clone)]
pub struct LoadedDrive {
    pub id: String,
    /// Intrinsics of the 200x66 network frames.
    pub intrinsics: CameraIntrinsics<f64>,
    /// Planar RGB frames `[3 x 66 x 200]`, rounded to bytes.
    pub frames: Vec<Vec<u8>>,
    pub labels: Vec<f64>,
    pub timestamps: Vec<f64>,
}

impl DriveTimeline for LoadedDrive {
    fn id(&self) -> &str {
        &self.id
    }
    fn len(&self) -> usize {
        self.frames.len()
    }
    fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }
    fn timestamp(&self, i: usize) -> f64 {
        self.timestamps[i]
    }
}

/// Rounds a preprocessed `[0, 255]` image to bytes for compact storage.
pub fn quantize_frame<T: Scalar>(frame: &[T]) -> Vec<u8> {
    frame
        .iter()
        .map(|v| v.as_f64().round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Preprocessed drives plus per-drive orientation data.
#[derive(Debug, Clone, Default)]
pub struct FrameStore {
    pub drives: Vec<LoadedDrive>,
}

impl FrameStore {
    pub fn new(drives: Vec<LoadedDrive>) -> Self {
        Self { drives }
    }

    pub fn frame_count(&self) -> usize {
        self.drives.iter().map(|d| d.frames.len()).sum()
    }

    /// Orientation maps of every drive at network resolution.
    pub fn orientation_maps(&self) -> Result<Vec<OrientationMaps<f64>>> {
        self.drives.iter().map(|d| orientation_maps(&d.intrinsics)).collect()
    }

    /// Builds the per-drive inputs a model with `cfg` needs besides pixel data.
    pub fn model_inputs<T: Scalar>(&self, cfg: &ModelConfig) -> Result<ModelInputs<T>> {
        let mut channels = Vec::with_capacity(self.drives.len());
        let mut fusion = Vec::with_capacity(self.drives.len());
        for d in &self.drives {
            if cfg.in_channels == 5 {
                let m = orientation_maps(&d.intrinsics)?;
                let (ha, va) = m.normalized::<T>();
                channels.push(Some((ha, va)));
            } else {
                channels.push(None);
            }
            fusion.push(match cfg.fusion_size() {
                Some((r, c)) => Some(FusionMaps::for_camera(&d.intrinsics, r, c)?),
                None => None,
            });
        }
        Ok(ModelInputs {
            in_channels: cfg.in_channels,
            channels,
            fusion,
        })
    }

    /// Network input of one frame: RGB, plus HA/VA when `inputs` asks for five channels.
    pub fn frame_pixels<T: Scalar>(&self, inputs: &ModelInputs<T>, drive: usize, frame: usize) -> Vec<T> {
        let plane = INPUT_ROWS * INPUT_COLS;
        let mut out = Vec::with_capacity(inputs.in_channels * plane);
        out.extend(self.drives[drive].frames[frame].iter().map(|&b| T::from_f64_lossy(b as f64)));
        if let Some((ha, va)) = &inputs.channels[drive] {
            out.extend_from_slice(ha);
            out.extend_from_slice(va);
        }
        out
    }

    /// Loads and preprocesses every drive in `drives`, fanning frames out over `workers` threads.
    /// Without a crop each drive uses its full frame. The result does not depend on the worker count.
    pub fn load(drives: &[Drive], crop: Option<&CropRect>, workers: usize) -> Result<Self> {
        let mut loaded = Vec::with_capacity(drives.len());
        for d in drives {
            let k = CameraIntrinsics::<f64>::load(&d.intrinsics_path)?;
            let crop = &crop.copied().unwrap_or_else(|| k.full_frame());
            let process = |r: &DriveRecord| -> Result<Vec<u8>> {
                let img = image::open(&r.image_path)
                    .map_err(|source| Error::Image {
                        path: r.image_path.clone(),
                        source,
                    })?
                    .to_rgb8();
                let (frame, _) = preprocess_frame::<f32>(&img, crop, &k)?;
                Ok(quantize_frame(&frame))
            };
            let intrinsics = adjust_intrinsics(
                &k,
                crop,
                (
                    INPUT_COLS as f64 / crop.width as f64,
                    INPUT_ROWS as f64 / crop.height as f64,
                ),
            )?;
            let frames = parallel_map(&d.records, workers.max(1), process)
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            loaded.push(LoadedDrive {
                id: d.id.clone(),
                intrinsics,
                frames,
                labels: d.labels(),
                timestamps: d.records.iter().map(|r| r.timestamp).collect(),
            });
        }
        Ok(Self::new(loaded))
    }
}

/// Per-drive orientation data matched to one model configuration.
#[derive(Debug, Clone)]
pub struct ModelInputs<T> {
    pub in_channels: usize,
    pub channels: Vec<Option<(Vec<T>, Vec<T>)>>,
    pub fusion: Vec<Option<FusionMaps<T>>>,
}

/// Order-preserving map over `items` using up to `workers` scoped threads.
pub fn parallel_map<I, O, F>(items: &[I], workers: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<O>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera_geometry::orientation_maps;

    #[test]
    fn angle_normalization() {
        assert_eq!(normalize_angle(0.0).unwrap(), 0.0);
        assert_eq!(normalize_angle(1000.0 * std::f64::consts::PI).unwrap(), std::f64::consts::PI);
        assert_eq!(normalize_angle(-500.0).unwrap(), -0.5);
        assert!(matches!(normalize_angle(4000.0), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        assert!(parse_manifest("", Path::new(".")).unwrap().is_empty());
        assert!(parse_manifest("# only a comment\n\n", Path::new(".")).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_steering_is_a_validation_error() {
        let text = "drive,a,a.txt\nf0.png,0.0,10\nf1.png,0.1,4000\n";
        let err = parse_manifest(text, Path::new(".")).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("line 3"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interleaved_drives_are_grouped_in_order() {
        let text = "drive,a,a.txt\na0.png,0,1\ndrive,b,b.txt\nb0.png,5,2\ndrive,a,a.txt\na1.png,1,3\n\
                    drive,b,b.txt\nb1.png,6,4\nb2.png,7,5\n";
        let drives = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(drives.len(), 2);
        let names: Vec<Vec<String>> = drives
            .iter()
            .map(|d| {
                d.records
                    .iter()
                    .map(|r| r.image_path.file_name().unwrap().to_string_lossy().into_owned())
                    .collect()
            })
            .collect();
        assert_eq!(names, vec![vec!["a0.png", "a1.png"], vec!["b0.png", "b1.png", "b2.png"]]);
        assert_eq!(drives[0].intrinsics_path, Path::new("/data/a.txt"));
    }

    #[test]
    fn format_errors_carry_line_numbers() {
        let err = parse_manifest("drive,a,a.txt\nimg.png,zero,1\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }));
        let err = parse_manifest("img.png,0,1\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Format { line: 1, .. }));
        let err = parse_manifest("drive,a,a.txt\na.png,1,0\nb.png,1,0\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn manifest_text_round_trip() {
        let text = "drive,a,cam.txt\nimg/0.png,0.1,-12.5\nimg/1.png,0.2,3141.5\n";
        let base = Path::new("/tmp/ds");
        let drives = parse_manifest(text, base).unwrap();
        assert_eq!(format_manifest(&drives, base), text);
    }

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn identity_preprocess() {
        let img = gradient_image(200, 66);
        let k = CameraIntrinsics::centered(150.0, 150.0, 200, 66).unwrap();
        let (out, k2) = preprocess_frame::<f64>(&img, &k.full_frame(), &k).unwrap();
        assert_eq!(k2, k);
        for y in 0..66 {
            for x in 0..200 {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    assert_eq!(out[c * 13200 + y * 200 + x], p[c] as f64);
                }
            }
        }
    }

    #[test]
    fn full_hd_output_shape() {
        let img = gradient_image(1920, 1080);
        let k = CameraIntrinsics::centered(1400.0, 1400.0, 1920, 1080).unwrap();
        let (out, k2) = preprocess_frame::<f32>(&img, &CropRect::new(0, 400, 1920, 500), &k).unwrap();
        assert_eq!(out.len(), 3 * 66 * 200);
        assert_eq!((k2.width, k2.height), (200, 66));
        assert!(preprocess_frame::<f32>(&img, &CropRect::new(0, 0, 0, 10), &k).is_err());
        assert!(preprocess_frame::<f32>(&img, &CropRect::new(0, 1000, 1920, 100), &k).is_err());
    }

    #[test]
    fn preprocessed_intrinsics_compose() {
        // one step (crop+scale) vs crop, then scale
        let k = CameraIntrinsics::new(700.0, 690.0, 642.3, 355.1, 1280, 720).unwrap();
        let crop = CropRect::new(40, 300, 1200, 330);
        let img = gradient_image(1280, 720);
        let (_, k_pre) = preprocess_frame::<f32>(&img, &crop, &k).unwrap();
        let cropped = adjust_intrinsics(&k, &crop, (1.0, 1.0)).unwrap();
        let two_step = adjust_intrinsics(
            &cropped,
            &cropped.full_frame(),
            (200.0 / 1200.0, 66.0 / 330.0),
        )
        .unwrap();
        let a = orientation_maps(&k_pre).unwrap();
        let b = orientation_maps(&two_step).unwrap();
        for (x, y) in a.horizontal.data.iter().zip(&b.horizontal.data) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.vertical.data.iter().zip(&b.vertical.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn orientation_channels_attach_and_detach() {
        let img: Vec<f32> = (0..3 * 13200).map(|i| (i % 256) as f32).collect();
        let k = CameraIntrinsics::centered(120.0, 120.0, 200, 66).unwrap();
        let maps = orientation_maps(&k).unwrap();
        let five = attach_orientation_channels(&img, &maps).unwrap();
        assert_eq!(five.len(), 5 * 13200);
        let (rgb, ha, _va) = detach_orientation_channels(&five).unwrap();
        assert_eq!(rgb, &img[..]);
        for (h, m) in ha.iter().zip(&maps.horizontal.data) {
            assert_eq!(*h, (m / std::f64::consts::FRAC_PI_2) as f32);
        }
        assert!(attach_orientation_channels(&img[..100], &maps).is_err());
    }

    struct Toy(String, usize);

    impl DriveTimeline for Toy {
        fn id(&self) -> &str {
            &self.0
        }
        fn len(&self) -> usize {
            self.1
        }
        fn label(&self, i: usize) -> f64 {
            i as f64
        }
        fn timestamp(&self, i: usize) -> f64 {
            i as f64 * 0.1
        }
    }

    #[test]
    fn window_counts() {
        let one = [Toy("a".into(), 10)];
        assert_eq!(window_sequences(&one, 8, 1).unwrap().len(), 3);
        assert_eq!(window_sequences(&[Toy("a".into(), 5)], 8, 1).unwrap().len(), 0);
        let w = window_sequences(&one, 8, 1).unwrap();
        assert_eq!(w[2].target, 9.0);
        assert_eq!(window_sequences(&one, 3, 4).unwrap().len(), 2);
        assert!(window_sequences(&one, 0, 1).is_err());
    }

    #[test]
    fn windows_never_cross_drives() {
        let drives = [Toy("a".into(), 10), Toy("b".into(), 10)];
        let w = window_sequences(&drives, 8, 1).unwrap();
        // enumerate every (drive, start) with start + 8 <= 10
        let expect: Vec<(usize, usize)> = (0..2).flat_map(|d| (0..=2).map(move |s| (d, s))).collect();
        let got: Vec<(usize, usize)> = w.iter().map(|w| (w.drive, w.start)).collect();
        assert_eq!(got, expect);
        assert!(w.iter().all(|w| w.frame_range().end <= 10));
    }

    #[test]
    fn apportionment() {
        assert_eq!(apportion(10, &[0.8, 0.1, 0.1]).unwrap(), vec![8, 1, 1]);
        assert_eq!(apportion(7, &[1.0]).unwrap(), vec![7]);
        assert_eq!(apportion(3, &[0.8, 0.1, 0.1]).unwrap(), vec![1, 1, 1]);
        assert_eq!(apportion(11, &[0.5, 0.25, 0.25]).unwrap(), vec![5, 3, 3]);
        assert!(matches!(apportion(2, &[0.8, 0.1, 0.1]), Err(Error::Validation(_))));
        assert!(apportion(10, &[0.5, 0.4]).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let drives: Vec<Toy> = (0..10).map(|i| Toy(format!("d{i}"), 20)).collect();
        let a = split_dataset(&drives, &[0.8, 0.1, 0.1], 7).unwrap();
        let b = split_dataset(&drives, &[0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (8, 1, 1));
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(a.fingerprint(&drives), b.fingerprint(&drives));
        let whole = split_dataset(&drives, &[1.0], 7).unwrap();
        assert_eq!(whole.train.len(), 10);
        assert!(whole.val.is_empty() && whole.test.is_empty());
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u32> = (0..37).collect();
        let seq = parallel_map(&items, 1, |x| x * 3);
        let par = parallel_map(&items, 4, |x| x * 3);
        assert_eq!(seq, par);
    }
}
