use std::path::{Path, PathBuf};

use orientsteer_core::camera_geometry::{orientation_maps, CameraIntrinsics, CropRect};
use orientsteer_core::data_pipeline::{
    apportion, attach_orientation_channels, detach_orientation_channels, format_manifest, normalize_angle,
    parse_manifest, preprocess_frame, split_dataset, window_sequences, Drive, DriveRecord,
};
use orientsteer_core::Error;
use proptest::prelude::*;

fn drive(id: &str, frames: usize) -> Drive {
    Drive {
        id: id.into(),
        intrinsics_path: PathBuf::from(format!("/data/{id}/k.txt")),
        records: (0..frames)
            .map(|i| DriveRecord {
                image_path: PathBuf::from(format!("/data/{id}/{i}.png")),
                timestamp: i as f64 * 0.05,
                raw_steering: (i as f64 * 37.0) % 900.0 - 450.0,
                drive_id: id.into(),
            })
            .collect(),
    }
}

#[test]
fn angle_normalization() {
    assert_eq!(normalize_angle(0.0).unwrap(), 0.0);
    assert_eq!(normalize_angle(-500.0).unwrap(), -0.5);
    assert!((normalize_angle(1000.0 * std::f64::consts::PI).unwrap() - std::f64::consts::PI).abs() < 1e-15);
    assert!(matches!(normalize_angle(4000.0), Err(Error::Validation(_))));
}

#[test]
fn empty_manifest_is_an_empty_dataset() {
    assert!(parse_manifest("", Path::new("/")).unwrap().is_empty());
}

#[test]
fn out_of_range_steering_is_rejected() {
    let text = "drive,a,k.txt\nimg.png,0.0,4000\n";
    assert!(parse_manifest(text, Path::new("/")).is_err());
}

#[test]
fn window_counts() {
    assert_eq!(window_sequences(&[drive("a", 10)], 8, 1).unwrap().len(), 3);
    assert!(window_sequences(&[drive("a", 5)], 8, 1).unwrap().is_empty());
    let two = window_sequences(&[drive("a", 10), drive("b", 10)], 8, 1).unwrap();
    assert_eq!(two.len(), 6);
    let mut expected = Vec::new();
    for d in 0..2 {
        for s in 0..3 {
            expected.push((d, s));
        }
    }
    assert_eq!(two.iter().map(|w| (w.drive, w.start)).collect::<Vec<_>>(), expected);
}

#[test]
fn ten_drives_split_eight_one_one() {
    assert_eq!(apportion(10, &[0.8, 0.1, 0.1]).unwrap(), vec![8, 1, 1]);
    let drives: Vec<Drive> = (0..10).map(|i| drive(&format!("d{i}"), 3)).collect();
    let s = split_dataset(&drives, &[1.0], 4).unwrap();
    assert_eq!(s.train.len(), 10);
    assert!(s.val.is_empty() && s.test.is_empty());
}

#[test]
fn full_frame_preprocess_is_identity() {
    let img = image::RgbImage::from_fn(200, 66, |x, y| image::Rgb([(x % 256) as u8, (y * 3) as u8, 7]));
    let k = CameraIntrinsics::new(150.0, 150.0, 99.5, 32.5, 200, 66).unwrap();
    let (out, k2) = preprocess_frame::<f64>(&img, &k.full_frame(), &k).unwrap();
    assert_eq!(k2, k);
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            assert_eq!(out[c * 66 * 200 + i], p.0[c] as f64);
        }
    }
}

#[test]
fn large_frames_resize_to_network_shape() {
    let img = image::RgbImage::new(1920, 1080);
    let k = CameraIntrinsics::centered(1000.0, 1000.0, 1920, 1080).unwrap();
    let crop = CropRect::new(100, 500, 1500, 400);
    let (out, k2) = preprocess_frame::<f32>(&img, &crop, &k).unwrap();
    assert_eq!(out.len(), 3 * 66 * 200);
    assert_eq!((k2.width, k2.height), (200, 66));
}

#[test]
fn orientation_channels_attach_and_detach() {
    let k = CameraIntrinsics::centered(150.0, 150.0, 200, 66).unwrap();
    let maps = orientation_maps(&k).unwrap();
    let img: Vec<f32> = (0..3 * 66 * 200).map(|i| (i % 255) as f32).collect();
    let five = attach_orientation_channels(&img, &maps).unwrap();
    assert_eq!(five.len(), 5 * 66 * 200);
    let (rgb, ha, _va) = detach_orientation_channels(&five).unwrap();
    assert_eq!(rgb, &img[..]);
    let expected = (maps.horizontal.data[17] / std::f64::consts::FRAC_PI_2) as f32;
    assert_eq!(ha[17], expected);
}

proptest! {
    #[test]
    fn manifest_round_trips(lens in prop::collection::vec(0usize..30, 0..5)) {
        let drives: Vec<Drive> = lens.iter().enumerate().map(|(i, &n)| drive(&format!("d{i}"), n)).collect();
        let text = format_manifest(&drives, Path::new("/data"));
        let back = parse_manifest(&text, Path::new("/data")).unwrap();
        prop_assert_eq!(back.len(), drives.len());
        for (a, b) in back.iter().zip(&drives) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(&a.intrinsics_path, &b.intrinsics_path);
            for (x, y) in a.labels().iter().zip(b.labels()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            prop_assert_eq!(&a.records, &b.records);
        }
    }

    #[test]
    fn windows_stay_inside_drives(lens in prop::collection::vec(0usize..40, 1..6), seq in 1usize..10, stride in 1usize..4) {
        let drives: Vec<Drive> = lens.iter().enumerate().map(|(i, &n)| drive(&format!("d{i}"), n)).collect();
        let w = window_sequences(&drives, seq, stride).unwrap();
        let expected: usize = lens.iter().map(|&n| if n >= seq { (n - seq) / stride + 1 } else { 0 }).sum();
        prop_assert_eq!(w.len(), expected);
        for win in &w {
            prop_assert!(win.start + seq <= lens[win.drive]);
            prop_assert_eq!(win.target, drives[win.drive].labels()[win.last_frame()]);
        }
    }

    #[test]
    fn apportion_sums_and_fills(n in 3usize..200, a in 0.05f64..1.0, b in 0.05f64..1.0, c in 0.05f64..1.0) {
        let s = a + b + c;
        let ratios = [a / s, b / s, 1.0 - a / s - b / s];
        let counts = apportion(n, &ratios).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        prop_assert!(counts.iter().all(|&k| k >= 1));
        for (k, r) in counts.iter().zip(&ratios) {
            prop_assert!((*k as f64 - r * n as f64).abs() < 2.0 + 1e-9);
        }
    }

    #[test]
    fn split_is_a_deterministic_partition(n in 3usize..40, seed in any::<u64>()) {
        let drives: Vec<Drive> = (0..n).map(|i| drive(&format!("d{i}"), 2)).collect();
        let s = split_dataset(&drives, &[0.8, 0.1, 0.1], seed).unwrap();
        prop_assert_eq!(&s, &split_dataset(&drives, &[0.8, 0.1, 0.1], seed).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
