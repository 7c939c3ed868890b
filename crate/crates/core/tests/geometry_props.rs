use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use orientsteer_core::camera_geometry::{
    adjust_intrinsics, orientation_maps, pixel_orientation, resize_maps_to, CameraIntrinsics, CropRect,
};
use orientsteer_core::Intrinsics;
use proptest::prelude::*;

fn camera() -> impl Strategy<Value = Intrinsics> {
    (2usize..120, 2usize..90, 20.0f64..1500.0, 20.0f64..1500.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(
        |(w, h, fx, fy, ax, ay)| {
            CameraIntrinsics::new(fx, fy, ax * (w - 1) as f64, ay * (h - 1) as f64, w, h).unwrap()
        },
    )
}

fn camera_and_crop() -> impl Strategy<Value = (Intrinsics, CropRect)> {
    camera().prop_flat_map(|k| {
        (1..=k.width, 1..=k.height).prop_flat_map(move |(cw, ch)| {
            (0..=k.width - cw, 0..=k.height - ch).prop_map(move |(l, t)| (k, CropRect::new(l, t, cw, ch)))
        })
    })
}

#[test]
fn principal_point_and_unit_offset() {
    let k = CameraIntrinsics::new(400.0, 300.0, 200.0, 100.0, 400, 200).unwrap();
    assert_eq!(pixel_orientation(200.0, 100.0, &k).unwrap(), (0.0, 0.0));
    assert_eq!(pixel_orientation(600.0, 100.0, &k).unwrap(), (FRAC_PI_4, 0.0));
}

#[test]
fn three_pixel_row() {
    let k = CameraIntrinsics::new(1.0, 1.0, 1.0, 0.0, 3, 1).unwrap();
    let m = orientation_maps(&k).unwrap();
    assert_eq!(m.horizontal.row(0), &[-FRAC_PI_4, 0.0, FRAC_PI_4]);
}

#[test]
fn halved_camera_matches_direct_pixel_centres() {
    let k = CameraIntrinsics::new(1.0, 1.0, 1.0, 0.0, 4, 2).unwrap();
    let maps = orientation_maps(&k).unwrap();
    let half = resize_maps_to(&maps, &k, 2, 1).unwrap();
    // new pixel c covers old pixels 2c and 2c+1, centred at 2c + 0.5
    for c in 0..2 {
        let direct = (2.0 * c as f64 + 0.5 - k.cx).atan2(k.fx);
        assert!((half.horizontal.get(0, c) - direct).abs() < 1e-12);
    }
}

#[test]
fn invalid_cameras_are_rejected() {
    assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
    assert!(CameraIntrinsics::new(1.0, f64::NAN, 0.0, 0.0, 4, 4).is_err());
    assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 4).is_err());
}

proptest! {
    #[test]
    fn angles_in_open_half_pi_and_monotone(k in camera()) {
        let m = orientation_maps(&k).unwrap();
        for r in 0..k.height {
            for c in 0..k.width {
                let (t, b) = (m.horizontal.get(r, c), m.vertical.get(r, c));
                prop_assert!(t.abs() < FRAC_PI_2 && b.abs() < FRAC_PI_2);
                if c > 0 { prop_assert!(t > m.horizontal.get(r, c - 1)); }
                if r > 0 { prop_assert!(b > m.vertical.get(r - 1, c)); }
                prop_assert_eq!(t, m.horizontal.get(0, c));
                prop_assert_eq!(b, m.vertical.get(r, 0));
            }
        }
    }

    #[test]
    fn odd_symmetry_about_principal_point(k in camera(), d in 0.0f64..300.0) {
        let (tp, bp) = pixel_orientation(k.cx + d, k.cy + d, &k).unwrap();
        let (tm, bm) = pixel_orientation(k.cx - d, k.cy - d, &k).unwrap();
        prop_assert!((tp + tm).abs() <= 1e-12);
        prop_assert!((bp + bm).abs() <= 1e-12);
    }

    #[test]
    fn crop_matches_submap((k, crop) in camera_and_crop()) {
        let adjusted = adjust_intrinsics(&k, &crop, (1.0, 1.0)).unwrap();
        let a = orientation_maps(&adjusted).unwrap();
        let b = orientation_maps(&k).unwrap().submap(&crop);
        prop_assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
        for (x, y) in a.horizontal.data.iter().zip(&b.horizontal.data).chain(a.vertical.data.iter().zip(&b.vertical.data)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn resize_recomputes_from_scaled_camera(k in camera(), w in 1usize..80, h in 1usize..60) {
        let maps = orientation_maps(&k).unwrap();
        let r = resize_maps_to(&maps, &k, w, h).unwrap();
        prop_assert_eq!((r.rows(), r.cols()), (h, w));
        let sx = w as f64 / k.width as f64;
        for c in 0..w {
            // centre of new pixel c in old pixel coordinates
            let u = (c as f64 + 0.5) / sx - 0.5;
            let direct = (u - k.cx).atan2(k.fx);
            prop_assert!((r.horizontal.get(0, c) - direct).abs() <= 1e-9);
        }
        for row in 0..h {
            for c in 1..w {
                prop_assert!(r.horizontal.get(row, c) > r.horizontal.get(row, c - 1));
            }
        }
    }

    #[test]
    fn identity_resize_is_exact(k in camera()) {
        let maps = orientation_maps(&k).unwrap();
        prop_assert_eq!(resize_maps_to(&maps, &k, k.width, k.height).unwrap(), maps);
    }

    #[test]
    fn normalized_maps_inside_unit_interval(k in camera()) {
        let (ha, va) = orientation_maps(&k).unwrap().normalized::<f32>();
        prop_assert!(ha.iter().chain(&va).all(|v| v.abs() < 1.0));
    }

    #[test]
    fn intrinsics_text_round_trips(k in camera()) {
        prop_assert_eq!(CameraIntrinsics::<f64>::parse_str(&k.to_text()).unwrap(), k);
    }
}
