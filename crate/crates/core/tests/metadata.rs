use std::f64::consts::{FRAC_PI_2, PI};

use handreg_core::geometry::*;
use handreg_core::metadata::*;
use proptest::prelude::*;

fn cam() -> FisheyeCamera {
    FisheyeCamera::new(200.0, 201.0, 319.5, 320.5, [-0.03, 0.005, -0.001, 0.0], 640, 640, FRAC_PI_2, RigidTransform::identity()).unwrap()
}

fn boxes() -> impl Strategy<Value = BoundingBox> {
    (0.0..260.0, -PI..PI, 6.0..40.0, 6.0..40.0).prop_map(|(r, phi, w, h)| {
        let (x, y) = (319.5 + r * phi.cos(), 320.5 + r * phi.sin());
        BoundingBox::new(x - w, y - h, x + w, y + h).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn layout_matches_its_sources(b in boxes(), size in prop::sample::select(vec![32usize, 64, 128])) {
        let c = cam();
        let m = compute_metadata(&c, &b, size).unwrap().0;
        let centre = b.center();
        let d = ((centre.x - c.cx()).powi(2) + (centre.y - c.cy()).powi(2)).sqrt();
        prop_assert!((m[IDX_D_CENTER] - d).abs() < 1e-12);
        prop_assert_eq!(&m[IDX_CORNERS..IDX_SCALE], &b.corners()[..]);
        prop_assert!((m[IDX_SCALE] - b.width().max(b.height()) * 1.25 / size as f64).abs() < 1e-12);
        let r = Mat3::from_row_slice(&m[IDX_ROTATION..IDX_INTRINSICS]);
        prop_assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-12);
        prop_assert!((r * Vec3::z() - bbox_center_ray(&c, &b).unwrap()).norm() < 1e-12);
        let k = crop_intrinsics(&c, &b.crop_window(), size).unwrap();
        prop_assert_eq!(&m[IDX_INTRINSICS..IDX_DISTORTION], &k.flatten()[..]);
        prop_assert_eq!(&m[IDX_DISTORTION..], &c.distortion()[..]);
    }

    #[test]
    fn normalized_values_stay_in_range(bs in prop::collection::vec(boxes(), 2..20), probe in boxes()) {
        let c = cam();
        let metas: Vec<MetadataVector> = bs.iter().map(|b| compute_metadata(&c, b, 32).unwrap()).collect();
        let stats = NormalizationStats::fit(&metas).unwrap();
        for m in metas.iter().chain(std::iter::once(&compute_metadata(&c, &probe, 32).unwrap())) {
            let n = stats.normalize(m);
            prop_assert!(n.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in stats.constant_dims() {
            prop_assert!(metas.iter().all(|m| stats.normalize(m)[i] == 0.0));
        }
        // the per-camera distortion never varies within one camera
        for i in IDX_DISTORTION..META_DIM {
            prop_assert!(stats.is_constant(i));
        }
    }
}

#[test]
fn normalization_endpoints() {
    let c = cam();
    let a = compute_metadata(&c, &BoundingBox::new(100.0, 100.0, 150.0, 140.0).unwrap(), 32).unwrap();
    let b = compute_metadata(&c, &BoundingBox::new(300.0, 250.0, 380.0, 300.0).unwrap(), 32).unwrap();
    let stats = NormalizationStats::fit([&a, &b]).unwrap();
    let (na, nb) = (stats.normalize(&a), stats.normalize(&b));
    for i in 0..META_DIM {
        if !stats.is_constant(i) {
            assert!((na[i].abs() - 1.0).abs() < 1e-12 && (nb[i].abs() - 1.0).abs() < 1e-12);
            assert!((na[i] + nb[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn stats_text_round_trip_and_errors() {
    let c = cam();
    let a = compute_metadata(&c, &BoundingBox::new(100.0, 100.0, 150.0, 140.0).unwrap(), 32).unwrap();
    let b = compute_metadata(&c, &BoundingBox::new(200.0, 120.0, 260.0, 150.0).unwrap(), 32).unwrap();
    let stats = NormalizationStats::fit([&a, &b]).unwrap();
    assert_eq!(NormalizationStats::from_text(&stats.to_text()).unwrap(), stats);
    assert!(matches!(NormalizationStats::fit(std::iter::empty()), Err(MetadataError::EmptyDataset)));
    assert!(NormalizationStats::from_text("layout_version = 2\n").is_err());
}

#[test]
fn degenerate_box_is_rejected() {
    let b = BoundingBox {
        x_min: 10.0,
        y_min: 10.0,
        x_max: 10.0,
        y_max: 30.0,
    };
    assert!(compute_metadata(&cam(), &b, 32).is_err());
}
