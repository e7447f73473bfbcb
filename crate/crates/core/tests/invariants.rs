use proptest::prelude::*;

use rshift::geometry::{big_gamma, disc_window_area, intersect_shifted, set_covariance_gamma, torus_shift_point, ShiftVector};
use rshift::io::{load_dataset, save_pattern, save_raster, Dataset};
use rshift::shifttest::{global_envelope_erl, mc_pvalue_scalar};
use rshift::{Alternative, FieldRaster, PointPattern, Window};

fn window() -> impl Strategy<Value = Window> {
    (-5.0f64..5.0, -5.0f64..5.0, 0.2f64..3.0, 0.2f64..3.0)
        .prop_map(|(x, y, a, b)| Window::new(x, y, x + a, y + b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn torus_shift_stays_inside(w in window(), fx in 0.0f64..1.0, fy in 0.0f64..1.0, dx in -10.0f64..10.0, dy in -10.0f64..10.0) {
        let p = [w.x_min + fx * w.width(), w.y_min + fy * w.height()];
        let q = torus_shift_point(p, ShiftVector::new(dx, dy), &w);
        prop_assert!(q[0] >= w.x_min && q[0] < w.x_max + 1e-12);
        prop_assert!(q[1] >= w.y_min && q[1] < w.y_max + 1e-12);
    }

    #[test]
    fn intersection_is_symmetric_in_the_shift(w in window(), fx in -0.99f64..0.99, fy in -0.99f64..0.99) {
        let v = ShiftVector::new(fx * w.width(), fy * w.height());
        let a = intersect_shifted(&w, v, 0).unwrap();
        let b = intersect_shifted(&w, v.neg(), 0).unwrap();
        prop_assert!((a.area - b.area).abs() < 1e-12);
        prop_assert!((a.window.area() - a.area).abs() < 1e-9);
        prop_assert!(a.area <= w.area() + 1e-12);
    }

    #[test]
    fn set_covariance_is_monotone(w in window(), t in 0.0f64..1.0, dt in 0.001f64..0.5) {
        let t = t * w.diameter();
        prop_assert!(set_covariance_gamma(&w, t + dt) <= set_covariance_gamma(&w, t) + 1e-12);
        prop_assert!(big_gamma(&w, t + dt) >= big_gamma(&w, t) - 1e-12);
        prop_assert!(big_gamma(&w, t) <= w.area() * w.area() + 1e-9);
    }

    #[test]
    fn disc_area_is_bounded(w in window(), fx in 0.0f64..1.0, fy in 0.0f64..1.0, r in 0.0f64..2.0) {
        let p = [w.x_min + fx * w.width(), w.y_min + fy * w.height()];
        let e = disc_window_area(&w, p, r);
        prop_assert!(e >= -1e-12);
        prop_assert!(e <= std::f64::consts::PI * r * r + 1e-12);
        prop_assert!(e <= w.area() + 1e-12);
    }

    #[test]
    fn scalar_pvalues_lie_on_the_rank_grid(values in prop::collection::vec(-3.0f64..3.0, 20..200)) {
        let n = values.len() as f64;
        for alt in [Alternative::Greater, Alternative::Less] {
            let p = mc_pvalue_scalar(&values, alt);
            prop_assert!(p >= 1.0 / n && p <= 1.0);
            prop_assert!(((p * n).round() - p * n).abs() < 1e-9);
        }
        let two = mc_pvalue_scalar(&values, Alternative::TwoSided);
        prop_assert!(two >= mc_pvalue_scalar(&values, Alternative::Greater).min(mc_pvalue_scalar(&values, Alternative::Less)));
    }

    #[test]
    fn envelope_p_value_is_a_probability(seed in 0u64..1000) {
        let curves: Vec<Vec<f64>> = (0..60)
            .map(|i| (0..8).map(|j| (((i * 31 + j * 17) as u64 ^ seed) % 97) as f64).collect())
            .collect();
        let r: Vec<f64> = (1..=8).map(|j| j as f64 * 0.01).collect();
        let (p, env) = global_envelope_erl(&curves, &r, 0.05).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert!(env.lo.iter().zip(&env.hi).all(|(l, h)| l <= h));
    }
}

#[test]
fn pattern_and_raster_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w = Window::new(10.0, 20.0, 510.0, 270.0).unwrap();
    let p = PointPattern::new(w, vec![[10.5, 21.0], [300.25, 100.125], [509.0, 269.0]]).unwrap();
    let path = dir.path().join("trees.csv");
    save_pattern(&path, &p, Some("survey"), None).unwrap();
    match load_dataset(&path).unwrap() {
        Dataset::Pattern(q) => assert_eq!(q, p),
        other => panic!("{other:?}"),
    }

    let values: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
    let r = FieldRaster::new(w, 4, 3, values).unwrap();
    for name in ["field.csv", "field.txt"] {
        let path = dir.path().join(name);
        save_raster(&path, &r, None, Some(3)).unwrap();
        match load_dataset(&path).unwrap() {
            Dataset::Raster(q) => {
                assert_eq!(q.window, r.window);
                assert_eq!((q.nx, q.ny), (4, 3));
                for (a, b) in q.values.iter().zip(&r.values) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn malformed_pattern_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let w = Window::unit();
    let path = dir.path().join("p.csv");
    save_pattern(&path, &PointPattern::new(w, vec![[0.5, 0.5]]).unwrap(), None, None).unwrap();
    std::fs::write(&path, "x,y\n0.1,0.2\n0.3\n").unwrap();
    assert!(matches!(load_dataset(&path), Err(rshift::Error::Parse(_))));
}
