mod support {
    pub mod oracle;
}

use panoscrub::geometry::{pixel_to_world, EquirectGrid};
use panoscrub::moving::ObjectClass;
use panoscrub::raster::{bilinear_taps, Mask};
use panoscrub::reprojection::{reproject_guarded, reproject_with_removal};
use panoscrub::synth::{generate, random_street, BoxSpec, DepthMode, RenderedSequence, SceneSpec, Street};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::oracle;

fn boxed(center: [f64; 3], size: [f64; 3], velocity: [f64; 3]) -> BoxSpec {
    BoxSpec {
        center,
        size,
        albedo: [0.7, 0.4, 0.3],
        velocity,
        class: ObjectClass::Other,
    }
}

#[test]
fn small_static_scene_matches_the_per_pixel_oracle() {
    let mut spec = SceneSpec::new(EquirectGrid::new(16, 8).unwrap());
    spec.spacing = 1.0;
    spec.street = Some(Street {
        half_width: 6.0,
        half_length: 20.0,
        height: 5.0,
    });
    spec.boxes.push(boxed([2.5, 1.0, 0.8], [1.0, 1.5, 1.6], [0.0; 3]));
    let r = generate(&spec).unwrap();
    let (src, dst) = (r.sequence.view(1).unwrap(), r.sequence.view(0).unwrap());
    let got = reproject_guarded(src, dst, 0.2).unwrap();
    let want = oracle::guarded(src, dst, 0.2);
    assert_eq!(got.valid.data(), &want.valid[..]);
    for (a, b) in got.rgb.pixels().iter().zip(&want.rgb) {
        assert_eq!(a.map(f32::to_bits), b.map(f32::to_bits));
    }
    assert!(got.valid.count() > 0 && got.valid.count() < 128);
    // Accepted target points lie on the analytic scene.
    for v in 0..8 {
        for u in 0..16 {
            if *got.valid.get(u, v) {
                let p = pixel_to_world(dst, u, v).unwrap();
                assert!(spec.surface_distance(&p, 0, |_| true) < 1e-4);
            }
        }
    }
}

#[test]
fn points_hidden_from_the_source_fall_back() {
    let mut spec = SceneSpec::new(EquirectGrid::new(128, 64).unwrap());
    spec.street = Some(Street {
        half_width: 8.0,
        half_length: 40.0,
        height: 6.0,
    });
    // Beside the source camera, so it hides a wide stretch of facade from it.
    spec.boxes.push(boxed([2.0, 5.0, 1.0], [1.5, 1.5, 2.0], [0.0; 3]));
    let r = generate(&spec).unwrap();
    let (src, dst) = (r.sequence.view(3).unwrap(), r.sequence.view(2).unwrap());
    let out = reproject_guarded(src, dst, 0.2).unwrap();
    let origin = spec.camera_position(3);
    let src_ids = r.sequence.instance_raster(3).unwrap();
    let mut hidden = 0;
    for v in 0..64 {
        for u in 0..128 {
            let Some(p) = pixel_to_world(dst, u, v) else { continue };
            let to = p - origin;
            let range = to.norm();
            let hit = spec.cast(&origin, &(to / range), 3, |_| true).unwrap();
            let (x, y) = oracle::to_pixel(src, [p.x, p.y, p.z]);
            let (su, sv) = src.grid.nearest_pixel(x, y);
            if hit.range < range - 1.0 && *src_ids.get(su, sv) == 1 {
                hidden += 1;
                assert!(!*out.valid.get(u, v), "pixel ({u}, {v}) is occluded in the source");
                assert_eq!(out.rgb.get(u, v), dst.rgb.get(u, v));
            }
        }
    }
    assert!(hidden > 20, "only {hidden} occluded pixels");
}

#[test]
fn source_moving_pixels_behind_the_holes_are_rejected() {
    let mut spec = SceneSpec::new(EquirectGrid::new(128, 64).unwrap());
    spec.street = Some(Street {
        half_width: 8.0,
        half_length: 40.0,
        height: 6.0,
    });
    spec.boxes.push(boxed([3.0, -1.0, 0.8], [1.2, 2.0, 1.6], [0.0, 1.0, 0.0]));
    spec.depth_mode = DepthMode::StaticMap;
    let r = generate(&spec).unwrap();
    let seq = &r.sequence;
    let holes = Mask::filled(128, 64, true);
    let (src, dst) = (seq.view(1).unwrap(), seq.view(2).unwrap());
    let moving = seq.mask_of(1, &[1]).unwrap();
    let out = reproject_with_removal(src, dst, 0.2, &moving, &holes).unwrap();
    let guarded = reproject_guarded(src, dst, 0.2).unwrap();
    let mut backed = 0;
    for v in 0..64 {
        for u in 0..128 {
            let Some(p) = pixel_to_world(dst, u, v) else {
                assert!(!*out.valid.get(u, v));
                continue;
            };
            let (x, y) = oracle::to_pixel(src, [p.x, p.y, p.z]);
            let (su, sv) = src.grid.nearest_pixel(x, y);
            let box_behind = *seq.instance_raster(1).unwrap().get(su, sv) == 1;
            backed += box_behind as usize;
            let expect = *guarded.valid.get(u, v) && !box_behind;
            assert_eq!(*out.valid.get(u, v), expect, "pixel ({u}, {v})");
            if !expect {
                assert_eq!(out.rgb.get(u, v), [0.0; 3]);
            }
        }
    }
    assert!(backed > 0);
}

fn street(seed: u64) -> RenderedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = random_street(&mut rng, EquirectGrid::new(32, 16).unwrap()).unwrap();
    spec.boxes.retain(|b| !b.is_moving());
    generate(&spec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn valid_count_grows_with_epsilon(seed in 0u64..500, e1 in 0.001f64..2.0, e2 in 0.001f64..2.0, pair in 0usize..4) {
        let r = street(seed);
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        let (s, d) = [(0, 2), (1, 2), (3, 2), (4, 1)][pair];
        let (src, dst) = (r.sequence.view(s).unwrap(), r.sequence.view(d).unwrap());
        let a = reproject_guarded(src, dst, lo).unwrap().valid;
        let b = reproject_guarded(src, dst, hi).unwrap().valid;
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!(!x || *y);
        }
    }

    #[test]
    fn accepted_pixels_are_within_epsilon_and_blend_source_colors(seed in 0u64..500, eps in 0.05f64..1.0) {
        let r = street(seed);
        let (src, dst) = (r.sequence.view(0).unwrap(), r.sequence.view(2).unwrap());
        let out = reproject_guarded(src, dst, eps).unwrap();
        for v in 0..16 {
            for u in 0..32 {
                if !*out.valid.get(u, v) {
                    prop_assert_eq!(out.rgb.get(u, v), dst.rgb.get(u, v));
                    continue;
                }
                let p = pixel_to_world(dst, u, v).unwrap();
                let (x, y) = oracle::to_pixel(src, [p.x, p.y, p.z]);
                let (su, sv) = src.grid.nearest_pixel(x, y);
                let q = pixel_to_world(src, su, sv).unwrap();
                prop_assert!((p - q).norm() < eps);
                let taps = bilinear_taps(32, 16, x, y);
                let c = out.rgb.get(u, v);
                for ch in 0..3 {
                    let vals = taps.iter().map(|(i, _)| src.rgb.pixels()[*i][ch]);
                    let lo = vals.clone().fold(f32::INFINITY, f32::min);
                    let hi = vals.fold(f32::NEG_INFINITY, f32::max);
                    prop_assert!(c[ch] >= lo - 1e-6 && c[ch] <= hi + 1e-6);
                }
            }
        }
    }
}

#[test]
fn identity_pose_change_is_exact() {
    let r = street(3);
    let v = r.sequence.view(2).unwrap();
    let out = reproject_guarded(v, v, 0.2).unwrap();
    assert_eq!(out.rgb, v.rgb);
}
