use viewcond::metrics::psnr;
use viewcond::protocol::{reference_set, warped_image_baseline, Split, Suite, SuiteConfig};

fn small_suite() -> Suite {
    Suite::generate(SuiteConfig {
        num_scenes: 6,
        split: Split::HeldOutScenes { test_scenes: 2 },
        ..SuiteConfig::benchmark()
    })
    .unwrap()
}

#[test]
fn baseline_hole_region_is_never_better_than_the_whole_image() {
    let suite = small_suite();
    for s in 0..suite.bundles.len() {
        for t in 0..suite.config.arc.count {
            for c in [1, 2] {
                let refs = reference_set(t, suite.config.arc.count, c, &|_| true);
                let plane = suite.warped_image(s, &refs, t).unwrap();
                if !plane.mask.iter().any(|&m| m) {
                    continue;
                }
                let target = &suite.bundles[s].views[t].rgb;
                let all = psnr(&plane.payload, target, None).unwrap();
                let holes = psnr(&plane.payload, target, Some(&plane.mask)).unwrap();
                assert!(holes <= all, "scene {s} target {t}: hole {holes} > overall {all}");
            }
        }
    }
}

#[test]
fn second_reference_view_never_increases_holes() {
    let suite = small_suite();
    let rows = warped_image_baseline(&suite).unwrap();
    for r1 in rows.iter().filter(|r| r.view_count == 1) {
        let scene_rows = |c| rows.iter().filter(move |r| r.view_count == c && r.scene_seed == r1.scene_seed);
        let h1: f64 = scene_rows(1).map(|r| r.hole_fraction).sum();
        let h2: f64 = scene_rows(2).map(|r| r.hole_fraction).sum();
        assert!(h2 <= h1);
    }
}

#[test]
fn suite_generation_is_deterministic() {
    let (a, b) = (small_suite(), small_suite());
    for (x, y) in a.bundles.iter().zip(&b.bundles) {
        assert_eq!(x.views, y.views);
    }
}
