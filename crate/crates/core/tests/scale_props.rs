use fishnet::detect::{oracle_detect, DetectorNoise};
use fishnet::pipeline::{observe_scene, PipelineConfig};
use fishnet::scale::estimate_scale_with_reference;
use fishnet::synthgen::{sample_scene, scene_seed, GeneratorConfig};

fn fronto(ppc: f64) -> GeneratorConfig {
    GeneratorConfig { px_per_cm: [ppc, ppc], max_roll_deg: 0.0, max_perspective: 0.0, ..GeneratorConfig::default() }
}

#[test]
fn fronto_parallel_scale_is_recovered() {
    let cfg = PipelineConfig::default();
    for ppc in [3.2, 3.45, 3.7] {
        for i in 0..40 {
            let scene = sample_scene(&fronto(ppc), scene_seed(17, i)).unwrap();
            let dets = oracle_detect(&scene, &DetectorNoise::none(), i).unwrap();
            let est = estimate_scale_with_reference(&dets, cfg.marker_reference_cm).unwrap();
            assert!((est.cm_per_pixel * ppc - 1.0).abs() <= 0.03, "ppc {ppc} scene {i}: {}", est.cm_per_pixel);
            assert_eq!(est.n_markers_used, 4);
        }
    }
}

#[test]
fn observed_scale_matches_direct_estimate() {
    let cfg = PipelineConfig::default();
    let scene = sample_scene(&fronto(3.5), scene_seed(3, 0)).unwrap();
    let obs = observe_scene(0, &scene, None, &cfg).unwrap();
    let s = obs.cm_per_pixel.unwrap();
    assert!((s * 3.5 - 1.0).abs() <= 0.03);

    let mut bare = scene.clone();
    bare.markers.clear();
    let obs = observe_scene(0, &bare, None, &cfg).unwrap();
    assert!(obs.no_fiducial && obs.cm_per_pixel.is_none());
}
