mod common;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relab_core::guard::{
    apply_guard, bounds_to_json, extract_ranges, guard_cost, read_bounds, validate_ranges, GuardMethod, GuardSpec,
    LayerBounds, REFERENCE_ROWS,
};
use relab_core::netgraph::{load_model, reference_trace, trace_with, LabeledSet, Layer, Network};
use relab_core::qtensor::{QTensor, QuantParams};

#[test]
fn ranges_match_histogram_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..30 {
        let rn = common::random_network(&mut rng);
        let data = common::random_dataset(&mut rng, &rn.net, 8);
        let bounds = extract_ranges(&rn.net, &data).unwrap();
        let mut hist: Vec<BTreeMap<i32, u64>> = vec![BTreeMap::new(); rn.net.layers().len()];
        for s in 0..data.len() {
            let (_, x) = data.sample(s).unwrap();
            for (i, out) in reference_trace(&rn.net, &x).unwrap().iter().enumerate() {
                for &v in out.data() {
                    *hist[i].entry(v).or_default() += 1;
                }
            }
        }
        assert_eq!(bounds.len(), hist.len());
        for (b, h) in bounds.iter().zip(&hist) {
            assert_eq!(b.lower, *h.keys().next().unwrap());
            assert_eq!(b.upper, *h.keys().next_back().unwrap());
        }
        let coverage = validate_ranges(&bounds, &rn.net, &data).unwrap();
        assert!(coverage.layers.iter().all(|l| l.below == 0 && l.above == 0));
    }
}

#[test]
fn guarded_golden_is_identical_on_extraction_set() {
    let net = load_model(common::fixture_dir().join("manifest.json")).unwrap();
    for bits in [8, 4] {
        let net = net.requantize(bits).unwrap();
        let val = LabeledSet::read(common::fixture_dir().join("validation.qds"), net.input_shape(), *net.dataset_params())
            .unwrap()
            .requantized(*net.input_params())
            .unwrap();
        let bounds = extract_ranges(&net, &val).unwrap();
        for method in [GuardMethod::Method1, GuardMethod::Method2, GuardMethod::Method3] {
            let guard = GuardSpec::new(&net, method, &bounds).unwrap();
            for s in (0..val.len()).step_by(7) {
                let (_, x) = val.sample(s).unwrap();
                let plain = reference_trace(&net, &x).unwrap();
                let guarded = trace_with(&net, &x, |i, out| guard.apply_layer(i, out)).unwrap();
                assert_eq!(plain, guarded);
            }
        }
    }
}

#[test]
fn bounds_round_trip_through_json() {
    let bounds = vec![
        LayerBounds { layer: 0, lower: 0, upper: 200 },
        LayerBounds { layer: 2, lower: -5, upper: 31 },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bounds.json");
    std::fs::write(&path, bounds_to_json(&bounds)).unwrap();
    assert_eq!(read_bounds(&path).unwrap(), bounds);
}

#[test]
fn guard_needs_bounds_for_every_mac_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rn = common::random_network(&mut rng);
    let data = common::random_dataset(&mut rng, &rn.net, 2);
    let mut bounds = extract_ranges(&rn.net, &data).unwrap();
    let last = rn.net.layers().len() - 1;
    bounds.retain(|b| b.layer != last);
    assert!(GuardSpec::new(&rn.net, GuardMethod::Method3, &bounds).is_err());
    assert!(GuardSpec::new(&rn.net, GuardMethod::None, &[]).is_ok());
}

#[test]
fn exhaustive_containment_at_8_bits() {
    for lower in (0..=255).step_by(15) {
        for upper in (lower..=255).step_by(20) {
            let b = LayerBounds { layer: 0, lower, upper };
            for method in [GuardMethod::Method1, GuardMethod::Method2, GuardMethod::Method3] {
                for v in 0..=255 {
                    let g = apply_guard(v, &b, method);
                    assert!(b.contains(g));
                    assert_eq!(apply_guard(g, &b, method), g);
                    if b.contains(v) {
                        assert_eq!(g, v);
                    }
                }
            }
        }
    }
}

/// `n` identical dense layers of width 16 followed by the classifier.
fn dense_stack(n: usize) -> Network {
    let a = QuantParams::unsigned(1.0 / 255.0, 8).unwrap();
    let w = QuantParams::signed(0.01, 8).unwrap();
    let mut layers: Vec<Layer> = (0..n)
        .map(|i| Layer::dense(format!("d{i}"), 16, 16, QTensor::zeros(vec![16, 16], w).unwrap(), vec![0; 16], a).unwrap())
        .collect();
    let logits = QuantParams::signed(0.1, 8).unwrap();
    layers.push(Layer::dense("out", 16, 16, QTensor::zeros(vec![16, 16], w).unwrap(), vec![0; 16], logits).unwrap());
    Network::new("stack", vec![16], a, 16, layers).unwrap()
}

#[test]
fn cost_scales_linearly_with_guarded_layers() {
    for method in [GuardMethod::Method1, GuardMethod::Method2, GuardMethod::Method3] {
        let one = guard_cost(&dense_stack(0), method).unwrap();
        assert_eq!(one.guarded_layers, 1);
        for n in 1..6 {
            let c = guard_cost(&dense_stack(n), method).unwrap();
            let k = (n + 1) as u64;
            assert_eq!(c.guarded_layers as u64, k);
            assert_eq!(c.stored_words, 2 * k);
            assert_eq!(c.subtractors, 2 * k);
            assert_eq!(c.mux_selects, k);
            assert_eq!(c.stored_bits, k * one.stored_bits);
            assert_eq!(c.subtractor_bits, k * one.subtractor_bits);
            assert_eq!(c.cost_units, k * one.cost_units);
            assert_eq!(c.mac_lane_units, k * one.mac_lane_units);
        }
        assert_eq!(one.reference_rows, REFERENCE_ROWS.map(String::from).to_vec());
    }
    assert!(guard_cost(&dense_stack(1), GuardMethod::None).is_err());
    assert!(REFERENCE_ROWS[0].contains("less than 10%"));
    assert!(REFERENCE_ROWS[1].contains(">200% (TMR)"));
}
