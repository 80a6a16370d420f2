mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relab_core::faultlab::{FaultSimulator, FaultSite, InclusionMask, Population, Scratch};
use relab_core::guard::{extract_ranges, GuardMethod, GuardSpec};
use relab_core::netgraph::{forward_layer, reference_infer, reference_trace, trace_with, Network, Prediction};
use relab_core::qtensor::{flip_bits, QTensor};
use relab_core::systolic::{run_network, ArrayConfig};

const SIZES: [usize; 4] = [1, 2, 4, 8];

fn all_layers() -> InclusionMask {
    InclusionMask {
        flatten: true,
        ..InclusionMask::default()
    }
}

/// Reference inference with the faulty word written into the stored tensor
/// before the target layer runs.
fn preflipped(net: &Network, input: &QTensor, site: &FaultSite) -> Prediction {
    let bits = net.io()[site.layer].input_params.bits;
    let mut x = if site.layer == 0 {
        input.clone()
    } else {
        reference_trace(net, input).unwrap()[site.layer - 1].clone()
    };
    let mut data = x.data().to_vec();
    data[site.activation_index] = flip_bits(data[site.activation_index], &site.bit_positions, bits).unwrap();
    x = QTensor::new(x.shape().to_vec(), data, *x.params()).unwrap();
    if site.layer == 0 {
        return reference_infer(net, &x).unwrap();
    }
    for layer in &net.layers()[site.layer..] {
        x = forward_layer(layer, &x).unwrap();
    }
    Prediction::from_logits(&x)
}

#[test]
fn run_network_fault_equals_preflipped_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xFA17);
    for _ in 0..50 {
        let rn = common::random_network(&mut rng);
        let net = &rn.net;
        let input = common::random_input(&mut rng, net);
        let k = rng.random_range(1..=rn.bits.min(3));
        let site = Population::new(net, rn.bits, &all_layers()).sample(&mut rng, k).unwrap();
        let expected = preflipped(net, &input, &site);
        for r in SIZES {
            for c in SIZES {
                let cfg = ArrayConfig::new(r, c, 1e8).unwrap();
                let (p, _) = run_network(net, &input, &cfg, Some(&site), None).unwrap();
                assert_eq!(p.quantized_logits, expected.quantized_logits, "{site:?} on {r}x{c}");
                assert_eq!(p.top1, expected.top1);
            }
        }
    }
}

#[test]
fn oracle_network_agrees_with_preflip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let rn = common::random_network(&mut rng);
        let input = common::random_input(&mut rng, &rn.net);
        let site = Population::new(&rn.net, rn.bits, &all_layers()).sample(&mut rng, 1).unwrap();
        let mask = site.validate(&rn.net).unwrap();
        let logits = common::oracle_network(&rn.net, input.data(), Some((site.layer, site.activation_index, mask)), None);
        assert_eq!(preflipped(&rn.net, &input, &site).quantized_logits, logits);
    }
}

#[test]
fn simulator_matches_run_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let cfg = ArrayConfig::new(4, 4, 1e8).unwrap();
    for round in 0..40 {
        let rn = common::random_network(&mut rng);
        let net = &rn.net;
        let data = common::random_dataset(&mut rng, net, 6);
        let bounds = extract_ranges(net, &data).unwrap();
        let method = GuardMethod::ALL[round % 4];
        let guard = (method != GuardMethod::None).then(|| GuardSpec::new(net, method, &bounds).unwrap());
        let sim = FaultSimulator::new(net, &data, guard.as_ref()).unwrap();
        let pop = Population::new(net, rn.bits, &all_layers());
        let mut scratch = Scratch::default();
        for _ in 0..25 {
            let k = rng.random_range(1..=rn.bits);
            let site = pop.sample(&mut rng, k).unwrap();
            let mask = site.validate(net).unwrap();
            for s in 0..data.len() {
                let (_, input) = data.sample(s).unwrap();
                let (expected, _) = run_network(net, &input, &cfg, Some(&site), guard.as_ref()).unwrap();
                let got = sim
                    .faulty_prediction(s, &site, mask, &mut scratch)
                    .unwrap_or_else(|| sim.golden_prediction(s).clone());
                assert_eq!(got.quantized_logits, expected.quantized_logits, "{method} {site:?} sample {s}");
                let oracle = common::oracle_network(net, input.data(), Some((site.layer, site.activation_index, mask)), guard.as_ref());
                assert_eq!(got.quantized_logits, oracle);
            }
        }
        for s in 0..data.len() {
            let (_, input) = data.sample(s).unwrap();
            let (golden, _) = run_network(net, &input, &cfg, None, guard.as_ref()).unwrap();
            assert_eq!(sim.golden_prediction(s), &golden);
        }
    }
}

#[test]
fn in_range_faults_are_untouched_by_the_guard() {
    // Bounds come from the evaluation set. When the flipped word and every
    // value computed after it stay inside the bounds, the guard must not
    // change the outcome.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    let mut rounds = 0;
    while checked < 300 {
        rounds += 1;
        assert!(rounds < 2000, "too few in-range faults generated");
        let rn = common::random_network(&mut rng);
        let net = &rn.net;
        let data = common::random_dataset(&mut rng, net, 4);
        let bounds = extract_ranges(net, &data).unwrap();
        let guard = GuardSpec::new(net, GuardMethod::Method3, &bounds).unwrap();
        let plain = FaultSimulator::new(net, &data, None).unwrap();
        let guarded = FaultSimulator::new(net, &data, Some(&guard)).unwrap();
        let mut scratch = Scratch::default();
        for _ in 0..20 {
            let site = Population::new(net, rn.bits, &InclusionMask::default()).sample(&mut rng, 1).unwrap();
            let mask = site.validate(net).unwrap();
            if site.layer == 0 {
                continue;
            }
            for s in 0..data.len() {
                let (_, input) = data.sample(s).unwrap();
                let trace = trace_with(net, &input, |i, out| {
                    if i + 1 == site.layer {
                        out[site.activation_index] = (out[site.activation_index] as u32 ^ mask) as i32;
                    }
                })
                .unwrap();
                let contained = trace
                    .iter()
                    .enumerate()
                    .all(|(i, t)| guard.bounds(i).is_none_or(|b| t.data().iter().all(|&v| b.contains(v))));
                if !contained {
                    continue;
                }
                let a = plain.faulty_prediction(s, &site, mask, &mut scratch);
                let b = guarded.faulty_prediction(s, &site, mask, &mut scratch);
                assert_eq!(a, b, "{site:?}");
                checked += 1;
            }
        }
    }
}
