mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relab_core::faultlab::{
    repetition_rng, run_campaign, CampaignConfig, FaultPersistence, InclusionMask, Population, SamplingPlan,
};
use relab_core::guard::{extract_ranges, GuardMethod};
use relab_core::netgraph::{load_model, LabeledSet, Network};
use relab_core::report::{aggregate, read_campaign_result, to_json, write_campaign_result};
use relab_core::systolic::{run_network, ArrayConfig};

fn lenet_slice(n: usize, bits: u32) -> (Network, LabeledSet, LabeledSet) {
    let net = load_model(common::fixture_dir().join("manifest.json")).unwrap().requantize(bits).unwrap();
    let read = |f: &str| {
        LabeledSet::read(common::fixture_dir().join(f), net.input_shape(), *net.dataset_params())
            .unwrap()
            .requantized(*net.input_params())
            .unwrap()
    };
    let test = read("test.qds").head(n);
    let val = read("validation.qds");
    (net, test, val)
}

fn plan_for(net: &Network, cfg: &CampaignConfig, n: u64) -> SamplingPlan {
    let pop = Population::new(net, net.activation_bits(), &cfg.inclusion).size();
    SamplingPlan::with_defaults(pop).unwrap().capped(n)
}

#[test]
fn null_campaign_is_exactly_golden() {
    let (net, test, val) = lenet_slice(100, 8);
    let bounds = extract_ranges(&net, &val).unwrap();
    for method in GuardMethod::ALL {
        let cfg = CampaignConfig {
            guard: method,
            ..CampaignConfig::default()
        };
        let pop = Population::new(&net, 8, &cfg.inclusion).size();
        let r = run_campaign(&net, &test, &cfg, &SamplingPlan::disabled(pop), Some(&bounds)).unwrap();
        let m = r.aggregates.unwrap().model;
        assert_eq!(m.accuracy_loss, 0.0);
        assert_eq!(m.criticality, 0.0);
        assert_eq!(m.relative_accuracy, Some(100.0));
        assert_eq!((m.sdc1_rate, m.sdc5_rate, m.sdc10_rate), (0.0, 0.0, 0.0));
        assert_eq!(m.mean_faulty_accuracy, m.golden_accuracy);
    }
}

#[test]
fn repetition_replays_with_run_network() {
    let (net, test, val) = lenet_slice(40, 8);
    let bounds = extract_ranges(&net, &val).unwrap();
    let array = ArrayConfig::new(4, 8, 1e8).unwrap();
    for method in [GuardMethod::None, GuardMethod::Method3] {
        let cfg = CampaignConfig {
            guard: method,
            array,
            seed: 17,
            ..CampaignConfig::default()
        };
        let plan = plan_for(&net, &cfg, 12);
        let r = run_campaign(&net, &test, &cfg, &plan, Some(&bounds)).unwrap();
        let guard = (method != GuardMethod::None)
            .then(|| relab_core::guard::GuardSpec::new(&net, method, &bounds).unwrap());
        let pop = Population::new(&net, 8, &cfg.inclusion);
        for rep in &r.repetitions {
            let site = rep.fault_site.clone().unwrap();
            assert_eq!(site, pop.sample(&mut repetition_rng(17, rep.index), 1).unwrap());
            let mut correct = 0;
            let mut sdc1 = 0;
            for s in 0..test.len() {
                let (label, x) = test.sample(s).unwrap();
                let (golden, _) = run_network(&net, &x, &array, None, guard.as_ref()).unwrap();
                let (faulty, _) = run_network(&net, &x, &array, Some(&site), guard.as_ref()).unwrap();
                correct += u64::from(faulty.top1 == usize::from(label));
                sdc1 += u64::from(faulty.top1 != golden.top1);
            }
            assert_eq!(rep.correct, correct);
            assert_eq!(rep.sdc1_count, sdc1);
            assert_eq!(rep.faulty_accuracy, 100.0 * correct as f64 / test.len() as f64);
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (net, test, val) = lenet_slice(60, 6);
    let bounds = extract_ranges(&net, &val).unwrap();
    let run = |threads| {
        let cfg = CampaignConfig {
            guard: GuardMethod::Method2,
            seed: 0xDEADBEEF,
            k_bits: 2,
            threads,
            record_flags: true,
            ..CampaignConfig::default()
        };
        let plan = plan_for(&net, &cfg, 64);
        to_json(&run_campaign(&net, &test, &cfg, &plan, Some(&bounds)).unwrap()).unwrap()
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(8));
}

#[test]
fn aggregate_is_permutation_invariant_and_round_trips() {
    let (net, test, _) = lenet_slice(50, 4);
    let cfg = CampaignConfig {
        seed: 3,
        ..CampaignConfig::default()
    };
    let plan = plan_for(&net, &cfg, 80);
    let r = run_campaign(&net, &test, &cfg, &plan, None).unwrap();
    let agg = r.aggregates.clone().unwrap();
    assert_eq!(agg.model.repetitions, 80);
    let total: u64 = agg.layers.iter().map(|l| l.metrics.repetitions).sum();
    assert_eq!(total, 80);
    let m = &agg.model;
    assert!((m.accuracy_loss + m.mean_faulty_accuracy - m.golden_accuracy).abs() < 1e-9);
    for v in [m.golden_accuracy, m.mean_faulty_accuracy, m.criticality, m.sdc1_rate, m.sdc5_rate, m.sdc10_rate] {
        assert!((0.0..=100.0).contains(&v));
    }
    assert!(m.sdc5_rate <= m.sdc1_rate);

    let mut shuffled = r.clone();
    shuffled.repetitions.reverse();
    shuffled.repetitions.rotate_left(17);
    assert_eq!(aggregate(&shuffled).unwrap(), agg);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    write_campaign_result(&r, &path).unwrap();
    let back = read_campaign_result(&path).unwrap();
    assert_eq!(back.repetitions, r.repetitions);
    assert_eq!(to_json(&back).unwrap(), std::fs::read_to_string(&path).unwrap());
    assert_eq!(aggregate(&back).unwrap(), agg);
}

#[test]
fn per_input_faults_and_config_errors() {
    let (net, test, _) = lenet_slice(20, 8);
    let cfg = CampaignConfig {
        persistence: FaultPersistence::PerInput,
        seed: 1,
        ..CampaignConfig::default()
    };
    let plan = plan_for(&net, &cfg, 5);
    let r = run_campaign(&net, &test, &cfg, &plan, None).unwrap();
    assert_eq!(r.repetitions.len(), 5);
    assert!(r.repetitions.iter().all(|x| x.fault_site.is_none() && x.inputs_evaluated == 20));
    assert!(r.aggregates.unwrap().layers.is_empty());

    let guarded = CampaignConfig {
        guard: GuardMethod::Method3,
        ..CampaignConfig::default()
    };
    assert!(run_campaign(&net, &test, &guarded, &plan, None).is_err());
    let too_many = CampaignConfig {
        k_bits: 9,
        ..CampaignConfig::default()
    };
    assert!(run_campaign(&net, &test, &too_many, &plan, None).is_err());
    let wrong = SamplingPlan::with_defaults(1234).unwrap();
    assert!(run_campaign(&net, &test, &CampaignConfig::default(), &wrong, None).is_err());
    let with_flatten = CampaignConfig {
        inclusion: InclusionMask {
            flatten: true,
            ..InclusionMask::default()
        },
        ..CampaignConfig::default()
    };
    assert!(run_campaign(&net, &test, &with_flatten, &plan, None).is_err());
    assert!(run_campaign(&net, &test.head(0), &CampaignConfig::default(), &plan, None).is_err());
}

#[test]
fn random_networks_campaign_against_replay() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let rn = common::random_network(&mut rng);
        let data = common::random_dataset(&mut rng, &rn.net, 5);
        let cfg = CampaignConfig {
            seed: 5,
            k_bits: 1,
            ..CampaignConfig::default()
        };
        let plan = plan_for(&rn.net, &cfg, 10);
        let r = run_campaign(&rn.net, &data, &cfg, &plan, None).unwrap();
        for rep in &r.repetitions {
            let site = rep.fault_site.as_ref().unwrap();
            let mut correct = 0;
            for s in 0..data.len() {
                let (label, x) = data.sample(s).unwrap();
                let (p, _) = run_network(&rn.net, &x, &cfg.array, Some(site), None).unwrap();
                correct += u64::from(p.top1 == usize::from(label));
            }
            assert_eq!(rep.correct, correct);
        }
    }
}
