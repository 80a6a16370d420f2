//! Campaign runner: one golden evaluation, then `n` independent repetitions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::propagate::{FaultSimulator, Scratch, SiteOutcome};
use super::{FaultSite, InclusionMask, Population, SamplingPlan};
use crate::error::{Error, Result};
use crate::guard::{GuardMethod, GuardSpec, LayerBounds};
use crate::netgraph::{LabeledSet, Network};
use crate::report::{aggregate, Aggregates, OutcomeFlags};
use crate::systolic::{network_cycles, ArrayConfig, CycleReport};

/// How long one sampled fault lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultPersistence {
    /// One fault site for the whole dataset slice of a repetition.
    #[default]
    PerRepetition,
    /// A fresh fault site for every input.
    PerInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub guard: GuardMethod,
    pub array: ArrayConfig,
    pub seed: u64,
    /// Bits flipped per fault.
    pub k_bits: u32,
    /// Worker threads; `0` uses the rayon default. Not part of the result.
    #[serde(skip)]
    pub threads: usize,
    #[serde(default)]
    pub persistence: FaultPersistence,
    #[serde(default)]
    pub inclusion: InclusionMask,
    /// Keep per-input outcome flags in every repetition record.
    #[serde(default)]
    pub record_flags: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            guard: GuardMethod::None,
            array: ArrayConfig::default(),
            seed: 0,
            k_bits: 1,
            threads: 0,
            persistence: FaultPersistence::PerRepetition,
            inclusion: InclusionMask::default(),
            record_flags: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub index: u64,
    /// `None` for a fault-free repetition or per-input persistence.
    pub fault_site: Option<FaultSite>,
    pub faulty_accuracy: f64,
    pub correct: u64,
    pub sdc1_count: u64,
    pub sdc5_count: u64,
    pub sdc10_count: u64,
    pub inputs_evaluated: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<Vec<OutcomeFlags>>,
}

impl RepetitionRecord {
    fn from_outcome(index: u64, fault_site: Option<FaultSite>, o: SiteOutcome) -> Self {
        Self {
            index,
            fault_site,
            faulty_accuracy: percent(o.correct, o.inputs),
            correct: o.correct,
            sdc1_count: o.sdc1,
            sdc5_count: o.sdc5,
            sdc10_count: o.sdc10,
            inputs_evaluated: o.inputs,
            error: None,
            flags: o.flags,
        }
    }

    fn failed(index: u64, fault_site: Option<FaultSite>, err: Error) -> Self {
        Self {
            index,
            fault_site,
            faulty_accuracy: 0.0,
            correct: 0,
            sdc1_count: 0,
            sdc5_count: 0,
            sdc10_count: 0,
            inputs_evaluated: 0,
            error: Some(err.to_string()),
            flags: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub input_words: usize,
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    /// Provenance block filled in by the command-line front end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
    pub network: String,
    pub config: CampaignConfig,
    pub plan: SamplingPlan,
    pub bits: u32,
    pub class_count: usize,
    /// `k` used for SDC-5; below 5 when the network has fewer classes.
    pub top_k: usize,
    pub inputs: u64,
    pub golden_correct: u64,
    pub golden_accuracy: f64,
    /// One fault-free inference on the array model.
    pub cycles: CycleReport,
    pub giops_estimate: f64,
    pub layers: Vec<LayerInfo>,
    pub repetitions: Vec<RepetitionRecord>,
    pub infrastructure_errors: u64,
    pub aggregates: Option<Aggregates>,
}

pub(crate) fn percent(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Per-repetition random stream derived from `(seed, index)`.
pub fn repetition_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Run a fault campaign over `data`.
///
/// `plan.n == 0` disables injection: a single fault-free repetition is run so
/// the result carries well-defined (zero-loss) aggregates.
pub fn run_campaign(
    net: &Network,
    data: &LabeledSet,
    cfg: &CampaignConfig,
    plan: &SamplingPlan,
    bounds: Option<&[LayerBounds]>,
) -> Result<CampaignResult> {
    cfg.array.validate()?;
    if data.is_empty() {
        return Err(Error::Config("campaign dataset slice is empty".into()));
    }
    let bits = net.activation_bits();
    if cfg.k_bits == 0 || cfg.k_bits > bits {
        return Err(Error::Config(format!(
            "cannot flip {} bits of a {bits}-bit activation",
            cfg.k_bits
        )));
    }
    let guard = match (cfg.guard, bounds) {
        (GuardMethod::None, _) => None,
        (method, Some(b)) => Some(GuardSpec::new(net, method, b)?),
        (method, None) => {
            return Err(Error::Config(format!("guard {method} needs range bounds")));
        }
    };
    let population = Population::new(net, bits, &cfg.inclusion);
    if plan.n > 0 && plan.population != population.size() {
        return Err(Error::Config(format!(
            "plan sized for a population of {}, network has {}",
            plan.population,
            population.size()
        )));
    }
    let cycles = network_cycles(net, &cfg.array)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let (sim_inputs, golden_correct, top_k, repetitions) = pool.install(|| -> Result<_> {
        let sim = FaultSimulator::new(net, data, guard.as_ref())?;
        let repetitions: Vec<RepetitionRecord> = if plan.n == 0 {
            let mut scratch = Scratch::default();
            let mut o = SiteOutcome::default();
            for s in 0..sim.len() {
                sim.record_sample(s, None, cfg.record_flags, &mut scratch, &mut o);
            }
            vec![RepetitionRecord::from_outcome(0, None, o)]
        } else {
            (0..plan.n)
                .into_par_iter()
                .map_init(Scratch::default, |scratch, i| {
                    run_repetition(net, &sim, &population, cfg, i, scratch)
                })
                .collect()
        };
        Ok((sim.len() as u64, sim.golden_correct(), sim.top_k(), repetitions))
    })?;

    let layers = net
        .layers()
        .iter()
        .zip(net.io())
        .enumerate()
        .map(|(i, (l, io))| LayerInfo {
            index: i,
            name: l.name.clone(),
            kind: l.kind.tag().to_string(),
            input_words: io.input_len(),
            eligible: cfg.inclusion.includes(&l.kind),
        })
        .collect();
    let mut result = CampaignResult {
        manifest: None,
        network: net.name.clone(),
        config: cfg.clone(),
        plan: *plan,
        bits,
        class_count: net.class_count(),
        top_k,
        inputs: sim_inputs,
        golden_correct,
        golden_accuracy: percent(golden_correct, sim_inputs),
        cycles,
        giops_estimate: cycles.giops_estimate(),
        layers,
        infrastructure_errors: repetitions.iter().filter(|r| !r.is_ok()).count() as u64,
        repetitions,
        aggregates: None,
    };
    result.aggregates = aggregate(&result).ok();
    Ok(result)
}

fn run_repetition(
    net: &Network,
    sim: &FaultSimulator<'_>,
    population: &Population,
    cfg: &CampaignConfig,
    index: u64,
    scratch: &mut Scratch,
) -> RepetitionRecord {
    let mut rng = repetition_rng(cfg.seed, index);
    match cfg.persistence {
        FaultPersistence::PerRepetition => {
            let site = match population.sample(&mut rng, cfg.k_bits) {
                Ok(s) => s,
                Err(e) => return RepetitionRecord::failed(index, None, e),
            };
            match sim.evaluate_site(&site, cfg.record_flags, scratch) {
                Ok(o) => RepetitionRecord::from_outcome(index, Some(site), o),
                Err(e) => RepetitionRecord::failed(index, Some(site), e),
            }
        }
        FaultPersistence::PerInput => {
            let mut o = SiteOutcome::default();
            for s in 0..sim.len() {
                let site = match population.sample(&mut rng, cfg.k_bits) {
                    Ok(s) => s,
                    Err(e) => return RepetitionRecord::failed(index, None, e),
                };
                let mask = match site.validate(net) {
                    Ok(m) => m,
                    Err(e) => return RepetitionRecord::failed(index, Some(site), e),
                };
                sim.record_sample(s, Some((&site, mask)), cfg.record_flags, scratch, &mut o);
            }
            RepetitionRecord::from_outcome(index, None, o)
        }
    }
}
