use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use relab_core::faultlab::{
    run_campaign, CampaignConfig, FaultPersistence, FaultSite, InclusionMask, Population,
    SamplingPlan, DEFAULT_T,
};
use relab_core::guard::{
    bounds_to_json, extract_ranges, guard_cost, read_bounds, validate_ranges, GuardMethod,
    GuardSpec, LayerBounds,
};
use relab_core::netgraph::{encoded_for, evaluate, load_model, save_model, LabeledSet, Network};
use relab_core::report::{
    aggregate, read_campaign_result, render_aggregates, render_table, sweep as run_sweep, to_json,
    write_atomic, write_campaign_result, Baseline, DseTable, Format, PlanParams, SweepSpec,
};
use relab_core::systolic::{run_network, ArrayConfig};
use serde::Serialize;
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{io_error, CliError, CliResult};
use crate::manifest::{self, model_manifest_path, sidecar_path, RunManifest, DIR_MANIFEST};
use crate::{
    ArrayArgs, CampaignArgs, CostArgs, FaultArgs, InferArgs, PlanArgs, QuantizeArgs, RangesArgs,
    ReplayArgs, ReportArgs, SweepArgs,
};

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn load(model: &Path, bits: Option<u32>) -> CliResult<Network> {
    let net = load_model(model_manifest_path(model))?;
    match bits {
        Some(b) => {
            check_bits(b)?;
            Ok(net.requantize(b)?)
        }
        None => Ok(net),
    }
}

fn check_bits(bits: u32) -> CliResult<()> {
    if (4..=16).contains(&bits) {
        Ok(())
    } else {
        Err(invalid(format!(
            "bit width must be within 4..=16, got {bits}"
        )))
    }
}

fn read_set(path: &Path, net: &Network) -> CliResult<LabeledSet> {
    Ok(LabeledSet::read(
        path,
        net.input_shape(),
        *net.dataset_params(),
    )?)
}

fn array(a: &ArrayArgs) -> CliResult<ArrayConfig> {
    let cfg = ArrayConfig {
        rows: a.rows,
        cols: a.cols,
        clock_hz: a.clock_hz,
        vector_lanes: a.lanes,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Two-sided normal quantile for a confidence level.
pub fn confidence_to_t(confidence: f64) -> CliResult<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(invalid(format!(
            "confidence must be in (0, 1), got {confidence}"
        )));
    }
    let normal = Normal::new(0.0, 1.0).map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(normal.inverse_cdf(1.0 - (1.0 - confidence) / 2.0))
}

fn plan_params(p: &PlanArgs) -> CliResult<PlanParams> {
    let t = match (p.confidence, p.t) {
        (Some(c), _) => confidence_to_t(c)?,
        (None, Some(t)) => t,
        (None, None) => DEFAULT_T,
    };
    Ok(PlanParams {
        t,
        error_margin: p.error_margin,
        p: p.p,
        max_repetitions: p.max_repetitions,
    })
}

fn campaign_config(
    f: &FaultArgs,
    array: ArrayConfig,
    guard: GuardMethod,
    threads: usize,
) -> CampaignConfig {
    CampaignConfig {
        guard,
        array,
        seed: f.seed,
        k_bits: f.k_bits,
        threads,
        persistence: if f.per_input {
            FaultPersistence::PerInput
        } else {
            FaultPersistence::PerRepetition
        },
        inclusion: InclusionMask {
            flatten: f.include_flatten,
            ..InclusionMask::default()
        },
        record_flags: f.record_flags,
    }
}

fn limited(set: LabeledSet, limit: Option<usize>) -> CliResult<LabeledSet> {
    match limit {
        Some(0) => Err(invalid("--limit must be at least 1")),
        Some(n) => Ok(set.head(n)),
        None => Ok(set),
    }
}

fn require_out(out: &Path) -> CliResult<()> {
    if out.as_os_str().is_empty() {
        return Err(invalid("--out is required"));
    }
    Ok(())
}

/// JSON body with the run manifest as its first key.
#[derive(Serialize)]
struct Embedded<'a, T: Serialize> {
    manifest: &'a RunManifest,
    #[serde(flatten)]
    body: &'a T,
}

fn embedded_json<T: Serialize>(manifest: &RunManifest, body: &T) -> CliResult<String> {
    Ok(to_json(&Embedded { manifest, body })?)
}

fn write_with_sidecar(out: &Path, bytes: &[u8], manifest: &RunManifest) -> CliResult<()> {
    write_atomic(sidecar_path(out), to_json(manifest)?.as_bytes())?;
    write_atomic(out, bytes)?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    print!("{}", to_json(value)?);
    Ok(())
}

pub fn quantize(a: &QuantizeArgs) -> CliResult<()> {
    check_bits(a.bits)?;
    require_out(&a.out)?;
    if a.out.exists()
        && fs::read_dir(&a.out)
            .map_err(|e| io_error(&a.out, e))?
            .next()
            .is_some()
    {
        return Err(invalid(format!(
            "{} exists and is not empty",
            a.out.display()
        )));
    }
    let net = load(&a.model, Some(a.bits))?;
    let mut m = RunManifest::new("quantize", a, None)?;
    m.add_model(&a.model)?;
    let accuracy = match &a.data {
        Some(d) => {
            m.add_file("data", d)?;
            Some(evaluate(&net, &read_set(d, &net)?)?)
        }
        None => None,
    };

    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| io_error(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".relab-quantize")
        .tempdir_in(&parent)
        .map_err(|e| io_error(&parent, e))?;
    save_model(&net, staging.path())?;
    write_atomic(staging.path().join(DIR_MANIFEST), to_json(&m)?.as_bytes())?;
    if a.out.exists() {
        fs::remove_dir(&a.out).map_err(|e| io_error(&a.out, e))?;
    }
    fs::rename(staging.path(), &a.out).map_err(|e| io_error(&a.out, e))?;
    eprintln!("wrote {}-bit model to {}", a.bits, a.out.display());
    print_json(&json!({ "bits": a.bits, "accuracy": accuracy }))
}

pub fn ranges(a: &RangesArgs) -> CliResult<()> {
    require_out(&a.out)?;
    let net = load(&a.model, a.bits)?;
    let mut m = RunManifest::new("ranges", a, None)?;
    m.add_model(&a.model)?;
    m.add_file("data", &a.data)?;
    let bounds = extract_ranges(&net, &read_set(&a.data, &net)?)?;
    let coverage = match &a.test {
        Some(t) => {
            m.add_file("test", t)?;
            Some(validate_ranges(&bounds, &net, &read_set(t, &net)?)?)
        }
        None => None,
    };
    write_with_sidecar(&a.out, bounds_to_json(&bounds).as_bytes(), &m)?;
    eprintln!(
        "wrote bounds for {} layers to {}",
        bounds.len(),
        a.out.display()
    );
    if let Some(c) = coverage {
        print_json(&c)?;
    }
    Ok(())
}

/// Parse `LAYER:INDEX:BIT[,BIT...]`.
pub fn parse_fault(s: &str) -> CliResult<(usize, usize, Vec<u32>)> {
    let bad = || invalid(format!("fault `{s}` is not LAYER:INDEX:BIT[,BIT...]"));
    let mut parts = s.split(':');
    let (Some(l), Some(i), Some(b), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(bad());
    };
    let layer = l.trim().parse().map_err(|_| bad())?;
    let index = i.trim().parse().map_err(|_| bad())?;
    let bits = b
        .split(',')
        .map(|x| x.trim().parse::<u32>().map_err(|_| bad()))
        .collect::<CliResult<Vec<_>>>()?;
    if bits.is_empty() {
        return Err(bad());
    }
    Ok((layer, index, bits))
}

/// Merge repeated fault flags. Flags on the same word XOR together, so the
/// same bit given twice cancels out; `None` means nothing is left to flip.
pub fn merge_faults(specs: &[String]) -> CliResult<Option<FaultSite>> {
    let mut words: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for s in specs {
        let (layer, index, bits) = parse_fault(s)?;
        let mut mask = 0u64;
        for b in bits {
            if b >= 32 {
                return Err(invalid(format!("bit {b} out of range in `{s}`")));
            }
            mask ^= 1 << b;
        }
        *words.entry((layer, index)).or_default() ^= mask;
    }
    words.retain(|_, m| *m != 0);
    match words.len() {
        0 => Ok(None),
        1 => {
            let (&(layer, index), &mask) = words.iter().next().unwrap();
            let bits = (0..32).filter(|b| mask >> b & 1 == 1).collect();
            Ok(Some(FaultSite::new(layer, index, bits)))
        }
        _ => Err(invalid("all --fault flags must target the same word")),
    }
}

fn guard_spec(
    net: &Network,
    method: GuardMethod,
    bounds: Option<&[LayerBounds]>,
) -> CliResult<Option<GuardSpec>> {
    if method == GuardMethod::None {
        return Ok(None);
    }
    let bounds = bounds.ok_or_else(|| invalid(format!("guard {method} needs bounds")))?;
    Ok(Some(GuardSpec::new(net, method, bounds)?))
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    let net = load(&a.model, a.bits)?;
    let cfg = array(&a.array)?;
    let site = merge_faults(&a.faults)?;
    if let Some(s) = &site {
        s.validate(&net)?;
    }
    let bounds = a.bounds.as_deref().map(read_bounds).transpose()?;
    let guard = guard_spec(&net, a.guard, bounds.as_deref())?;
    let set = read_set(&a.input, &net)?;
    if a.index >= set.len() {
        return Err(invalid(format!(
            "index {} outside {} samples",
            a.index,
            set.len()
        )));
    }
    let set = encoded_for(&net, &set)?;
    let (label, x) = set.sample(a.index)?;
    let (p, cycles) = run_network(&net, &x, &cfg, site.as_ref(), guard.as_ref())?;
    print_json(&json!({
        "index": a.index,
        "label": label,
        "fault": site,
        "guard": a.guard,
        "top1": p.top1,
        "quantized_logits": p.quantized_logits,
        "confidences": p.confidences,
        "cycles": cycles.cycles,
        "mac_ops": cycles.mac_ops,
        "latency_seconds": cycles.latency_seconds(),
        "giops_estimate": cycles.giops_estimate(),
    }))
}

pub fn campaign(a: &CampaignArgs) -> CliResult<()> {
    require_out(&a.out)?;
    let net = load(&a.model, a.bits)?;
    let cfg = campaign_config(&a.fault, array(&a.array)?, a.guard, a.threads.threads);
    let params = plan_params(&a.plan)?;
    let mut m = RunManifest::new("campaign", a, Some(a.fault.seed))?;
    m.add_model(&a.model)?;
    m.add_file("data", &a.data)?;
    let data = limited(read_set(&a.data, &net)?, a.fault.limit)?;
    let bounds = match (&a.bounds, &a.validation) {
        (Some(b), _) => {
            m.add_file("bounds", b)?;
            Some(read_bounds(b)?)
        }
        (None, Some(v)) => {
            m.add_file("validation", v)?;
            Some(extract_ranges(&net, &read_set(v, &net)?)?)
        }
        (None, None) => None,
    };
    if a.guard != GuardMethod::None && bounds.is_none() {
        return Err(invalid(format!(
            "guard {} needs --bounds or --validation",
            a.guard
        )));
    }
    let population = Population::new(&net, net.activation_bits(), &cfg.inclusion).size();
    let plan = if a.no_faults {
        SamplingPlan::disabled(population)
    } else {
        params.plan(population)?
    };
    eprintln!(
        "campaign: {} repetitions x {} inputs, population {} bits, guard {}",
        plan.n,
        data.len(),
        population,
        a.guard
    );
    let mut result = run_campaign(&net, &data, &cfg, &plan, bounds.as_deref())?;
    result.manifest = Some(serde_json::to_value(&m)?);
    write_campaign_result(&result, &a.out)?;
    if let Some(agg) = &result.aggregates {
        eprintln!(
            "golden {:.2}%, mean faulty {:.4}%, criticality {:.3}%, {} infrastructure errors",
            agg.model.golden_accuracy,
            agg.model.mean_faulty_accuracy,
            agg.model.criticality,
            result.infrastructure_errors
        );
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn output_format(explicit: Option<&str>, out: &Path) -> CliResult<Format> {
    let name = match explicit {
        Some(f) => f.to_string(),
        None => match out.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => "json".into(),
            _ => "csv".into(),
        },
    };
    Ok(name.parse()?)
}

fn parse_baseline(s: &str) -> CliResult<Baseline> {
    if s == "same-width" {
        return Ok(Baseline::UnprotectedSameWidth);
    }
    let bad = || invalid(format!("baseline `{s}` is not `same-width` or BITS:METHOD"));
    let (b, m) = s.split_once(':').ok_or_else(bad)?;
    Ok(Baseline::Cell {
        bits: b.parse().map_err(|_| bad())?,
        method: m.parse()?,
    })
}

pub fn sweep(a: &SweepArgs) -> CliResult<()> {
    require_out(&a.out)?;
    for &b in &a.bits {
        check_bits(b)?;
    }
    let format = output_format(a.format.as_deref(), &a.out)?;
    let baseline = parse_baseline(&a.baseline)?;
    let net = load(&a.model, None)?;
    let cfg = campaign_config(
        &a.fault,
        array(&a.array)?,
        GuardMethod::None,
        a.threads.threads,
    );
    let params = plan_params(&a.plan)?;
    let mut m = RunManifest::new("sweep", a, Some(a.fault.seed))?;
    m.add_model(&a.model)?;
    m.add_file("data", &a.data)?;
    let data = limited(read_set(&a.data, &net)?, a.fault.limit)?;
    let validation = match &a.validation {
        Some(v) => {
            m.add_file("validation", v)?;
            Some(read_set(v, &net)?)
        }
        None => None,
    };
    if a.methods.iter().any(|&x| x != GuardMethod::None) && validation.is_none() {
        return Err(invalid("protection methods need --validation"));
    }
    eprintln!(
        "sweep: {} widths x {} methods",
        a.bits.len(),
        a.methods.len()
    );
    let table = run_sweep(
        &net,
        &data,
        &SweepSpec {
            bit_widths: &a.bits,
            methods: &a.methods,
            campaign: cfg,
            plan: params,
            baseline,
            validation: validation.as_ref(),
        },
    )?;
    for row in table.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "cell {}-bit {} failed: {}",
            row.bits,
            row.method,
            row.error.as_deref().unwrap_or("")
        );
    }
    match format {
        Format::Json => write_atomic(&a.out, embedded_json(&m, &table)?.as_bytes())?,
        Format::Csv => {
            write_with_sidecar(&a.out, render_table(&table, Format::Csv)?.as_bytes(), &m)?
        }
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

pub fn report(a: &ReportArgs) -> CliResult<()> {
    let format: Format = a.format.parse()?;
    let text = fs::read_to_string(&a.input).map_err(|e| io_error(&a.input, e))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", a.input.display())))?;
    let mut m = RunManifest::new("report", a, None)?;
    m.add_file("input", &a.input)?;
    let is_table = value.get("rows").is_some();
    let rendered = if is_table {
        let table: DseTable = serde_json::from_value(value)
            .map_err(|e| invalid(format!("{}: {e}", a.input.display())))?;
        match format {
            Format::Json => embedded_json(&m, &table)?,
            Format::Csv => render_table(&table, Format::Csv)?,
        }
    } else {
        let result = read_campaign_result(&a.input)?;
        let agg = aggregate(&result)?;
        match format {
            Format::Json => embedded_json(&m, &agg)?,
            Format::Csv => render_aggregates(&agg, Format::Csv)?,
        }
    };
    match &a.out {
        Some(out) => match format {
            Format::Json => write_atomic(out, rendered.as_bytes())?,
            Format::Csv => write_with_sidecar(out, rendered.as_bytes(), &m)?,
        },
        None => print!("{rendered}"),
    }
    Ok(())
}

pub fn cost(a: &CostArgs) -> CliResult<()> {
    let net = load(&a.model, a.bits)?;
    print_json(&guard_cost(&net, a.method)?)
}

fn args_of<T: serde::de::DeserializeOwned>(m: &RunManifest) -> CliResult<T> {
    serde_json::from_value(m.args.clone())
        .map_err(|e| invalid(format!("recorded arguments do not parse: {e}")))
}

fn same_bytes(a: &Path, b: &Path) -> CliResult<bool> {
    if a.is_dir() {
        let mut names: Vec<_> = fs::read_dir(a)
            .map_err(|e| io_error(a, e))?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<Result<_, _>>()
            .map_err(|e| io_error(a, e))?;
        names.sort();
        let count = fs::read_dir(b).map_err(|e| io_error(b, e))?.count();
        if count != names.len() {
            return Ok(false);
        }
        for n in names {
            if !same_bytes(&a.join(&n), &b.join(&n))? {
                return Ok(false);
            }
        }
        return Ok(true);
    }
    let x = fs::read(a).map_err(|e| io_error(a, e))?;
    let y = fs::read(b).map_err(|e| io_error(b, e))?;
    Ok(x == y)
}

pub fn replay(a: &ReplayArgs) -> CliResult<()> {
    let m = manifest::locate(&a.artifact)?;
    m.verify_inputs()?;
    let scratch = tempfile::tempdir().map_err(|e| CliError::Io(e.to_string()))?;
    let name = a
        .artifact
        .file_name()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("artifact"));
    let out = a.out.clone().unwrap_or_else(|| scratch.path().join(name));
    eprintln!("replaying `{}` into {}", m.command, out.display());
    match m.command.as_str() {
        "quantize" => quantize(&QuantizeArgs {
            out: out.clone(),
            ..args_of(&m)?
        })?,
        "ranges" => ranges(&RangesArgs {
            out: out.clone(),
            ..args_of(&m)?
        })?,
        "campaign" => campaign(&CampaignArgs {
            out: out.clone(),
            ..args_of(&m)?
        })?,
        "sweep" => sweep(&SweepArgs {
            out: out.clone(),
            ..args_of(&m)?
        })?,
        "report" => report(&ReportArgs {
            out: Some(out.clone()),
            ..args_of(&m)?
        })?,
        other => return Err(invalid(format!("cannot replay command `{other}`"))),
    }
    if same_bytes(&a.artifact, &out)? {
        println!("reproduced {}", a.artifact.display());
        Ok(())
    } else {
        Err(invalid(format!(
            "{} differs from the recorded artifact",
            out.display()
        )))
    }
}
