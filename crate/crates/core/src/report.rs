//! Outcome classification, campaign metrics, design-space sweeps and emitters.
//!
//! All percentages are in `[0, 100]`. Emitted files use a fixed column order,
//! four decimals and LF line endings so repeated runs compare byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::faultlab::{run_campaign, CampaignConfig, CampaignResult, Population, SamplingPlan};
use crate::guard::{extract_ranges, guard_cost, GuardMethod, LayerBounds};
use crate::netgraph::{evaluate, LabeledSet, Network, Prediction};
use crate::systolic::network_cycles;

/// Silent-data-corruption flags of one `(repetition, input)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeFlags {
    pub sdc1: bool,
    pub sdc5: bool,
    pub sdc10: bool,
}

/// Relative confidence deviation above which SDC-10% fires.
pub const SDC10_THRESHOLD: f64 = 0.10;

/// Compare a faulty prediction with the golden one for the same input.
///
/// SDC-5 uses `k = min(5, class_count)`. SDC-10% compares the confidence of
/// the golden top-1 class in both runs, relative to the golden confidence.
pub fn classify_outcome(golden: &Prediction, faulty: &Prediction) -> OutcomeFlags {
    let g = golden.top1;
    let k = golden.confidences.len().min(5);
    let c_g = golden.confidences[g];
    let c_f = faulty.confidences[g];
    OutcomeFlags {
        sdc1: faulty.top1 != g,
        sdc5: !faulty.topk(k).contains(&g),
        sdc10: (c_f - c_g).abs() / c_g > SDC10_THRESHOLD,
    }
}

fn round4<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(fixed4(*v))
}

fn round4_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.serialize_f64(fixed4(*v)),
        None => s.serialize_none(),
    }
}

fn fixed4(v: f64) -> f64 {
    let r = (v * 1e4).round() / 1e4;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Successful repetitions aggregated.
    pub repetitions: u64,
    pub inputs_per_repetition: u64,
    #[serde(serialize_with = "round4")]
    pub golden_accuracy: f64,
    #[serde(serialize_with = "round4")]
    pub mean_faulty_accuracy: f64,
    /// `golden - mean faulty`, in points.
    #[serde(serialize_with = "round4")]
    pub accuracy_loss: f64,
    /// `100 * mean faulty / golden`; undefined for a zero golden accuracy.
    #[serde(serialize_with = "round4_opt")]
    pub relative_accuracy: Option<f64>,
    /// Share of repetitions whose accuracy fell below golden.
    #[serde(serialize_with = "round4")]
    pub criticality: f64,
    #[serde(serialize_with = "round4")]
    pub sdc1_rate: f64,
    #[serde(serialize_with = "round4")]
    pub sdc5_rate: f64,
    #[serde(serialize_with = "round4")]
    pub sdc10_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub name: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub model: Metrics,
    /// Repetitions grouped by the layer their fault hit.
    pub layers: Vec<LayerMetrics>,
    pub infrastructure_errors: u64,
}

fn metrics_of<'a>(
    reps: impl Iterator<Item = &'a crate::faultlab::RepetitionRecord>,
    inputs: u64,
    golden_correct: u64,
) -> Result<Metrics> {
    let (mut n, mut correct, mut evaluated, mut critical) = (0u64, 0u64, 0u64, 0u64);
    let (mut s1, mut s5, mut s10) = (0u64, 0u64, 0u64);
    for r in reps {
        if r.inputs_evaluated != inputs {
            return Err(Error::Aggregate(format!(
                "repetition {} evaluated {} inputs, expected {inputs}",
                r.index, r.inputs_evaluated
            )));
        }
        n += 1;
        correct += r.correct;
        evaluated += r.inputs_evaluated;
        critical += u64::from(r.correct < golden_correct);
        s1 += r.sdc1_count;
        s5 += r.sdc5_count;
        s10 += r.sdc10_count;
    }
    if n == 0 {
        return Err(Error::Aggregate("no successful repetitions to aggregate".into()));
    }
    let pct = |a: u64, b: u64| 100.0 * a as f64 / b as f64;
    let golden = pct(golden_correct, inputs);
    let mean = pct(correct, evaluated);
    Ok(Metrics {
        repetitions: n,
        inputs_per_repetition: inputs,
        golden_accuracy: golden,
        mean_faulty_accuracy: mean,
        accuracy_loss: golden - mean,
        relative_accuracy: (golden_correct > 0).then(|| 100.0 * correct as f64 / (golden_correct * n) as f64),
        criticality: pct(critical, n),
        sdc1_rate: pct(s1, evaluated),
        sdc5_rate: pct(s5, evaluated),
        sdc10_rate: pct(s10, evaluated),
    })
}

/// Campaign metrics plus the per-layer grouping.
///
/// Sums are taken over integer counts, so the result does not depend on the
/// order of repetitions or inputs.
pub fn aggregate(result: &CampaignResult) -> Result<Aggregates> {
    let ok = || result.repetitions.iter().filter(|r| r.is_ok());
    let model = metrics_of(ok(), result.inputs, result.golden_correct)?;
    let mut groups: BTreeMap<usize, Vec<&crate::faultlab::RepetitionRecord>> = BTreeMap::new();
    for r in ok() {
        if let Some(site) = &r.fault_site {
            groups.entry(site.layer).or_default().push(r);
        }
    }
    let layers = groups
        .into_iter()
        .map(|(layer, reps)| {
            Ok(LayerMetrics {
                layer,
                name: result
                    .layers
                    .get(layer)
                    .map(|l| l.name.clone())
                    .unwrap_or_else(|| format!("layer{layer}")),
                metrics: metrics_of(reps.into_iter(), result.inputs, result.golden_correct)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Aggregates {
        model,
        layers,
        infrastructure_errors: result.repetitions.iter().filter(|r| !r.is_ok()).count() as u64,
    })
}

/// `(new - old) / old * 100`.
pub fn improvement(old_value: f64, new_value: f64) -> Result<f64> {
    if old_value == 0.0 {
        return Err(Error::Undefined("improvement over a zero baseline".into()));
    }
    if !(old_value.is_finite() && new_value.is_finite()) || old_value < 0.0 {
        return Err(Error::Range(format!(
            "improvement needs a positive baseline, got {old_value} -> {new_value}"
        )));
    }
    Ok((new_value - old_value) / old_value * 100.0)
}

/// Sizing parameters applied to every sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    pub t: f64,
    pub error_margin: f64,
    pub p: f64,
    /// Cap on repetitions per cell; `None` runs the full statistical size.
    pub max_repetitions: Option<u64>,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            t: crate::faultlab::DEFAULT_T,
            error_margin: crate::faultlab::DEFAULT_ERROR_MARGIN,
            p: crate::faultlab::DEFAULT_P,
            max_repetitions: None,
        }
    }
}

impl PlanParams {
    pub fn plan(&self, population: u64) -> Result<SamplingPlan> {
        let plan = SamplingPlan::new(population, self.t, self.error_margin, self.p)?;
        Ok(match self.max_repetitions {
            Some(max) => plan.capped(max),
            None => plan,
        })
    }
}

/// Row that reliability improvement is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// The unprotected cell at the same bit width.
    #[default]
    UnprotectedSameWidth,
    /// One fixed cell.
    Cell { bits: u32, method: GuardMethod },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseRow {
    pub bits: u32,
    pub method: GuardMethod,
    /// Fault-free accuracy of the requantized network on the slice.
    pub accuracy: Option<f64>,
    pub metrics: Option<Metrics>,
    /// Relative-accuracy improvement over the baseline row.
    pub reliability_improvement: Option<f64>,
    pub guard_cost_units: Option<u64>,
    pub guard_relative_overhead: Option<f64>,
    pub cycles: Option<u64>,
    pub giops_estimate: Option<f64>,
    pub error: Option<String>,
}

impl DseRow {
    fn empty(bits: u32, method: GuardMethod) -> Self {
        Self {
            bits,
            method,
            accuracy: None,
            metrics: None,
            reliability_improvement: None,
            guard_cost_units: None,
            guard_relative_overhead: None,
            cycles: None,
            giops_estimate: None,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseTable {
    pub baseline: Baseline,
    pub rows: Vec<DseRow>,
    pub reference_rows: Vec<String>,
}

/// Inputs shared by every sweep cell.
#[derive(Debug, Clone)]
pub struct SweepSpec<'a> {
    pub bit_widths: &'a [u32],
    pub methods: &'a [GuardMethod],
    pub campaign: CampaignConfig,
    pub plan: PlanParams,
    pub baseline: Baseline,
    /// Range-extraction set; required when a protection method is swept.
    pub validation: Option<&'a LabeledSet>,
}

/// Evaluate every `(bit width, method)` cell. A failing cell records its
/// error and the table is still produced.
pub fn sweep(net: &Network, data: &LabeledSet, spec: &SweepSpec<'_>) -> Result<DseTable> {
    if spec.bit_widths.is_empty() || spec.methods.is_empty() {
        return Err(Error::Config("sweep needs at least one bit width and one method".into()));
    }
    let mut rows = Vec::new();
    for &bits in spec.bit_widths {
        let prepared = prepare_width(net, data, bits, spec);
        for &method in spec.methods {
            let mut row = DseRow::empty(bits, method);
            match &prepared {
                Ok((net_b, accuracy, bounds)) => {
                    row.accuracy = Some(*accuracy);
                    if let Err(e) = fill_cell(&mut row, net_b, data, bounds.as_deref(), spec) {
                        row.error = Some(e.to_string());
                    }
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            rows.push(row);
        }
    }
    let relative = |row: &DseRow| row.metrics.as_ref().and_then(|m| m.relative_accuracy);
    let baselines: Vec<Option<f64>> = rows
        .iter()
        .map(|row| {
            let (bits, method) = match spec.baseline {
                Baseline::UnprotectedSameWidth => (row.bits, GuardMethod::None),
                Baseline::Cell { bits, method } => (bits, method),
            };
            rows.iter()
                .find(|r| r.bits == bits && r.method == method)
                .and_then(relative)
        })
        .collect();
    for (row, base) in rows.iter_mut().zip(baselines) {
        if let (Some(old), Some(new)) = (base, relative(row)) {
            row.reliability_improvement = improvement(old, new).ok();
        }
    }
    Ok(DseTable {
        baseline: spec.baseline,
        rows,
        reference_rows: crate::guard::REFERENCE_ROWS.iter().map(|s| s.to_string()).collect(),
    })
}

type Prepared = (Network, f64, Option<Vec<LayerBounds>>);

fn prepare_width(net: &Network, data: &LabeledSet, bits: u32, spec: &SweepSpec<'_>) -> Result<Prepared> {
    let net_b = net.requantize(bits)?;
    let accuracy = 100.0 * evaluate(&net_b, data)?;
    let bounds = if spec.methods.iter().any(|&m| m != GuardMethod::None) {
        let validation = spec
            .validation
            .ok_or_else(|| Error::Config("protection methods need a range-extraction set".into()))?;
        Some(extract_ranges(&net_b, validation)?)
    } else {
        None
    };
    Ok((net_b, accuracy, bounds))
}

fn fill_cell(
    row: &mut DseRow,
    net: &Network,
    data: &LabeledSet,
    bounds: Option<&[LayerBounds]>,
    spec: &SweepSpec<'_>,
) -> Result<()> {
    let cycles = network_cycles(net, &spec.campaign.array)?;
    row.cycles = Some(cycles.cycles);
    row.giops_estimate = Some(cycles.giops_estimate());
    if row.method != GuardMethod::None {
        let cost = guard_cost(net, row.method)?;
        row.guard_cost_units = Some(cost.cost_units);
        row.guard_relative_overhead = Some(cost.relative_overhead);
    }
    let cfg = CampaignConfig {
        guard: row.method,
        ..spec.campaign.clone()
    };
    let population = Population::new(net, net.activation_bits(), &cfg.inclusion).size();
    let plan = spec.plan.plan(population)?;
    let result = run_campaign(net, data, &cfg, &plan, bounds)?;
    row.metrics = Some(aggregate(&result)?.model);
    Ok(())
}

/// Output format of [`emit_table`] and [`emit_aggregates`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown format `{other}`"))),
        }
    }
}

fn num(v: Option<f64>) -> String {
    v.map(|v| format!("{:.4}", fixed4(v))).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const TABLE_COLUMNS: [&str; 19] = [
    "bits",
    "method",
    "accuracy",
    "golden_accuracy",
    "mean_faulty_accuracy",
    "accuracy_loss",
    "relative_accuracy",
    "reliability_improvement",
    "criticality",
    "sdc1_rate",
    "sdc5_rate",
    "sdc10_rate",
    "repetitions",
    "guard_cost_units",
    "guard_relative_overhead",
    "cycles",
    "giops_estimate",
    "error",
    "note",
];

pub fn table_to_csv(table: &DseTable) -> String {
    let mut out = TABLE_COLUMNS.join(",");
    out.push('\n');
    for r in &table.rows {
        let m = r.metrics.as_ref();
        let fields = [
            r.bits.to_string(),
            r.method.to_string(),
            num(r.accuracy),
            num(m.map(|m| m.golden_accuracy)),
            num(m.map(|m| m.mean_faulty_accuracy)),
            num(m.map(|m| m.accuracy_loss)),
            num(m.and_then(|m| m.relative_accuracy)),
            num(r.reliability_improvement),
            num(m.map(|m| m.criticality)),
            num(m.map(|m| m.sdc1_rate)),
            num(m.map(|m| m.sdc5_rate)),
            num(m.map(|m| m.sdc10_rate)),
            m.map(|m| m.repetitions.to_string()).unwrap_or_default(),
            r.guard_cost_units.map(|v| v.to_string()).unwrap_or_default(),
            num(r.guard_relative_overhead),
            r.cycles.map(|v| v.to_string()).unwrap_or_default(),
            num(r.giops_estimate),
            csv_field(r.error.as_deref().unwrap_or("")),
            String::new(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    // static commentary rows: method `reference`, text in the last column
    for note in &table.reference_rows {
        out.push_str(",reference");
        out.push_str(&",".repeat(TABLE_COLUMNS.len() - 2));
        out.push_str(&csv_field(note));
        out.push('\n');
    }
    out
}

pub const METRIC_COLUMNS: [&str; 13] = [
    "scope",
    "layer",
    "repetitions",
    "inputs_per_repetition",
    "golden_accuracy",
    "mean_faulty_accuracy",
    "accuracy_loss",
    "relative_accuracy",
    "criticality",
    "sdc1_rate",
    "sdc5_rate",
    "sdc10_rate",
    "infrastructure_errors",
];

pub fn aggregates_to_csv(agg: &Aggregates) -> String {
    let mut out = METRIC_COLUMNS.join(",");
    out.push('\n');
    let mut line = |scope: &str, layer: String, m: &Metrics, errors: String| {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(scope),
            layer,
            m.repetitions,
            m.inputs_per_repetition,
            num(Some(m.golden_accuracy)),
            num(Some(m.mean_faulty_accuracy)),
            num(Some(m.accuracy_loss)),
            num(m.relative_accuracy),
            num(Some(m.criticality)),
            num(Some(m.sdc1_rate)),
            num(Some(m.sdc5_rate)),
            num(Some(m.sdc10_rate)),
            errors,
        );
    };
    line("model", String::new(), &agg.model, agg.infrastructure_errors.to_string());
    for l in &agg.layers {
        line(&l.name, l.layer.to_string(), &l.metrics, String::new());
    }
    out
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Aggregate(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn render_table(table: &DseTable, format: Format) -> Result<String> {
    match format {
        Format::Csv => Ok(table_to_csv(table)),
        Format::Json => to_json(table),
    }
}

pub fn render_aggregates(agg: &Aggregates, format: Format) -> Result<String> {
    match format {
        Format::Csv => Ok(aggregates_to_csv(agg)),
        Format::Json => to_json(agg),
    }
}

pub fn emit_table(table: &DseTable, format: Format, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, render_table(table, format)?.as_bytes())
}

pub fn emit_aggregates(agg: &Aggregates, format: Format, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, render_aggregates(agg, format)?.as_bytes())
}

/// Write through a temporary file in the destination directory and rename it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn write_campaign_result(result: &CampaignResult, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, to_json(result)?.as_bytes())
}

pub fn read_campaign_result(path: impl AsRef<Path>) -> Result<CampaignResult> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
