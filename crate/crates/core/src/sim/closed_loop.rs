//! Receding-horizon experiments on a simulated plant.
//!
//! Time runs through a warm-up phase of uniformly random inputs, which fills
//! the dataset, and then the controlled phase. Dataset sample `k` holds the
//! input and disturbance applied at time `k` and the output measured at time
//! `k + 1`. Disturbances, measurement noise and warm-up inputs are drawn from
//! separate seeded streams up front, so runs of different controllers with
//! the same seed see identical realizations.

use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::disturbance::{generate, DisturbanceSpec, DisturbanceTrace};
use super::plant::PlantModel;
use crate::baselines::{self, regression_data, regressor, rls_update, DeepcWeights, RlsState};
use crate::error::{Error, Result};
use crate::excitation::{self, ExcitationConfig, StepProblem};
use crate::hankel::{build_stack, Dataset, HankelStack};
use crate::predictor::{factorize_kkt, KktFactor, NoiseModel, RegularizerWeights};
use crate::robust::{
    assemble_problem, solve_control, BoxSet, History, HorizonSets, ObjectiveSpec, QpProblem, QpSettings, RobustOptions,
};

const STREAM_DISTURBANCE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_WARMUP: u64 = 3;
const STREAM_EXCITATION: u64 = 4;

/// Output box and reference in force from `from_step` on.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSegment {
    pub from_step: usize,
    pub output: BoxSet,
    pub reference: DVector<f64>,
}

/// Piecewise-constant output constraints and reference, indexed by the
/// controlled step whose input produces the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    segments: Vec<ScheduleSegment>,
}

impl Schedule {
    pub fn new(mut segments: Vec<ScheduleSegment>) -> Result<Self> {
        segments.sort_by_key(|s| s.from_step);
        match segments.first() {
            None => return Err(Error::Parameter("schedule needs at least one segment".into())),
            Some(s) if s.from_step != 0 => {
                return Err(Error::Parameter("first schedule segment must start at step 0".into()))
            }
            _ => {}
        }
        let n_y = segments[0].output.dim();
        for s in &segments {
            if s.output.dim() != n_y || s.reference.len() != n_y {
                return Err(Error::dim("schedule segment", n_y, s.reference.len()));
            }
        }
        Ok(Self { segments })
    }

    pub fn constant(output: BoxSet, reference: DVector<f64>) -> Result<Self> {
        Self::new(vec![ScheduleSegment {
            from_step: 0,
            output,
            reference,
        }])
    }

    pub fn n_y(&self) -> usize {
        self.segments[0].output.dim()
    }

    pub fn at(&self, step: usize) -> &ScheduleSegment {
        self.segments
            .iter()
            .rev()
            .find(|s| s.from_step <= step)
            .expect("first segment starts at 0")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub plant: PlantModel,
    /// Measurement noise standard deviation per output channel.
    pub noise_std: f64,
    /// Warm-up length; also the dataset capacity.
    pub warmup_len: usize,
    pub run_len: usize,
    /// Input constraint `U`.
    pub input_box: BoxSet,
    /// Warm-up inputs are drawn uniformly from this box.
    pub warmup_input_box: BoxSet,
    pub schedule: Schedule,
    pub disturbance: DisturbanceSpec,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let p = &self.plant;
        if p.d.iter().any(|v| *v != 0.0) {
            return Err(Error::Parameter(
                "closed-loop simulation needs D = 0: outputs are measured before the input is chosen".into(),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Parameter("noise_std must be >= 0".into()));
        }
        if self.run_len == 0 {
            return Err(Error::Parameter("run_len must be >= 1".into()));
        }
        if self.input_box.dim() != p.n_u() || self.warmup_input_box.dim() != p.n_u() {
            return Err(Error::dim("input box", p.n_u(), self.input_box.dim()));
        }
        if !self.warmup_input_box.is_bounded() {
            return Err(Error::Parameter("warm-up input box must be bounded".into()));
        }
        if self.schedule.n_y() != p.n_y() {
            return Err(Error::dim("schedule outputs", p.n_y(), self.schedule.n_y()));
        }
        if self.disturbance.n_w() != p.n_w() {
            return Err(Error::dim("disturbance channels", p.n_w(), self.disturbance.n_w()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    BilevelRobust,
    BilevelNonrobust,
    SingleLevel,
    RlsMpc,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::BilevelRobust => "bilevel_robust",
            ControllerKind::BilevelNonrobust => "bilevel_nonrobust",
            ControllerKind::SingleLevel => "single_level",
            ControllerKind::RlsMpc => "rls_mpc",
        }
    }
}

/// Lower-level penalty `E_g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightSpec {
    Constant(f64),
    /// Linear from the oldest to the newest column.
    Linear {
        first: f64,
        last: f64,
    },
    /// `t_init^exponent · tr(Σ_v) · I`.
    Noise {
        exponent: u32,
    },
}

/// Smallest `E_g` entry used when the noise-derived weight would be zero.
pub const MIN_NOISE_WEIGHT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveKind {
    Tracking { output_weight: f64, input_weight: f64 },
    Energy { weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InfeasibilityPolicy {
    /// Stop the run and record the failure.
    Abort,
    /// Retry with output constraints softened at this price per unit of
    /// violation.
    Relax { penalty: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub t_init: usize,
    pub n_h: usize,
    pub weights: WeightSpec,
    pub objective: ObjectiveKind,
    /// Only used by `BilevelRobust`.
    pub excitation: Option<ExcitationConfig>,
    /// Append every new sample to the Hankel dataset (dropping the oldest).
    pub online_update: bool,
    /// With online updates, skip samples whose step was not excited while
    /// the zero-input heuristic flagged the plan.
    pub freeze_on_nonpe: bool,
    pub infeasibility: InfeasibilityPolicy,
    pub deepc: DeepcWeights,
    pub rls_forgetting: f64,
    pub rls_p0: f64,
    pub qp: QpSettings,
    pub record_timing: bool,
}

impl ControllerSpec {
    pub fn validate(&self, scenario: &Scenario) -> Result<()> {
        if self.t_init == 0 || self.n_h == 0 {
            return Err(Error::Parameter("t_init and n_h must be >= 1".into()));
        }
        if scenario.warmup_len < self.t_init + self.n_h {
            return Err(Error::InsufficientData(format!(
                "warm-up of {} samples is shorter than t_init + n_h = {}",
                scenario.warmup_len,
                self.t_init + self.n_h
            )));
        }
        if let Some(ex) = &self.excitation {
            ex.validate(&scenario.input_box)?;
            if ex.enabled && self.kind != ControllerKind::BilevelRobust {
                return Err(Error::Parameter(format!(
                    "active excitation is only available for bilevel_robust, not {}",
                    self.kind.name()
                )));
            }
        }
        if let InfeasibilityPolicy::Relax { penalty } = self.infeasibility {
            if !(penalty > 0.0) {
                return Err(Error::Parameter("relax penalty must be positive".into()));
            }
        }
        Ok(())
    }

    fn regularizer(&self, n_c: usize, noise: &NoiseModel) -> Result<RegularizerWeights> {
        match self.weights {
            WeightSpec::Constant(c) => RegularizerWeights::constant(n_c, c),
            WeightSpec::Linear { first, last } => RegularizerWeights::linear(n_c, first, last),
            WeightSpec::Noise { exponent } => {
                let v = (self.t_init as f64).powi(exponent as i32) * noise.trace();
                RegularizerWeights::constant(n_c, v.max(MIN_NOISE_WEIGHT))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Nominal,
    Excite,
    Relaxed,
}

impl StepMode {
    fn as_str(&self) -> &'static str {
        match self {
            StepMode::Nominal => "nominal",
            StepMode::Excite => "excite",
            StepMode::Relaxed => "relaxed",
        }
    }
}

/// One controlled step: the applied input, the disturbance acting with it,
/// and the output it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub mode: StepMode,
    pub excited: bool,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub y_true: DVector<f64>,
    pub y_meas: DVector<f64>,
    pub y_lower: DVector<f64>,
    pub y_upper: DVector<f64>,
    pub reference: DVector<f64>,
    pub solve_ms: Option<f64>,
}

impl StepRecord {
    /// Closed-set check: boundary values are feasible.
    pub fn violates(&self) -> bool {
        (0..self.y_true.len()).any(|a| self.channel_violates(a))
    }

    pub fn channel_violates(&self, a: usize) -> bool {
        self.y_true[a] < self.y_lower[a] || self.y_true[a] > self.y_upper[a]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub seed: u64,
    pub controller: ControllerKind,
    pub records: Vec<StepRecord>,
    /// Reason the run stopped early.
    pub aborted: Option<String>,
    /// Hankel dataset at the end of the run.
    pub final_dataset: Dataset,
    pub n_u: usize,
    pub n_w: usize,
    pub n_y: usize,
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

impl RunLog {
    pub fn header(n_u: usize, n_w: usize, n_y: usize) -> Vec<String> {
        let mut h = vec!["step".to_string(), "mode".into(), "excited".into()];
        let mut add = |p: &str, n: usize| {
            for i in 1..=n {
                h.push(format!("{p}_{i}"));
            }
        };
        add("u", n_u);
        add("w", n_w);
        add("y_true", n_y);
        add("y_meas", n_y);
        add("ybox_lo", n_y);
        add("ybox_hi", n_y);
        add("ref", n_y);
        h.push("solve_ms".into());
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Parse(e.to_string());
        wtr.write_record(Self::header(self.n_u, self.n_w, self.n_y))
            .map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![
                r.step.to_string(),
                r.mode.as_str().into(),
                (r.excited as u8).to_string(),
            ];
            for v in [&r.u, &r.w, &r.y_true, &r.y_meas, &r.y_lower, &r.y_upper, &r.reference] {
                row.extend(v.iter().map(|x| fmt_f(*x)));
            }
            row.push(r.solve_ms.map(|t| format!("{t:.3}")).unwrap_or_default());
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the step records back from a log written by [`RunLog::write_csv`].
    pub fn read_records<R: Read>(input: R) -> Result<(Vec<StepRecord>, usize, usize, usize)> {
        let mut rdr = csv::Reader::from_reader(input);
        let csv_err = |e: csv::Error| Error::Parse(e.to_string());
        let header = rdr.headers().map_err(csv_err)?.clone();
        let count = |p: &str| {
            header
                .iter()
                .filter(|h| h.strip_prefix(p).is_some_and(|r| r.parse::<usize>().is_ok()))
                .count()
        };
        let (n_u, n_w, n_y) = (count("u_"), count("w_"), count("y_true_"));
        if header.len() != Self::header(n_u, n_w, n_y).len() {
            return Err(Error::Parse("unexpected log header".into()));
        }
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("column {i}: {e}")))
            };
            let mut idx = 3;
            let mut take = |n: usize| -> Result<DVector<f64>> {
                let v = (idx..idx + n).map(num).collect::<Result<Vec<f64>>>()?;
                idx += n;
                Ok(DVector::from_vec(v))
            };
            let (u, w) = (take(n_u)?, take(n_w)?);
            let (y_true, y_meas) = (take(n_y)?, take(n_y)?);
            let (y_lower, y_upper, reference) = (take(n_y)?, take(n_y)?, take(n_y)?);
            let mode = match &rec[1] {
                "nominal" => StepMode::Nominal,
                "excite" => StepMode::Excite,
                "relaxed" => StepMode::Relaxed,
                m => return Err(Error::Parse(format!("unknown mode {m}"))),
            };
            let last = &rec[rec.len() - 1];
            records.push(StepRecord {
                step: rec[0].parse().map_err(|e| Error::Parse(format!("step: {e}")))?,
                mode,
                excited: &rec[2] == "1",
                u,
                w,
                y_true,
                y_meas,
                y_lower,
                y_upper,
                reference,
                solve_ms: if last.is_empty() { None } else { last.parse().ok() },
            });
        }
        Ok((records, n_u, n_w, n_y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub violation_rate: f64,
    pub violations: usize,
    pub steps: usize,
    pub runs: usize,
    pub aborted_runs: usize,
    /// Mean over steps of `Σ|u|`.
    pub energy_mean: f64,
    pub per_channel_violation_rate: Vec<f64>,
    pub mean_output: Vec<f64>,
    pub max_output: Vec<f64>,
    pub mean_abs_tracking_error: Vec<f64>,
    pub excited_steps: usize,
}

/// Fraction of recorded steps with any output outside its box.
pub fn violation_rate(logs: &[&[StepRecord]]) -> f64 {
    let steps: usize = logs.iter().map(|l| l.len()).sum();
    if steps == 0 {
        return 0.0;
    }
    let bad: usize = logs.iter().map(|l| l.iter().filter(|r| r.violates()).count()).sum();
    bad as f64 / steps as f64
}

pub fn compute_metrics(logs: &[&[StepRecord]], aborted_runs: usize) -> Metrics {
    let steps: usize = logs.iter().map(|l| l.len()).sum();
    let n_y = logs
        .iter()
        .flat_map(|l| l.first())
        .map(|r| r.y_true.len())
        .next()
        .unwrap_or(0);
    let mut per = vec![0usize; n_y];
    let mut mean = vec![0.0; n_y];
    let mut max = vec![f64::NEG_INFINITY; n_y];
    let mut err = vec![0.0; n_y];
    let mut energy = 0.0;
    let mut violations = 0;
    let mut excited = 0;
    for r in logs.iter().flat_map(|l| l.iter()) {
        if r.violates() {
            violations += 1;
        }
        if r.excited {
            excited += 1;
        }
        energy += r.u.iter().map(|v| v.abs()).sum::<f64>();
        for a in 0..n_y {
            if r.channel_violates(a) {
                per[a] += 1;
            }
            mean[a] += r.y_true[a];
            max[a] = max[a].max(r.y_true[a]);
            err[a] += (r.y_true[a] - r.reference[a]).abs();
        }
    }
    let div = |x: f64| if steps == 0 { 0.0 } else { x / steps as f64 };
    Metrics {
        violation_rate: violation_rate(logs),
        violations,
        steps,
        runs: logs.len(),
        aborted_runs,
        energy_mean: div(energy),
        per_channel_violation_rate: per.iter().map(|&c| div(c as f64)).collect(),
        mean_output: mean.iter().map(|&m| div(m)).collect(),
        max_output: max,
        mean_abs_tracking_error: err.iter().map(|&e| div(e)).collect(),
        excited_steps: excited,
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Realizations shared by every controller run with the same seed.
#[derive(Debug, Clone)]
pub struct Realization {
    pub trace: DisturbanceTrace,
    pub noise: Vec<DVector<f64>>,
    pub warmup_inputs: Vec<DVector<f64>>,
}

pub fn realize(scenario: &Scenario, n_h: usize) -> Result<Realization> {
    let total = scenario.warmup_len + scenario.run_len + n_h;
    let trace = generate(
        &scenario.disturbance,
        total,
        &mut stream(scenario.seed, STREAM_DISTURBANCE),
    )?;
    let mut rn = stream(scenario.seed, STREAM_NOISE);
    let n_y = scenario.plant.n_y();
    let noise = (0..=total)
        .map(|_| DVector::from_fn(n_y, |_, _| scenario.noise_std * rn.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut ru = stream(scenario.seed, STREAM_WARMUP);
    let warmup_inputs = (0..scenario.warmup_len)
        .map(|_| excitation::sample_box(&scenario.warmup_input_box, &mut ru))
        .collect();
    Ok(Realization {
        trace,
        noise,
        warmup_inputs,
    })
}

struct Decision {
    u: DVector<f64>,
    excited: bool,
    relaxed: bool,
    /// Zero-input heuristic fired but no excitation was applied.
    flagged: bool,
}

struct Controller<'a> {
    spec: &'a ControllerSpec,
    noise: NoiseModel,
    data: Dataset,
    factor: Option<std::result::Result<KktFactor, String>>,
    stack: Option<std::result::Result<HankelStack, String>>,
    rls: Option<RlsState>,
    rng: ChaCha8Rng,
}

fn soft(opts: RobustOptions, policy: InfeasibilityPolicy) -> Option<RobustOptions> {
    match policy {
        InfeasibilityPolicy::Abort => None,
        InfeasibilityPolicy::Relax { penalty } => Some(RobustOptions {
            soft_output_penalty: Some(penalty),
            ..opts
        }),
    }
}

fn retryable(e: &Error) -> bool {
    matches!(e, Error::Infeasible { .. } | Error::Solver(_))
}

impl<'a> Controller<'a> {
    fn factor(&mut self) -> Result<&KktFactor> {
        if self.factor.is_none() {
            let r = build_stack(&self.data, self.spec.t_init, self.spec.n_h).and_then(|st| {
                let w = self.spec.regularizer(st.n_c, &self.noise)?;
                factorize_kkt(&st, &w)
            });
            self.factor = Some(r.map_err(|e| match e {
                Error::RankDeficient(m) => m,
                e => e.to_string(),
            }));
        }
        match self.factor.as_ref().unwrap() {
            Ok(f) => Ok(f),
            Err(msg) => Err(Error::RankDeficient(msg.clone())),
        }
    }

    fn stack(&mut self) -> Result<&HankelStack> {
        if self.stack.is_none() {
            let r = build_stack(&self.data, self.spec.t_init, self.spec.n_h);
            self.stack = Some(r.map_err(|e| e.to_string()));
        }
        match self.stack.as_ref().unwrap() {
            Ok(s) => Ok(s),
            Err(msg) => Err(Error::InsufficientData(msg.clone())),
        }
    }

    fn decide(&mut self, history: &History, problem: &StepSets) -> Result<Decision> {
        let spec = self.spec;
        let n_u = self.data.n_u();
        let objective = &problem.objective;
        let base = RobustOptions {
            feedback: true,
            soft_output_penalty: None,
            qp: spec.qp,
        };
        match spec.kind {
            ControllerKind::BilevelRobust => {
                let map = {
                    let f = self.factor()?;
                    f.output_map(&history.y_init, &history.u_init, &history.w_init)?
                };
                let disabled = ExcitationConfig {
                    enabled: false,
                    u_e_box: BoxSet::point(DVector::zeros(n_u)),
                    pe_tolerance: 0.0,
                    use_exact_rank: false,
                    exact_rank_order: 1,
                    rng_seed: 0,
                };
                let cfg = spec.excitation.as_ref().unwrap_or(&disabled);
                let attempt = |opts: RobustOptions, rng: &mut ChaCha8Rng, data: &Dataset| {
                    let sp = StepProblem {
                        map: &map,
                        input: &problem.input,
                        output: &problem.output,
                        forecast: &problem.forecast,
                        objective,
                        options: opts,
                    };
                    excitation::step(&sp, cfg, rng, Some(data))
                };
                let (out, relaxed) = match attempt(base, &mut self.rng, &self.data) {
                    Ok(o) => (o, false),
                    Err(e) if retryable(&e) => match soft(base, spec.infeasibility) {
                        Some(o) => (attempt(o, &mut self.rng, &self.data)?, true),
                        None => return Err(e),
                    },
                    Err(e) => return Err(e),
                };
                let flagged = crate::hankel::pe_heuristic(&out.nominal.u_nominal, cfg.pe_tolerance) && !out.excited;
                Ok(Decision {
                    u: out.applied,
                    excited: out.excited,
                    relaxed: relaxed || out.solution.output_slack > 0.0,
                    flagged,
                })
            }
            ControllerKind::BilevelNonrobust => {
                let map = {
                    let f = self.factor()?;
                    f.output_map(&history.y_init, &history.u_init, &history.w_init)?
                };
                let sets = HorizonSets {
                    input: problem.input.clone(),
                    output: problem.output.clone(),
                    uncertainty: problem.forecast.iter().map(|b| BoxSet::point(b.center())).collect(),
                    n_excite: 0,
                };
                let opts = RobustOptions {
                    feedback: false,
                    ..base
                };
                self.solve_with_policy(|o| solve_control(&map, &sets, objective, &o), opts)
            }
            ControllerKind::RlsMpc => {
                let (t, n_w, n_y) = (spec.t_init, self.data.n_w(), self.data.n_y());
                let model = self
                    .rls
                    .as_ref()
                    .ok_or_else(|| Error::Parameter("RLS state missing".into()))?
                    .model(t, n_u, n_w, n_y)?;
                let map = model.output_map(history, spec.n_h)?;
                let sets = HorizonSets {
                    input: problem.input.clone(),
                    output: problem.output.clone(),
                    uncertainty: problem.forecast.clone(),
                    n_excite: 0,
                };
                self.solve_with_policy(|o| solve_control(&map, &sets, objective, &o), base)
            }
            ControllerKind::SingleLevel => {
                let w_nom = crate::linalg::flatten(&problem.forecast.iter().map(|b| b.center()).collect::<Vec<_>>());
                let deepc = spec.deepc;
                let qp = spec.qp;
                let stack = self.stack()?;
                let sol = baselines::single_level_deepc(
                    stack,
                    history,
                    &w_nom,
                    &problem.input,
                    &problem.output,
                    deepc,
                    objective,
                    &qp,
                )?;
                Ok(Decision {
                    u: sol.u_pred.rows(0, n_u).into_owned(),
                    excited: false,
                    relaxed: false,
                    flagged: false,
                })
            }
        }
    }

    fn solve_with_policy<F>(&self, solve: F, opts: RobustOptions) -> Result<Decision>
    where
        F: Fn(RobustOptions) -> Result<crate::robust::ControlSolution>,
    {
        let n_u = self.data.n_u();
        let (sol, relaxed) = match solve(opts) {
            Ok(s) => (s, false),
            Err(e) if retryable(&e) => match soft(opts, self.spec.infeasibility) {
                Some(o) => (solve(o)?, true),
                None => return Err(e),
            },
            Err(e) => return Err(e),
        };
        Ok(Decision {
            u: sol.first_input(n_u),
            excited: false,
            relaxed: relaxed || sol.output_slack > 0.0,
            flagged: false,
        })
    }
}

struct StepSets {
    input: Vec<BoxSet>,
    output: Vec<BoxSet>,
    forecast: Vec<BoxSet>,
    objective: ObjectiveSpec,
}

fn clip(u: &DVector<f64>, b: &BoxSet) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| u[i].clamp(b.lower()[i], b.upper()[i]))
}

/// Runs warm-up and the controlled phase. Controller failures end the run
/// and are reported in [`RunLog::aborted`]; configuration problems are
/// returned as errors.
pub fn run_closed_loop(scenario: &Scenario, spec: &ControllerSpec) -> Result<RunLog> {
    scenario.validate()?;
    spec.validate(scenario)?;
    let real = realize(scenario, spec.n_h)?;
    run_with_realization(scenario, spec, &real)
}

struct WarmUp {
    data: Dataset,
    /// Last `t_init + 1` samples, kept independently of the Hankel data.
    recent: Dataset,
    x: DVector<f64>,
}

fn warm_up(scenario: &Scenario, spec: &ControllerSpec, real: &Realization) -> Result<WarmUp> {
    let plant = &scenario.plant;
    let (n_u, n_w, n_y) = (plant.n_u(), plant.n_w(), plant.n_y());
    let mut data = Dataset::new(n_u, n_w, n_y, scenario.warmup_len)?;
    let mut recent = Dataset::new(n_u, n_w, n_y, spec.t_init + 1)?;
    let mut x = DVector::zeros(plant.n_x());
    for i in 0..scenario.warmup_len {
        let u = &real.warmup_inputs[i];
        let w = &real.trace.realized[i];
        let (x_next, _) = plant.step(i, &x, u, w)?;
        x = x_next;
        let y_meas = &plant.c * &x + &real.noise[i + 1];
        data.push(u.clone(), w.clone(), y_meas.clone())?;
        recent.push(u.clone(), w.clone(), y_meas)?;
    }
    Ok(WarmUp { data, recent, x })
}

/// Upper-level QP of the first controlled step of a bi-level controller,
/// built from the warm-up data. Without excitation.
pub fn initial_qp(scenario: &Scenario, spec: &ControllerSpec) -> Result<QpProblem> {
    scenario.validate()?;
    spec.validate(scenario)?;
    let feedback = match spec.kind {
        ControllerKind::BilevelRobust => true,
        ControllerKind::BilevelNonrobust => false,
        k => {
            return Err(Error::Parameter(format!(
                "QP dumps are available for the bi-level controllers, not {}",
                k.name()
            )))
        }
    };
    let real = realize(scenario, spec.n_h)?;
    let wu = warm_up(scenario, spec, &real)?;
    let noise = NoiseModel::isotropic(scenario.plant.n_y(), scenario.noise_std)?;
    let stack = build_stack(&wu.data, spec.t_init, spec.n_h)?;
    let factor = factorize_kkt(&stack, &spec.regularizer(stack.n_c, &noise)?)?;
    let (u_init, w_init, y_init) = wu.recent.tail(spec.t_init)?;
    let history = History { y_init, u_init, w_init };
    let t_w = scenario.warmup_len;
    let forecast: Vec<BoxSet> = (0..spec.n_h).map(|j| real.trace.forecast[t_w + j].clone()).collect();
    let sets = HorizonSets {
        input: vec![scenario.input_box.clone(); spec.n_h],
        output: (0..spec.n_h).map(|j| scenario.schedule.at(j).output.clone()).collect(),
        uncertainty: if feedback {
            forecast
        } else {
            forecast.iter().map(|b| BoxSet::point(b.center())).collect()
        },
        n_excite: 0,
    };
    let objective = match spec.objective {
        ObjectiveKind::Tracking {
            output_weight,
            input_weight,
        } => ObjectiveSpec::Tracking {
            output_weight,
            input_weight,
            reference: (0..spec.n_h)
                .map(|j| scenario.schedule.at(j).reference.clone())
                .collect(),
        },
        ObjectiveKind::Energy { weight } => ObjectiveSpec::Energy { weight },
    };
    let opts = RobustOptions {
        feedback,
        soft_output_penalty: None,
        qp: spec.qp,
    };
    Ok(assemble_problem(&factor, &history, &sets, &objective, &opts)?.qp)
}

pub fn run_with_realization(scenario: &Scenario, spec: &ControllerSpec, real: &Realization) -> Result<RunLog> {
    let plant = &scenario.plant;
    let (n_u, n_w, n_y) = (plant.n_u(), plant.n_w(), plant.n_y());
    let t_w = scenario.warmup_len;
    let WarmUp {
        data,
        mut recent,
        mut x,
    } = warm_up(scenario, spec, real)?;

    let rls = if spec.kind == ControllerKind::RlsMpc {
        let (phi, y) = regression_data(&data, spec.t_init)?;
        Some(RlsState::from_batch(&phi, &y, spec.rls_p0, spec.rls_forgetting)?)
    } else {
        None
    };
    let ex_seed = spec.excitation.as_ref().map_or(0, |e| e.rng_seed);
    let mut ctl = Controller {
        spec,
        noise: NoiseModel::isotropic(n_y, scenario.noise_std)?,
        data,
        factor: None,
        stack: None,
        rls,
        rng: stream(scenario.seed ^ ex_seed.rotate_left(32), STREAM_EXCITATION),
    };

    let mut records = Vec::with_capacity(scenario.run_len);
    let mut aborted = None;
    for k in 0..scenario.run_len {
        let i = t_w + k;
        let (u_init, w_init, y_init) = recent.tail(spec.t_init)?;
        let history = History { y_init, u_init, w_init };
        let reference: Vec<DVector<f64>> = (0..spec.n_h)
            .map(|j| scenario.schedule.at(k + j).reference.clone())
            .collect();
        let sets = StepSets {
            input: vec![scenario.input_box.clone(); spec.n_h],
            output: (0..spec.n_h)
                .map(|j| scenario.schedule.at(k + j).output.clone())
                .collect(),
            forecast: (0..spec.n_h).map(|j| real.trace.forecast[i + j].clone()).collect(),
            objective: match spec.objective {
                ObjectiveKind::Tracking {
                    output_weight,
                    input_weight,
                } => ObjectiveSpec::Tracking {
                    output_weight,
                    input_weight,
                    reference,
                },
                ObjectiveKind::Energy { weight } => ObjectiveSpec::Energy { weight },
            },
        };
        let started = spec.record_timing.then(Instant::now);
        let decision = match ctl.decide(&history, &sets) {
            Ok(d) => d,
            Err(e) => {
                aborted = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let solve_ms = started.map(|t| t.elapsed().as_secs_f64() * 1e3);
        let u = clip(&decision.u, &scenario.input_box);
        let w = real.trace.realized[i].clone();
        let (x_next, _) = plant.step(i, &x, &u, &w)?;
        x = x_next;
        let y_true = &plant.c * &x;
        let y_meas = &y_true + &real.noise[i + 1];
        let seg = scenario.schedule.at(k);
        records.push(StepRecord {
            step: k,
            mode: if decision.relaxed {
                StepMode::Relaxed
            } else if decision.excited {
                StepMode::Excite
            } else {
                StepMode::Nominal
            },
            excited: decision.excited,
            u: u.clone(),
            w: w.clone(),
            y_true,
            y_meas: y_meas.clone(),
            y_lower: seg.output.lower().clone(),
            y_upper: seg.output.upper().clone(),
            reference: seg.reference.clone(),
            solve_ms,
        });

        recent.push(u.clone(), w.clone(), y_meas.clone())?;
        if spec.online_update && !(spec.freeze_on_nonpe && decision.flagged) {
            ctl.data.push(u, w, y_meas.clone())?;
            ctl.factor = None;
            ctl.stack = None;
        }
        if let Some(state) = ctl.rls.as_ref() {
            let phi = regressor(&recent, recent.len() - 1, spec.t_init)?;
            match rls_update(state, &phi, &y_meas) {
                Ok(s) => ctl.rls = Some(s),
                Err(e) => {
                    aborted = Some(format!("step {k}: {e}"));
                    break;
                }
            }
        }
    }
    Ok(RunLog {
        seed: scenario.seed,
        controller: spec.kind,
        records,
        aborted,
        final_dataset: ctl.data,
        n_u,
        n_w,
        n_y,
    })
}
