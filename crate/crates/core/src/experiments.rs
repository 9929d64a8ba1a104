//! Rate and parameter sweeps, configuration files and result tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::analytics::{diss_rate_high, diss_rate_low, fb_leakage_rate_high, fb_leakage_rate_low};
use crate::channels::{ChannelKind, NoiseModel, ResetChannel};
use crate::engine::{
    default_time_step, run_ensemble, run_ensemble_halves, CodingState, EnsembleObservables, JumpScheme,
    SimulationConfig, CHUNK_SIZE,
};
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::observables::{fit_exponential, propagation_time, FitResult};
use crate::propagator::PropagatorOptions;
use crate::units::mhz_to_angular;
use crate::C64;

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweptParameter {
    ChannelRate,
    DisorderW,
    HoppingJ,
    LengthL,
}

/// Quantities extracted at each sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivedOutput {
    FinalLeakage,
    FittedTStar,
    FittedT1,
    FittedT2,
    TProp,
}

fn yes() -> bool {
    true
}

/// A sweep over one parameter of a base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: SimulationConfig,
    pub swept_parameter: SweptParameter,
    pub values: Vec<f64>,
    /// Empty means every output.
    #[serde(default)]
    pub derived_outputs: Vec<DerivedOutput>,
    /// In hopping sweeps, keep `Γ/J_prop` at its base value.
    #[serde(default = "yes")]
    pub scale_rate_with_propagation: bool,
    /// Recompute `t_max` at every point with [`default_t_max`].
    #[serde(default)]
    pub auto_t_max: bool,
}

impl SweepSpec {
    pub fn new(base: SimulationConfig, swept_parameter: SweptParameter, values: Vec<f64>) -> Self {
        SweepSpec {
            base,
            swept_parameter,
            values,
            derived_outputs: Vec::new(),
            scale_rate_with_propagation: true,
            auto_t_max: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.values.is_empty() {
            return Err(Error::Config("sweep has no values".into()));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("sweep values must be finite and non-negative".into()));
        }
        let up = self.values.windows(2).all(|w| w[1] > w[0]);
        let down = self.values.windows(2).all(|w| w[1] < w[0]);
        if !(up || down) {
            return Err(Error::Config("sweep values must be strictly monotone".into()));
        }
        if self.swept_parameter == SweptParameter::LengthL {
            if self.values.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
                return Err(Error::Config("array lengths must be positive integers".into()));
            }
            if self.base.disorder_override.is_some() {
                return Err(Error::Config("a disorder override cannot be combined with a length sweep".into()));
            }
        }
        Ok(())
    }

    fn wants(&self, out: DerivedOutput) -> bool {
        self.derived_outputs.is_empty() || self.derived_outputs.contains(&out)
    }

    /// The configuration at sweep value `value`. The observable spacing of
    /// the base configuration is kept when the time step changes.
    pub fn config_at(&self, value: f64) -> Result<SimulationConfig> {
        let base = &self.base;
        let mut cfg = base.clone();
        match self.swept_parameter {
            SweptParameter::ChannelRate => cfg.channel.rate = value,
            SweptParameter::DisorderW => cfg.lattice.disorder = value,
            SweptParameter::HoppingJ => {
                cfg.lattice.hopping = value;
                if self.scale_rate_with_propagation && base.lattice.propagation_hopping() > 0.0 {
                    let c = base.channel.rate / base.lattice.propagation_hopping();
                    cfg.channel.rate = c * cfg.lattice.propagation_hopping();
                }
            }
            SweptParameter::LengthL => cfg.lattice.length = value as usize,
        }
        cfg.lattice.validate()?;
        if self.auto_t_max {
            cfg.t_max = default_t_max(&cfg.lattice, &cfg.channel)?;
        }
        cfg.dt = base.dt.min(default_time_step(&cfg.lattice, &cfg.channel));
        let spacing = base.observable_stride as f64 * base.dt;
        cfg.observable_stride = ((spacing / cfg.dt).round() as usize).max(1);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `max(10·T⋆, 5(L-1)T_prop)` with `T⋆` the inverse of the larger of the two
/// closed-form removal rates for the channel.
pub fn default_t_max(spec: &LatticeSpec, channel: &ResetChannel) -> Result<f64> {
    let t_prop = propagation_time(spec.hopping, spec.mean_anharmonicity)?;
    let jp = spec.propagation_hopping();
    let (g, j, u) = (channel.rate, spec.hopping, spec.mean_anharmonicity);
    let rate = match channel.kind {
        _ if g == 0.0 => 0.0,
        ChannelKind::Dissipation => diss_rate_low(g, jp).max(diss_rate_high(g, j, u)),
        _ => fb_leakage_rate_low(g, jp).max(fb_leakage_rate_high(g, j, u)),
    };
    let transport = 5.0 * (spec.length.saturating_sub(1).max(1)) as f64 * t_prop;
    Ok(if rate > 0.0 { (10.0 / rate).max(transport) } else { transport })
}

/// Three-point running median; the end points are kept.
pub fn median3(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    for i in 1..values.len().saturating_sub(1) {
        let mut w = [values[i - 1], values[i], values[i + 1]];
        w.sort_by(f64::total_cmp);
        out[i] = w[1];
    }
    out
}

/// Indices of strict interior local minima of the median-smoothed series.
/// A run of equal values counts once, at its first (smallest-rate) index.
pub fn local_minima(values: &[f64]) -> Vec<usize> {
    let s = median3(values);
    let mut minima = Vec::new();
    let mut i = 1;
    while i + 1 < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        if j + 1 < s.len() && s[i] < s[i - 1] && s[i] < s[j + 1] {
            minima.push(i);
        }
        i = j + 1;
    }
    minima
}

/// Final leakage per channel rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSweepResult {
    pub rates: Vec<f64>,
    pub final_leakage: Vec<f64>,
    pub standard_error: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// Indices into `rates` of the local minima.
    pub minima: Vec<usize>,
    pub n_trajectories: usize,
}

impl RateSweepResult {
    pub fn minimum_rates(&self) -> Vec<f64> {
        self.minima.iter().map(|&i| self.rates[i]).collect()
    }

    /// A note when the curve does not show exactly two minima.
    pub fn minima_warning(&self) -> Option<String> {
        (self.minima.len() != 2).then(|| format!("found {} local minima instead of two", self.minima.len()))
    }

    /// Columns `rate, rate_over_j, final_leakage, standard_error, smoothed,
    /// is_minimum`.
    pub fn to_table(&self, hopping: f64) -> Table {
        let rows = (0..self.rates.len())
            .map(|i| {
                vec![
                    self.rates[i],
                    if hopping > 0.0 { self.rates[i] / hopping } else { f64::NAN },
                    self.final_leakage[i],
                    self.standard_error[i],
                    self.smoothed[i],
                    if self.minima.contains(&i) { 1.0 } else { 0.0 },
                ]
            })
            .collect();
        Table::new(
            &["rate", "rate_over_j", "final_leakage", "standard_error", "smoothed", "is_minimum"],
            rows,
        )
    }
}

/// Runs one ensemble per channel rate and records the leakage at `t_max`.
pub fn run_rate_sweep(spec: &SweepSpec) -> Result<RateSweepResult> {
    spec.validate()?;
    if spec.swept_parameter != SweptParameter::ChannelRate {
        return Err(Error::Config("a rate sweep needs swept_parameter = channel_rate".into()));
    }
    with_threads(spec.base.threads, || {
        let mut leak = Vec::new();
        let mut se = Vec::new();
        for &v in &spec.values {
            let mut cfg = spec.config_at(v)?;
            cfg.threads = None;
            let obs = run_ensemble(&cfg)?;
            leak.push(*obs.leakage_total.mean.last().expect("non-empty grid"));
            se.push(*obs.leakage_total.standard_error.last().expect("non-empty grid"));
        }
        Ok(RateSweepResult {
            rates: spec.values.clone(),
            smoothed: median3(&leak),
            minima: local_minima(&leak),
            final_leakage: leak,
            standard_error: se,
            n_trajectories: spec.base.n_trajectories,
        })
    })
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(f),
        None => f(),
    }
}

/// A fitted decay time with its split-half error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCell {
    /// `NaN` when the fit failed.
    pub value: f64,
    /// `|τ_a - τ_b|/2` from the two ensemble halves.
    pub error: f64,
    pub fit: Option<FitResult>,
    pub failure: Option<String>,
}

impl FitCell {
    fn skipped() -> Self {
        FitCell {
            value: f64::NAN,
            error: f64::NAN,
            fit: None,
            failure: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.value.is_finite()
    }
}

/// Fits `A e^{-t/τ}` to the three series and derives the split-half error.
pub fn fit_cell(times: &[f64], full: &[f64], halves: (&[f64], &[f64]), t_start: f64) -> FitCell {
    let fit = fit_exponential(times, full, t_start, None);
    match fit.time() {
        Ok(tau) => {
            let a = fit_exponential(times, halves.0, t_start, None);
            let b = fit_exponential(times, halves.1, t_start, None);
            let error = match (a.time(), b.time()) {
                (Ok(x), Ok(y)) => 0.5 * (x - y).abs(),
                _ => f64::NAN,
            };
            FitCell {
                value: tau,
                error,
                fit: Some(fit),
                failure: None,
            }
        }
        Err(e) => FitCell {
            value: f64::NAN,
            error: f64::NAN,
            fit: Some(fit),
            failure: Some(e.to_string()),
        },
    }
}

/// One row of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub value: f64,
    pub t_star: FitCell,
    pub t_prop: f64,
    pub t1: FitCell,
    pub t2: FitCell,
    pub final_leakage: f64,
    pub final_leakage_se: f64,
    pub channel_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSweepResult {
    pub parameter: SweptParameter,
    pub rows: Vec<ParameterRow>,
    pub n_trajectories: usize,
}

impl ParameterSweepResult {
    pub fn to_table(&self) -> Table {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.value,
                    r.channel_rate,
                    r.t_star.value,
                    r.t_star.error,
                    r.t_prop,
                    r.t1.value,
                    r.t1.error,
                    r.t2.value,
                    r.t2.error,
                    r.final_leakage,
                    r.final_leakage_se,
                ]
            })
            .collect();
        Table::new(
            &[
                "value",
                "channel_rate",
                "t_star",
                "t_star_error",
                "t_prop",
                "t1",
                "t1_error",
                "t2",
                "t2_error",
                "final_leakage",
                "final_leakage_se",
            ],
            rows,
        )
    }
}

/// Decay times of one configuration from the three initial-state protocols:
/// `|2⟩` for `T⋆` (leakage of the array), `|1⟩` for `T₁` (occupation of the
/// coding site) and `|+⟩` for `T₂` (coherence envelope). The leakage fit
/// starts after the transport plateau `(L-1)·T_prop`; the qubit fits start at
/// zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayTimes {
    pub t_star: FitCell,
    pub t1: FitCell,
    pub t2: FitCell,
    pub t_prop: f64,
    pub final_leakage: f64,
    pub final_leakage_se: f64,
}

/// Which protocols [`measure_decay_times`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Protocols {
    pub leakage: bool,
    pub relaxation: bool,
    pub coherence: bool,
}

impl Protocols {
    pub const ALL: Protocols = Protocols {
        leakage: true,
        relaxation: true,
        coherence: true,
    };
}

/// Start `(L-1)·T_prop` of the leakage fit in [`measure_decay_times`].
pub fn fit_start(spec: &LatticeSpec) -> Result<f64> {
    Ok(spec.length.saturating_sub(1) as f64 * propagation_time(spec.hopping, spec.mean_anharmonicity)?)
}

pub fn measure_decay_times(cfg: &SimulationConfig, protocols: Protocols) -> Result<DecayTimes> {
    let t_prop = propagation_time(cfg.lattice.hopping, cfg.lattice.mean_anharmonicity)?;
    let t_start = fit_start(&cfg.lattice)?;
    let run = |state: CodingState| -> Result<(EnsembleObservables, EnsembleObservables, EnsembleObservables)> {
        let mut c = cfg.clone();
        c.initial_coding_state = state;
        run_ensemble_halves(&c)
    };
    let mut out = DecayTimes {
        t_star: FitCell::skipped(),
        t1: FitCell::skipped(),
        t2: FitCell::skipped(),
        t_prop,
        final_leakage: f64::NAN,
        final_leakage_se: f64::NAN,
    };
    if protocols.leakage {
        let (f, a, b) = run(CodingState::Ket2)?;
        out.t_star = fit_cell(
            &f.time_grid,
            &f.leakage_total.mean,
            (&a.leakage_total.mean, &b.leakage_total.mean),
            t_start,
        );
        out.final_leakage = *f.leakage_total.mean.last().expect("non-empty grid");
        out.final_leakage_se = *f.leakage_total.standard_error.last().expect("non-empty grid");
    }
    if protocols.relaxation {
        let (f, a, b) = run(CodingState::Ket1)?;
        out.t1 = fit_cell(
            &f.time_grid,
            &f.occupation_site1.mean,
            (&a.occupation_site1.mean, &b.occupation_site1.mean),
            0.0,
        );
    }
    if protocols.coherence {
        let (f, a, b) = run(CodingState::Plus)?;
        out.t2 = fit_cell(
            &f.time_grid,
            &f.coherence_envelope(),
            (&a.coherence_envelope(), &b.coherence_envelope()),
            0.0,
        );
    }
    Ok(out)
}

/// Runs the decay-time protocols at every sweep value.
pub fn run_parameter_sweep(spec: &SweepSpec) -> Result<ParameterSweepResult> {
    spec.validate()?;
    if spec.swept_parameter == SweptParameter::ChannelRate {
        return Err(Error::Config("use run_rate_sweep for channel-rate sweeps".into()));
    }
    if spec.base.n_trajectories < 2 * CHUNK_SIZE {
        return Err(Error::Config(format!(
            "parameter sweeps need at least {} trajectories per point",
            2 * CHUNK_SIZE
        )));
    }
    let protocols = Protocols {
        leakage: spec.wants(DerivedOutput::FittedTStar) || spec.wants(DerivedOutput::FinalLeakage),
        relaxation: spec.wants(DerivedOutput::FittedT1),
        coherence: spec.wants(DerivedOutput::FittedT2),
    };
    with_threads(spec.base.threads, || {
        let mut rows = Vec::new();
        for &v in &spec.values {
            let mut cfg = spec.config_at(v)?;
            cfg.threads = None;
            let d = measure_decay_times(&cfg, protocols)?;
            rows.push(ParameterRow {
                value: v,
                t_star: d.t_star,
                t_prop: d.t_prop,
                t1: d.t1,
                t2: d.t2,
                final_leakage: d.final_leakage,
                final_leakage_se: d.final_leakage_se,
                channel_rate: cfg.channel.rate,
            });
        }
        Ok(ParameterSweepResult {
            parameter: spec.swept_parameter,
            rows,
            n_trajectories: spec.base.n_trajectories,
        })
    })
}

/// A numeric table with named columns. Missing values are `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str], rows: Vec<Vec<f64>>) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::EmptyTable);
        }
        if let Some(r) = self.rows.iter().find(|r| r.len() != self.columns.len()) {
            return Err(Error::DimensionMismatch {
                expected: self.columns.len(),
                found: r.len(),
            });
        }
        Ok(())
    }

    /// The table with every entry rounded to 12 significant digits, as
    /// written by [`emit_results`].
    pub fn rounded(&self) -> Table {
        Table {
            columns: self.columns.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|&v| round_significant(v)).collect())
                .collect(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

/// Time series of an ensemble run, one row per grid time. Columns `n_0 …
/// n_{L-1}` hold the mean occupation of every site.
pub fn ensemble_table(obs: &EnsembleObservables) -> Table {
    let mut columns: Vec<String> = [
        "time",
        "leakage_total",
        "leakage_total_se",
        "leakage_site1",
        "leakage_site1_se",
        "occupation_site1",
        "occupation_site1_se",
        "coherence_re",
        "coherence_im",
        "coherence_modulus",
        "coherence_modulus_se",
    ]
    .iter()
    .map(|c| c.to_string())
    .collect();
    columns.extend((0..obs.occupations.len()).map(|l| format!("n_{l}")));
    let rows = (0..obs.time_grid.len())
        .map(|k| {
            let mut r = vec![
                obs.time_grid[k],
                obs.leakage_total.mean[k],
                obs.leakage_total.standard_error[k],
                obs.leakage_site1.mean[k],
                obs.leakage_site1.standard_error[k],
                obs.occupation_site1.mean[k],
                obs.occupation_site1.standard_error[k],
                obs.coherence_site1[k].re,
                obs.coherence_site1[k].im,
                obs.coherence_modulus.mean[k],
                obs.coherence_modulus.standard_error[k],
            ];
            r.extend(obs.occupations.iter().map(|o| o[k]));
            r
        })
        .collect();
    Table { columns, rows }
}

/// Closed-form figures of merit of a configuration, as a one-row table.
/// Qubit times use the override profile or the realization drawn from the
/// master seed; the feedback pair is only defined for two sites.
pub fn analytics_table(cfg: &SimulationConfig) -> Result<Table> {
    use crate::analytics::{diss_qubit_times, disintegration_threshold, fb_qubit_times};
    use crate::lattice::{realize_disorder, DisorderRealization};

    let spec = &cfg.lattice;
    let (g, j, u) = (cfg.channel.rate, spec.hopping, spec.mean_anharmonicity);
    let jp = spec.propagation_hopping();
    let real = match &cfg.disorder_override {
        Some(d) => DisorderRealization::from_detunings(spec, d)?,
        None => realize_disorder(spec, cfg.master_seed),
    };
    let dw = &real.detunings;
    let l = spec.length;
    let times = |r: Result<(f64, f64)>| match r {
        Ok(p) => p,
        Err(Error::Unbounded) => (f64::INFINITY, f64::INFINITY),
        Err(_) => (f64::NAN, f64::NAN),
    };
    let (fb1, fb2) = if l == 2 {
        times(fb_qubit_times(g, j, dw[0] - dw[1]))
    } else {
        (f64::NAN, f64::NAN)
    };
    let (d1, d2) = if l >= 2 {
        let inter: Vec<f64> = (1..l - 1).map(|n| dw[0] - dw[n]).collect();
        times(diss_qubit_times(g, j, dw[0] - dw[l - 1], l, &inter))
    } else {
        (f64::NAN, f64::NAN)
    };
    let t_prop = propagation_time(j, u).unwrap_or(f64::NAN);
    Ok(Table::new(
        &[
            "j_prop",
            "t_prop",
            "u_over_j",
            "disintegration_threshold",
            "fb_leakage_rate_low",
            "fb_leakage_rate_high",
            "diss_rate_low",
            "diss_rate_high",
            "fb_t1",
            "fb_t2",
            "diss_t1",
            "diss_t2",
            "default_t_max",
        ],
        vec![vec![
            jp,
            t_prop,
            if j > 0.0 { u / j } else { f64::INFINITY },
            disintegration_threshold()?,
            fb_leakage_rate_low(g, jp),
            fb_leakage_rate_high(g, j, u),
            diss_rate_low(g, jp),
            diss_rate_high(g, j, u),
            fb1,
            fb2,
            d1,
            d2,
            default_t_max(spec, &cfg.channel).unwrap_or(f64::NAN),
        ]],
    ))
}

/// Rounds to 12 significant decimal digits.
pub fn round_significant(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.11e}").parse().unwrap_or(v)
}

/// Decimal text of `v` rounded to 12 significant digits.
pub fn format_number(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        let r = round_significant(v);
        let plain = format!("{r}");
        // very small or large magnitudes stay readable in exponent form
        if plain.len() > 24 {
            format!("{r:e}")
        } else {
            plain
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(OutputFormat::Csv),
            "json" => Some(OutputFormat::Json),
            _ => None,
        }
    }
}

/// Provenance written next to every result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub code_version: String,
    pub command: String,
    pub seed: u64,
    pub n_trajectories: usize,
    pub created_unix_seconds: u64,
    pub config: serde_json::Value,
    #[serde(default)]
    pub notes: serde_json::Value,
}

impl RunMetadata {
    pub fn new(command: &str, config: &impl Serialize, seed: u64, n_trajectories: usize) -> Result<Self> {
        Ok(RunMetadata {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            n_trajectories,
            created_unix_seconds: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config: serde_json::to_value(config)?,
            notes: serde_json::Value::Null,
        })
    }
}

/// Path of the metadata sidecar of a result file: `<path>.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Text of `table` in the format written by [`emit_results`].
pub fn render_table(table: &Table, format: OutputFormat) -> Result<String> {
    table.validate()?;
    Ok(match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&table.columns)?;
            for r in &table.rows {
                w.write_record(r.iter().map(|&v| format_number(v)))?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?)
                .map_err(|e| Error::Serialization(e.to_string()))?
        }
        OutputFormat::Json => {
            let rows: Vec<Vec<serde_json::Value>> = table
                .rows
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|&v| {
                            let x = round_significant(v);
                            serde_json::Number::from_f64(x).map_or(serde_json::Value::Null, serde_json::Value::Number)
                        })
                        .collect()
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&serde_json::json!({ "columns": table.columns, "rows": rows }))?;
            s.push('\n');
            s
        }
    })
}

/// Writes `table` to `path` and `metadata` to the sidecar.
///
/// CSV files have one header row; JSON files hold `{"columns", "rows"}` with
/// `null` for missing values. Numbers carry 12 significant digits. Nothing is
/// written for an empty table.
pub fn emit_results(table: &Table, format: OutputFormat, path: &Path, metadata: &RunMetadata) -> Result<PathBuf> {
    let text = render_table(table, format)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(metadata)? + "\n")?;
    Ok(side)
}

/// Reads a table written by [`emit_results`].
pub fn read_table(path: &Path, format: OutputFormat) -> Result<Table> {
    match format {
        OutputFormat::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            let columns = r.headers()?.iter().map(str::to_string).collect();
            let mut rows = Vec::new();
            for rec in r.records() {
                let rec = rec?;
                let row = rec
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|e| Error::Serialization(format!("{s}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(row);
            }
            Ok(Table { columns, rows })
        }
        OutputFormat::Json => {
            #[derive(Deserialize)]
            struct Raw {
                columns: Vec<String>,
                rows: Vec<Vec<Option<f64>>>,
            }
            let raw: Raw = serde_json::from_str(&fs::read_to_string(path)?)?;
            Ok(Table {
                columns: raw.columns,
                rows: raw
                    .rows
                    .into_iter()
                    .map(|r| r.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
                    .collect(),
            })
        }
    }
}

/// Units of a configuration file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnitMode {
    /// Frequencies `f` in MHz (rates are angular, `2π·f`), times in µs.
    #[default]
    Mhz,
    /// Energies and rates in units of `J`, times in `1/J`.
    Dimensionless,
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub length: usize,
    #[serde(default)]
    pub mean_frequency: f64,
    pub anharmonicity: f64,
    pub hopping: f64,
    #[serde(default)]
    pub disorder: f64,
    #[serde(default = "three")]
    pub local_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub kind: ChannelKind,
    /// Rate as a frequency (MHz) or in units of `J`, depending on the mode.
    #[serde(default)]
    pub rate: Option<f64>,
    /// Rate in units of `J` in either mode.
    #[serde(default)]
    pub rate_over_j: Option<f64>,
    /// Zero-based reset site; the last site by default.
    #[serde(default)]
    pub site: Option<usize>,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            kind: ChannelKind::PeriodicFeedback,
            rate: Some(0.0),
            rate_over_j: None,
            site: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Bare-qubit relaxation time.
    #[serde(default)]
    pub t1: Option<f64>,
    /// Bare-qubit pure dephasing time.
    #[serde(default)]
    pub t_phi: Option<f64>,
    /// Kelvin; only allowed in MHz mode.
    #[serde(default)]
    pub temperature: f64,
}

fn two_thousand() -> usize {
    2000
}

fn four_hundred() -> usize {
    400
}

fn ket2() -> CodingState {
    CodingState::Ket2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "ket2")]
    pub initial_state: CodingState,
    #[serde(default)]
    pub t_max: Option<f64>,
    /// `t_max` in units of `1/J` in either mode.
    #[serde(default)]
    pub t_max_times_j: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "two_thousand")]
    pub n_trajectories: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub observable_stride: Option<usize>,
    /// Approximate number of observable samples when no stride is given.
    #[serde(default = "four_hundred")]
    pub points: usize,
    #[serde(default)]
    pub jump_scheme: JumpScheme,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Detunings `δω_ℓ` in the frequency unit of the file.
    #[serde(default)]
    pub disorder_override: Option<Vec<f64>>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            initial_state: CodingState::Ket2,
            t_max: None,
            t_max_times_j: None,
            dt: None,
            n_trajectories: 2000,
            seed: 0,
            observable_stride: None,
            points: 400,
            jump_scheme: JumpScheme::FirstOrder,
            threads: None,
            disorder_override: None,
        }
    }
}

/// Inclusive range of sweep values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSection {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
    #[serde(default)]
    pub log: bool,
}

impl RangeSection {
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::Config("range count must be positive".into()));
        }
        if self.count == 1 {
            return Ok(vec![self.start]);
        }
        let n = (self.count - 1) as f64;
        if self.log {
            if !(self.start > 0.0 && self.stop > 0.0) {
                return Err(Error::Config("log ranges need positive end points".into()));
            }
            let (a, b) = (self.start.ln(), self.stop.ln());
            Ok((0..self.count).map(|k| (a + (b - a) * k as f64 / n).exp()).collect())
        } else {
            Ok((0..self.count)
                .map(|k| self.start + (self.stop - self.start) * k as f64 / n)
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweptParameter,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub range: Option<RangeSection>,
    /// Channel-rate values are given in units of `J`.
    #[serde(default)]
    pub relative_to_j: bool,
    #[serde(default)]
    pub outputs: Vec<DerivedOutput>,
    #[serde(default = "yes")]
    pub scale_rate_with_propagation: bool,
    #[serde(default)]
    pub auto_t_max: bool,
}

/// A TOML experiment description.
///
/// ```toml
/// units = "mhz"
///
/// [lattice]
/// length = 3
/// mean_frequency = 7500.0
/// anharmonicity = 250.0
/// hopping = 5.0
/// disorder = 100.0
///
/// [channel]
/// kind = "periodic_feedback"
/// rate_over_j = 0.03
///
/// [simulation]
/// initial_state = "ket2"
/// t_max_times_j = 200.0
/// n_trajectories = 2000
/// seed = 7
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub units: UnitMode,
    pub lattice: LatticeSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn frequency(&self, f: f64) -> f64 {
        match self.units {
            UnitMode::Mhz => mhz_to_angular(f),
            UnitMode::Dimensionless => f,
        }
    }

    pub fn lattice_spec(&self) -> Result<LatticeSpec> {
        let l = &self.lattice;
        LatticeSpec::new(
            l.length,
            self.frequency(l.mean_frequency),
            self.frequency(l.anharmonicity),
            self.frequency(l.hopping),
            self.frequency(l.disorder),
        )
        .and_then(|s| s.with_local_dim(l.local_dim))
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn channel(&self, spec: &LatticeSpec) -> Result<ResetChannel> {
        let c = &self.channel;
        let rate = match (c.rate, c.rate_over_j) {
            (Some(_), Some(_)) => return Err(Error::Config("give either rate or rate_over_j, not both".into())),
            (Some(r), None) => self.frequency(r),
            (None, Some(r)) => r * spec.hopping,
            (None, None) => 0.0,
        };
        let mut ch = ResetChannel::new(c.kind, rate);
        ch.site = c.site;
        ch.validate(spec).map_err(|e| Error::Config(e.to_string()))?;
        Ok(ch)
    }

    pub fn noise(&self) -> Result<NoiseModel> {
        let n = &self.noise;
        if self.units == UnitMode::Dimensionless && n.temperature != 0.0 {
            return Err(Error::Config("temperature needs physical units".into()));
        }
        let m = NoiseModel::from_times(
            n.t1.unwrap_or(f64::INFINITY),
            n.t_phi.unwrap_or(f64::INFINITY),
            n.temperature,
        );
        m.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(m)
    }

    pub fn simulation_config(&self) -> Result<SimulationConfig> {
        let spec = self.lattice_spec()?;
        let channel = self.channel(&spec)?;
        let s = &self.simulation;
        let t_max = match (s.t_max, s.t_max_times_j) {
            (Some(_), Some(_)) => return Err(Error::Config("give either t_max or t_max_times_j, not both".into())),
            (Some(t), None) => t,
            (None, Some(t)) => t / spec.hopping,
            (None, None) => default_t_max(&spec, &channel)?,
        };
        let dt = s.dt.unwrap_or_else(|| default_time_step(&spec, &channel));
        let stride = match s.observable_stride {
            Some(k) => k,
            None => ((t_max / (s.points.max(1) as f64 * dt)).ceil() as usize).max(1),
        };
        let cfg = SimulationConfig {
            lattice: spec,
            channel,
            noise: self.noise()?,
            initial_coding_state: s.initial_state,
            t_max,
            dt,
            n_trajectories: s.n_trajectories,
            master_seed: s.seed,
            observable_stride: stride,
            disorder_override: s
                .disorder_override
                .as_ref()
                .map(|d| d.iter().map(|&x| self.frequency(x)).collect()),
            jump_scheme: s.jump_scheme,
            propagator: PropagatorOptions::default(),
            threads: s.threads,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let base = self.simulation_config()?;
        let sw = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("missing [sweep] section".into()))?;
        let raw = match (&sw.values, &sw.range) {
            (Some(v), None) => v.clone(),
            (None, Some(r)) => r.values()?,
            _ => return Err(Error::Config("give exactly one of sweep.values and sweep.range".into())),
        };
        let values = raw
            .into_iter()
            .map(|v| match sw.parameter {
                SweptParameter::ChannelRate if sw.relative_to_j => v * base.lattice.hopping,
                SweptParameter::LengthL => v,
                _ => self.frequency(v),
            })
            .collect();
        let spec = SweepSpec {
            base,
            swept_parameter: sw.parameter,
            values,
            derived_outputs: sw.outputs.clone(),
            scale_rate_with_propagation: sw.scale_rate_with_propagation,
            auto_t_max: sw.auto_t_max,
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

/// One check of the oracle suite run by `transmon-lru verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleCheck {
    /// Passes when `|value - reference| <= tolerance`.
    pub fn absolute(name: &str, value: f64, reference: f64, tolerance: f64) -> Self {
        OracleCheck {
            name: name.into(),
            value,
            reference,
            tolerance,
            passed: (value - reference).abs() <= tolerance,
        }
    }
}

/// Closed forms compared against direct numerical evaluation.
pub fn verify_oracles() -> Result<Vec<OracleCheck>> {
    use crate::analytics::{
        diss_norm_exact_l2, disintegration_threshold, disintegration_threshold_newton, liouvillian_qubit_gap,
        two_site_populations, PairState, TwoSiteParams,
    };
    use crate::lattice::{
        build_bose_hubbard, build_effective_nonhermitian, build_effective_propagation, DisorderRealization,
        NonHermitianKind,
    };
    use crate::observables::first_local_minimum;
    use crate::propagator::{propagate_nonhermitian_norm, ExactPropagator, StateVector};
    use nalgebra::DMatrix;

    let mut checks = Vec::new();

    let a = disintegration_threshold()?;
    let b = disintegration_threshold_newton()?;
    checks.push(OracleCheck::absolute("disintegration threshold, bisection vs Newton", a, b, 1e-8));

    let (u, j, dw) = (12.0, 1.0, 3.0);
    let spec = LatticeSpec::new(2, 0.0, u, j, 0.0)?;
    let real = DisorderRealization::from_detunings(&spec, &[dw, -dw])?;
    let h = build_bose_hubbard(&real)?;
    let fock = spec.fock_basis()?;
    let (i20, i02, i11) = (fock.index_of(&[2, 0]), fock.index_of(&[0, 2]), fock.index_of(&[1, 1]));
    let exact = ExactPropagator::new(&h);
    let params = TwoSiteParams::new(u, j, dw, 0.0)?;
    let mut worst: f64 = 0.0;
    for state in [PairState::Localized, PairState::Symmetric] {
        let mut psi = vec![C64::new(0.0, 0.0); fock.dimension()];
        match state {
            PairState::Localized => psi[i20] = C64::new(1.0, 0.0),
            PairState::Symmetric => {
                psi[i20] = C64::new(0.5f64.sqrt(), 0.0);
                psi[i02] = C64::new(0.5f64.sqrt(), 0.0);
            }
        }
        for k in 0..40 {
            let t = 0.05 * k as f64;
            let out = exact.propagate(&psi, t);
            let (r20, r02, r11) = two_site_populations(&params, t, state)?;
            worst = worst
                .max((out[i20].norm_sqr() - r20).abs())
                .max((out[i02].norm_sqr() - r02).abs())
                .max((out[i11].norm_sqr() - r11).abs());
        }
    }
    checks.push(OracleCheck::absolute("two-site populations vs exact propagation", worst, 0.0, 1e-9));

    let (jp, mut worst) = (1.0, 0.0f64);
    let spec = LatticeSpec::new(2, 0.0, 2.0, 1.0, 0.0)?;
    let real = DisorderRealization::from_detunings(&spec, &[0.0, 0.0])?;
    let hp = build_effective_propagation(&real)?;
    let times: Vec<f64> = (0..60).map(|k| 0.1 * k as f64).collect();
    for rate in [0.3, 1.7, 2.6, 9.0] {
        let heff = build_effective_nonhermitian(&hp, 1, rate, NonHermitianKind::Dissipation)?;
        let norms = propagate_nonhermitian_norm(&heff, &StateVector::basis_state(2, 0), &times)?;
        for (&t, n) in times.iter().zip(norms) {
            worst = worst.max((diss_norm_exact_l2(rate, jp, t)? - n).abs());
        }
    }
    checks.push(OracleCheck::absolute("two-site decay norm vs non-Hermitian propagation", worst, 0.0, 1e-9));

    let (delta, beta, rate) = (1.0, 0.1, 2.0);
    let i = C64::new(0.0, 1.0);
    let z = C64::new(0.0, 0.0);
    #[rustfmt::skip]
    let l = DMatrix::from_row_slice(4, 4, &[
        z, i * beta, -i * beta, z,
        i * beta, -rate - 2.0 * i * delta, z, -i * beta,
        -i * beta, z, -rate + 2.0 * i * delta, i * beta,
        z, -i * beta, i * beta, z,
    ]);
    let slow = l
        .eigenvalues()
        .map(|e| {
            e.iter()
                .filter(|e| e.norm() > 1e-9)
                .map(|e| e.re)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .unwrap_or(f64::NAN);
    let gap = liouvillian_qubit_gap(delta, beta, rate).re;
    checks.push(OracleCheck::absolute(
        "perturbative Liouvillian gap vs 4x4 spectrum (relative)",
        gap / slow,
        1.0,
        0.05,
    ));

    let spec = LatticeSpec::new(2, 0.0, 50.0, 1.0, 0.0)?;
    let t_prop = propagation_time(1.0, 50.0)?;
    let mut cfg = SimulationConfig::new(spec, ResetChannel::off(), CodingState::Ket2);
    // sampling once per disintegration period removes the fast |11⟩ admixture
    let period = 2.0 * std::f64::consts::PI / (50.0f64.powi(2) + 16.0).sqrt();
    cfg.dt = period / 20.0;
    cfg.observable_stride = 20;
    cfg.t_max = (2.0 * t_prop / period).ceil() * period;
    let obs = run_ensemble(&cfg)?;
    let t_min = first_local_minimum(&obs.time_grid, &obs.leakage_site1.mean).map_or(f64::NAN, |m| m.0);
    checks.push(OracleCheck::absolute(
        "transport: first leakage minimum on the coding site / T_prop",
        t_min / t_prop,
        1.0,
        0.1,
    ));
    Ok(checks)
}
