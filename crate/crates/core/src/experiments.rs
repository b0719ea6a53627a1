//! Desk-scale experiment runners with versioned CSV output, a JSON report
//! and a manifest that is sufficient to reproduce every emitted table.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{
    equal_power_baseline, joint_optimal_solve, stochastic_bandwidth_solve, water_filling_solve, PowerMode, SaOptions,
};
use crate::channel::{derive_seed, draw_road_distance, pathloss_gain, sample_fading, FadingKind, SystemConfig};
use crate::error::{Error, Result};
use crate::qos::{qos_violation, QosTarget, RateModel};
use crate::trainer::{
    pretrain_finetune_run, train_joint_bw_power, train_single_user_bandwidth, train_supervised_bandwidth,
    train_water_filling, BandwidthNet, ConvergenceOptions, JointInit, JointOptions, MobilityScenario, SingleUserOptions,
    SlotCount, WaterFillingOptions, WaterFillingProblem,
};

/// Version stamped into every manifest and CSV schema record.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    BandwidthCcdf,
    JointBandwidthCurve,
    ConvergenceTable,
    WaterFillingCheck,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::BandwidthCcdf,
        Scenario::JointBandwidthCurve,
        Scenario::ConvergenceTable,
        Scenario::WaterFillingCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::BandwidthCcdf => "bandwidth_ccdf",
            Scenario::JointBandwidthCurve => "joint_bandwidth_curve",
            Scenario::ConvergenceTable => "convergence_table",
            Scenario::WaterFillingCheck => "water_filling_check",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Scenario::BandwidthCcdf => 100,
            Scenario::JointBandwidthCurve => 200,
            Scenario::ConvergenceTable => 300,
            Scenario::WaterFillingCheck => 400,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Sizes that finish within minutes on one core.
    Desk,
    /// Full-size trial and user counts.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcdfSizes {
    pub options: SingleUserOptions,
    pub test_points: usize,
    /// Labelled `(α, W*)` pairs for the supervised arm, shared by all trials.
    pub labels: usize,
    /// Fading draws per test point when estimating `ν`.
    pub nu_draws: usize,
    pub solver: SaOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointCurveSizes {
    pub users: Vec<usize>,
    pub slots: u64,
    pub validation_draws: usize,
    /// Distance of every user in the symmetric sub-scenario.
    pub symmetric_distance_m: f64,
    /// Also run users dropped uniformly on the road.
    pub asymmetric: bool,
    pub solver: SaOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSizes {
    pub users: usize,
    pub options: ConvergenceOptions,
    pub mobility: MobilityScenario,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterFillingSizes {
    pub distance_m: f64,
    pub bandwidth_hz: f64,
    /// `αP_ave/(N₀W)` in dB.
    pub mean_snr_db: f64,
    pub fading: FadingKind,
    pub eval_draws: usize,
    pub options: WaterFillingOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub scale: Scale,
    pub trials: usize,
    pub seed: u64,
    pub config: SystemConfig,
    pub output_dir: PathBuf,
    pub ccdf: CcdfSizes,
    pub joint: JointCurveSizes,
    pub convergence: ConvergenceSizes,
    pub water_filling: WaterFillingSizes,
}

impl ExperimentSpec {
    pub fn new(scenario: Scenario, scale: Scale) -> Self {
        let full = scale == Scale::Paper;
        let trials = match (scenario, full) {
            (_, true) => 100,
            (Scenario::JointBandwidthCurve, false) => 1,
            (Scenario::WaterFillingCheck, false) => 5,
            _ => 20,
        };
        let ccdf = CcdfSizes {
            options: SingleUserOptions::default(),
            test_points: if full { 1000 } else { 200 },
            labels: 10_000,
            nu_draws: 100_000,
            solver: SaOptions::default(),
        };
        let joint = JointCurveSizes {
            users: if full { vec![5, 10, 15, 20, 25, 30, 35, 40] } else { vec![5, 10, 20] },
            slots: 5000,
            validation_draws: 100_000,
            symmetric_distance_m: 250.0,
            asymmetric: true,
            solver: SaOptions::default(),
        };
        let mut conv = ConvergenceOptions::default();
        if full {
            conv.pretrain_slots = 10_000;
            conv.joint.max_slots = 10_000;
        }
        let convergence = ConvergenceSizes {
            users: if full { 40 } else { 5 },
            options: conv,
            mobility: MobilityScenario::default(),
        };
        let water_filling = WaterFillingSizes {
            distance_m: 250.0,
            bandwidth_hz: 1e6,
            mean_snr_db: 0.0,
            fading: FadingKind::Exponential,
            eval_draws: 200_000,
            options: WaterFillingOptions::default(),
        };
        Self {
            scenario,
            scale,
            trials,
            seed: 1,
            config: SystemConfig::default(),
            output_dir: PathBuf::from("results").join(scenario.name()),
            ccdf,
            joint,
            convergence,
            water_filling,
        }
    }

    /// Minimal sizes that exercise every code path in seconds.
    pub fn smoke(scenario: Scenario) -> Self {
        let mut s = Self::new(scenario, Scale::Desk);
        s.trials = 1;
        let quick = SaOptions {
            min_iters: 2000,
            validation_draws: 5000,
            gap_tol: 0.02,
            ..SaOptions::default()
        };
        s.ccdf.options.iterations = 10;
        s.ccdf.test_points = 4;
        s.ccdf.labels = 4;
        s.ccdf.nu_draws = 500;
        s.ccdf.solver = quick;
        s.joint.users = vec![2, 3];
        s.joint.slots = 5;
        s.joint.validation_draws = 500;
        s.joint.solver = quick;
        s.convergence.users = 2;
        s.convergence.options.pretrain_slots = 5;
        s.convergence.options.joint.max_slots = 5;
        s.convergence.options.joint.validation_draws = 200;
        s.water_filling.options.iterations = 20;
        s.water_filling.eval_draws = 1000;
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.trials == 0 {
            return bad("trials");
        }
        match self.scenario {
            Scenario::BandwidthCcdf => {
                if self.ccdf.test_points == 0 || self.ccdf.labels == 0 || self.ccdf.nu_draws == 0 {
                    return bad("test points, labels and draws");
                }
            }
            Scenario::JointBandwidthCurve => {
                if self.joint.users.is_empty() || self.joint.users.contains(&0) || self.joint.slots == 0 {
                    return bad("user counts and slots");
                }
            }
            Scenario::ConvergenceTable => {
                if self.convergence.users == 0 || self.convergence.options.joint.max_slots == 0 {
                    return bad("users and slot cap");
                }
            }
            Scenario::WaterFillingCheck => {
                if !(self.water_filling.bandwidth_hz > 0.0) || self.water_filling.eval_draws == 0 {
                    return bad("bandwidth and draws");
                }
            }
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, self.scenario.stream(), trial as u64)
    }
}

// ---------------------------------------------------------------------------
// CCDF tables
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcdfTable {
    pub thresholds: Vec<f64>,
    /// Empirical `P(X > threshold)`.
    pub exceed_prob: Vec<f64>,
    pub n_samples: usize,
}

/// `n` points log-spaced over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Fraction of `samples` strictly above `x`.
pub fn exceedance(samples: &[f64], x: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|&&s| s > x).count() as f64 / samples.len() as f64
}

/// Nearest-rank quantile of `samples` at `q ∈ [0, 1]`.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

impl CcdfTable {
    pub fn from_samples(samples: &[f64], thresholds: &[f64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let exceed_prob = thresholds
            .iter()
            .map(|&x| {
                if n == 0 {
                    0.0
                } else {
                    (n - sorted.partition_point(|&s| s <= x)) as f64 / n as f64
                }
            })
            .collect();
        Self {
            thresholds: thresholds.to_vec(),
            exceed_prob,
            n_samples: n,
        }
    }

    /// The default grid: 200 points from 1e-5 to 1.
    pub fn standard(samples: &[f64]) -> Self {
        Self::from_samples(samples, &log_grid(1e-5, 1.0, 200))
    }
}

// ---------------------------------------------------------------------------
// Versioned CSV emission
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableSchema {
    pub name: &'static str,
    pub version: u32,
    pub columns: &'static [&'static str],
}

pub const CCDF_SCHEMA: TableSchema = TableSchema {
    name: "ccdf",
    version: 1,
    columns: &["arm", "metric", "threshold", "exceed_prob", "n_samples"],
};

pub const CCDF_TRIALS_SCHEMA: TableSchema = TableSchema {
    name: "ccdf_trials",
    version: 1,
    columns: &["trial", "seed", "status", "arm", "median_sigma", "p99_sigma", "median_nu", "p99_nu"],
};

pub const JOINT_CURVE_SCHEMA: TableSchema = TableSchema {
    name: "joint_curve",
    version: 1,
    columns: &["scenario", "k", "policy", "trial", "sum_w_hz", "feasible", "max_gap"],
};

pub const CONVERGENCE_PAIRS_SCHEMA: TableSchema = TableSchema {
    name: "convergence_pairs",
    version: 1,
    columns: &["trial", "seed", "random_slots", "random_censored", "pretrained_slots", "pretrained_censored"],
};

pub const CONVERGENCE_QUANTILES_SCHEMA: TableSchema = TableSchema {
    name: "convergence_quantiles",
    version: 1,
    columns: &["arm", "quantile", "slots", "censored_trials"],
};

pub const WATER_FILLING_SCHEMA: TableSchema = TableSchema {
    name: "water_filling",
    version: 1,
    columns: &["trial", "seed", "optimal_capacity_bps", "learned_capacity_bps", "flat_capacity_bps", "capacity_gap", "power_residual", "lambda"],
};

/// Record of one emitted file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub file: String,
    pub schema: String,
    pub version: u32,
    pub rows: usize,
    pub sha256: String,
}

fn schema_err(table: &str, reason: String) -> Error {
    Error::Schema {
        table: table.into(),
        reason,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Writes `rows` under `schema` and re-reads the file to check it.
pub fn write_table(dir: &Path, schema: &TableSchema, rows: &[Vec<String>]) -> Result<FileRecord> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != schema.columns.len() {
            return Err(schema_err(schema.name, format!(
                "{} row {i} has {} fields, expected {}",
                schema.name,
                r.len(),
                schema.columns.len()
            )));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(schema.columns)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| schema_err(schema.name, e.to_string()))?;
    let file = format!("{}.csv", schema.name);
    let path = dir.join(&file);
    fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
    let checked = check_table(&path, schema)?;
    if checked != rows.len() {
        return Err(schema_err(schema.name, format!("{file}: wrote {} rows, read back {checked}", rows.len())));
    }
    Ok(FileRecord {
        file,
        schema: schema.name.into(),
        version: schema.version,
        rows: rows.len(),
        sha256: sha256_hex(&bytes),
    })
}

/// Verifies the header and row arity of a CSV file; returns the row count.
pub fn check_table(path: &Path, schema: &TableSchema) -> Result<usize> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != schema.columns {
        return Err(schema_err(schema.name, format!(
            "{}: header {:?} does not match schema {} v{}",
            path.display(),
            header,
            schema.name,
            schema.version
        )));
    }
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != schema.columns.len() || rec.iter().any(str::is_empty) {
            return Err(schema_err(schema.name, format!("{}: malformed row {n}", path.display())));
        }
        n += 1;
    }
    Ok(n)
}

fn num(x: f64) -> String {
    format!("{x}")
}

// ---------------------------------------------------------------------------
// Reports and manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub n_samples: usize,
    pub median_sigma: f64,
    pub p99_sigma: f64,
    pub median_nu: f64,
    pub p99_nu: f64,
    pub sigma_exceed_1pct: f64,
    pub sigma_exceed_2pct: f64,
    pub nu_exceed_1pct: f64,
    pub nu_exceed_2pct: f64,
}

impl ArmSummary {
    fn new(sigma: &[f64], nu: &[f64]) -> Self {
        Self {
            n_samples: sigma.len(),
            median_sigma: quantile(sigma, 0.5),
            p99_sigma: quantile(sigma, 0.99),
            median_nu: quantile(nu, 0.5),
            p99_nu: quantile(nu, 0.99),
            sigma_exceed_1pct: exceedance(sigma, 0.01),
            sigma_exceed_2pct: exceedance(sigma, 0.02),
            nu_exceed_1pct: exceedance(nu, 0.01),
            nu_exceed_2pct: exceedance(nu, 0.02),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcdfReport {
    pub trials_ok: usize,
    pub trials_failed: usize,
    pub unsupervised: ArmSummary,
    pub supervised: ArmSummary,
    pub checks: Vec<Check>,
    /// Probability resolution of the pooled samples.
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub scenario: String,
    pub k: usize,
    pub policy: String,
    pub trial: usize,
    pub sum_w_hz: f64,
    pub feasible: bool,
    pub max_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointCurveReport {
    pub points: Vec<CurvePoint>,
    pub checks: Vec<Check>,
    pub omitted_baselines: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub pairs: usize,
    pub pretrain_converged: usize,
    pub faster_fraction: f64,
    pub median_speedup: f64,
    pub random_quantiles: Vec<(f64, u64)>,
    pub pretrained_quantiles: Vec<(f64, u64)>,
    pub random_censored: usize,
    pub pretrained_censored: usize,
    pub checks: Vec<Check>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterFillingReport {
    pub trials: usize,
    pub max_capacity_gap: f64,
    pub max_power_residual: f64,
    pub flat_power_gap: f64,
    pub checks: Vec<Check>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    BandwidthCcdf(CcdfReport),
    JointBandwidthCurve(JointCurveReport),
    ConvergenceTable(ConvergenceReport),
    WaterFillingCheck(WaterFillingReport),
}

impl Report {
    pub fn checks(&self) -> &[Check] {
        match self {
            Report::BandwidthCcdf(r) => &r.checks,
            Report::JointBandwidthCurve(r) => &r.checks,
            Report::ConvergenceTable(r) => &r.checks,
            Report::WaterFillingCheck(r) => &r.checks,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.passed)
    }

    /// Caveats copied into the manifest.
    pub fn notes(&self) -> Vec<String> {
        match self {
            Report::BandwidthCcdf(r) => vec![r.note.clone()],
            Report::JointBandwidthCurve(r) => r.omitted_baselines.iter().map(|b| format!("baseline omitted: {b}")).collect(),
            Report::ConvergenceTable(_) => {
                vec!["a trial converges at the first checked slot with zeta and xi both below tolerance; censored trials count at the slot cap".into()]
            }
            Report::WaterFillingCheck(_) => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub build_id: String,
    pub spec: ExperimentSpec,
    pub trial_seeds: Vec<u64>,
    pub config_hash: String,
    pub files: Vec<FileRecord>,
    pub notes: Vec<String>,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(schema_err("manifest", format!(
                "manifest schema v{} is not supported (expected v{SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

pub fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!("pdlearn-{}-{profile}", env!("CARGO_PKG_VERSION"))
}

/// Everything one run produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: Report,
    pub manifest: Manifest,
}

/// Runs `spec`, writing CSV tables, `report.json` and `manifest.json` into
/// `spec.output_dir`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let start = Instant::now();
    let dir = &spec.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (report, mut files) = match spec.scenario {
        Scenario::BandwidthCcdf => run_bandwidth_ccdf(spec)?,
        Scenario::JointBandwidthCurve => run_joint_bandwidth_curve(spec)?,
        Scenario::ConvergenceTable => run_convergence_table(spec)?,
        Scenario::WaterFillingCheck => run_water_filling_check(spec)?,
    };
    let report_bytes = serde_json::to_vec_pretty(&report)?;
    let report_path = dir.join("report.json");
    fs::write(&report_path, &report_bytes).map_err(|e| io_err(&report_path, e))?;
    files.push(FileRecord {
        file: "report.json".into(),
        schema: "report".into(),
        version: SCHEMA_VERSION,
        rows: report.checks().len(),
        sha256: sha256_hex(&report_bytes),
    });
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        build_id: build_id(),
        spec: spec.clone(),
        trial_seeds: (0..spec.trials).map(|t| spec.trial_seed(t)).collect(),
        config_hash: spec.config.hash(),
        files,
        notes: report.notes(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| io_err(&manifest_path, e))?;
    Ok(ExperimentOutput { report, manifest })
}

/// Re-runs the experiment recorded in `manifest` into `output_dir`.
pub fn rerun_from_manifest(manifest: &Manifest, output_dir: &Path) -> Result<ExperimentOutput> {
    if manifest.config_hash != manifest.spec.config.hash() {
        return Err(Error::Config("manifest config hash does not match its config".into()));
    }
    let mut spec = manifest.spec.clone();
    spec.output_dir = output_dir.to_path_buf();
    run_experiment(&spec)
}

// ---------------------------------------------------------------------------
// Single-user bandwidth CCDFs
// ---------------------------------------------------------------------------

fn road_alphas(cfg: &SystemConfig, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| pathloss_gain(draw_road_distance(cfg, &mut rng), cfg).expect("cell distances are positive"))
        .collect()
}

fn optimal_bandwidths(spec: &ExperimentSpec, alphas: &[f64], seed: u64) -> Result<Vec<f64>> {
    let cfg = &spec.config;
    let target = QosTarget::for_user(cfg, 0)?;
    let mode = PowerMode::SpectralDensity(cfg.power_density());
    alphas
        .par_iter()
        .enumerate()
        .map(|(i, &a)| Ok(stochastic_bandwidth_solve(a, mode, cfg, &target, &spec.ccdf.solver, derive_seed(seed, 1, i as u64))?.w))
        .collect()
}

struct ArmSamples {
    sigma: Vec<f64>,
    nu: Vec<f64>,
}

fn evaluate_arm(
    net: &BandwidthNet,
    spec: &ExperimentSpec,
    alphas: &[f64],
    optimal: &[f64],
    draws: &[Vec<f64>],
) -> Result<ArmSamples> {
    let cfg = &spec.config;
    let model = RateModel::new(cfg)?;
    let target = QosTarget::for_user(cfg, 0)?;
    let p0 = cfg.power_density();
    let w = net.bandwidths(alphas)?;
    let mut sigma = Vec::with_capacity(alphas.len());
    let mut nu = Vec::with_capacity(alphas.len());
    let mut rates = vec![0.0; spec.ccdf.nu_draws];
    for i in 0..alphas.len() {
        sigma.push((w[i] - optimal[i]).abs() / optimal[i]);
        for (r, &g) in rates.iter_mut().zip(&draws[i]) {
            *r = model.rate_density(w[i], p0, alphas[i], g);
        }
        nu.push(qos_violation(&rates, &target)?);
    }
    Ok(ArmSamples { sigma, nu })
}

struct CcdfTrial {
    unsup: ArmSamples,
    sup: ArmSamples,
}

fn ccdf_trial(spec: &ExperimentSpec, labels: &[(f64, f64)], trial: usize) -> Result<CcdfTrial> {
    let cfg = &spec.config;
    let seed = spec.trial_seed(trial);
    let opts = spec.ccdf.options;
    let unsup = train_single_user_bandwidth(cfg, &opts, seed)?;
    let sup = train_supervised_bandwidth(cfg, labels, &opts, seed)?;
    let alphas = road_alphas(cfg, spec.ccdf.test_points, derive_seed(seed, 2, 0));
    let optimal = optimal_bandwidths(spec, &alphas, derive_seed(seed, 3, 0))?;
    let draws: Vec<Vec<f64>> = (0..alphas.len())
        .map(|i| sample_fading(1, spec.ccdf.nu_draws, cfg, derive_seed(seed, 4, i as u64)))
        .collect();
    Ok(CcdfTrial {
        unsup: evaluate_arm(&unsup.policy.bandwidth, spec, &alphas, &optimal, &draws)?,
        sup: evaluate_arm(&sup.net, spec, &alphas, &optimal, &draws)?,
    })
}

/// Trains both single-user arms per trial and pools `σ` and `ν` on fresh
/// test gains.
pub fn run_bandwidth_ccdf(spec: &ExperimentSpec) -> Result<(Report, Vec<FileRecord>)> {
    let cfg = &spec.config;
    let label_seed = derive_seed(spec.seed, Scenario::BandwidthCcdf.stream(), u64::MAX);
    let label_alphas = road_alphas(cfg, spec.ccdf.labels, label_seed);
    let label_w = optimal_bandwidths(spec, &label_alphas, derive_seed(label_seed, 1, 0))?;
    let labels: Vec<(f64, f64)> = label_alphas.into_iter().zip(label_w).collect();
    let results: Vec<Result<CcdfTrial>> = (0..spec.trials).into_par_iter().map(|t| ccdf_trial(spec, &labels, t)).collect();

    let mut pooled = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut trial_rows = Vec::new();
    let mut failed = 0;
    for (t, r) in results.iter().enumerate() {
        let seed = spec.trial_seed(t).to_string();
        match r {
            Ok(tr) => {
                for (arm, s) in [("unsupervised", &tr.unsup), ("supervised", &tr.sup)] {
                    trial_rows.push(vec![
                        t.to_string(),
                        seed.clone(),
                        "ok".into(),
                        arm.into(),
                        num(quantile(&s.sigma, 0.5)),
                        num(quantile(&s.sigma, 0.99)),
                        num(quantile(&s.nu, 0.5)),
                        num(quantile(&s.nu, 0.99)),
                    ]);
                }
                pooled[0].extend_from_slice(&tr.unsup.sigma);
                pooled[1].extend_from_slice(&tr.unsup.nu);
                pooled[2].extend_from_slice(&tr.sup.sigma);
                pooled[3].extend_from_slice(&tr.sup.nu);
            }
            Err(e) => {
                failed += 1;
                let status = format!("failed: {e}");
                trial_rows.push(vec![t.to_string(), seed, status, "both".into(), "nan".into(), "nan".into(), "nan".into(), "nan".into()]);
            }
        }
    }
    let mut rows = Vec::new();
    for (arm, metric, samples) in [
        ("unsupervised", "sigma", &pooled[0]),
        ("unsupervised", "nu", &pooled[1]),
        ("supervised", "sigma", &pooled[2]),
        ("supervised", "nu", &pooled[3]),
    ] {
        let table = CcdfTable::standard(samples);
        for (x, p) in table.thresholds.iter().zip(&table.exceed_prob) {
            rows.push(vec![arm.into(), metric.into(), num(*x), num(*p), table.n_samples.to_string()]);
        }
    }
    let dir = &spec.output_dir;
    let files = vec![write_table(dir, &CCDF_SCHEMA, &rows)?, write_table(dir, &CCDF_TRIALS_SCHEMA, &trial_rows)?];

    let unsupervised = ArmSummary::new(&pooled[0], &pooled[1]);
    let supervised = ArmSummary::new(&pooled[2], &pooled[3]);
    let u = &unsupervised;
    let s = &supervised;
    let checks = vec![
        Check::new("trials_completed", failed == 0, format!("{failed} of {} trials failed", spec.trials)),
        Check::new("median_sigma", u.median_sigma <= 0.01, format!("median sigma {:.5} (limit 0.01)", u.median_sigma)),
        Check::new("p99_nu", u.p99_nu <= 0.02, format!("99th-percentile nu {:.5} (limit 0.02)", u.p99_nu)),
        Check::new(
            "sigma_dominates_supervised",
            u.sigma_exceed_1pct <= s.sigma_exceed_1pct && u.sigma_exceed_2pct <= s.sigma_exceed_2pct,
            format!(
                "P(sigma>1%) {:.4} vs {:.4}, P(sigma>2%) {:.4} vs {:.4}",
                u.sigma_exceed_1pct, s.sigma_exceed_1pct, u.sigma_exceed_2pct, s.sigma_exceed_2pct
            ),
        ),
        Check::new(
            "nu_dominates_supervised",
            u.nu_exceed_1pct <= s.nu_exceed_1pct && u.nu_exceed_2pct <= s.nu_exceed_2pct,
            format!(
                "P(nu>1%) {:.4} vs {:.4}, P(nu>2%) {:.4} vs {:.4}",
                u.nu_exceed_1pct, s.nu_exceed_1pct, u.nu_exceed_2pct, s.nu_exceed_2pct
            ),
        ),
    ];
    let note = format!(
        "{} pooled test points resolve probabilities down to about {:.0e}; medians and 99th percentiles stand in for the 99.999% levels",
        u.n_samples,
        1.0 / u.n_samples.max(1) as f64
    );
    let report = CcdfReport {
        trials_ok: spec.trials - failed,
        trials_failed: failed,
        unsupervised,
        supervised,
        checks,
        note,
    };
    Ok((Report::BandwidthCcdf(report), files))
}

// ---------------------------------------------------------------------------
// Total bandwidth versus number of users
// ---------------------------------------------------------------------------

fn learned_point(spec: &ExperimentSpec, scenario: &str, alphas: &[f64], trial: usize, seed: u64) -> Result<CurvePoint> {
    let cfg = &spec.config;
    let opts = JointOptions {
        max_slots: spec.joint.slots,
        validation_draws: spec.joint.validation_draws,
        check_every: spec.joint.slots,
        ..JointOptions::default()
    };
    let run = train_joint_bw_power(cfg, alphas, &opts, seed, JointInit::Random)?;
    let last = run.diagnostics.last().ok_or_else(|| Error::InvalidArgument("no diagnostics recorded".into()))?;
    let sum_w = run.state.sum_w();
    Ok(CurvePoint {
        scenario: scenario.into(),
        k: alphas.len(),
        policy: "learned_joint".into(),
        trial,
        sum_w_hz: sum_w,
        feasible: sum_w <= cfg.w_max_hz,
        max_gap: last.per_user_gap.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

fn equal_point(spec: &ExperimentSpec, scenario: &str, alphas: &[f64], trial: usize, seed: u64) -> Result<CurvePoint> {
    let eq = equal_power_baseline(&spec.config, alphas, &spec.joint.solver, seed)?;
    Ok(CurvePoint {
        scenario: scenario.into(),
        k: alphas.len(),
        policy: "equal_power".into(),
        trial,
        sum_w_hz: eq.sum_w,
        feasible: eq.feasible,
        max_gap: eq.per_user.iter().map(|s| s.gap).fold(f64::NEG_INFINITY, f64::max),
    })
}

fn curve_points(spec: &ExperimentSpec, k: usize, trial: usize) -> Result<Vec<CurvePoint>> {
    let cfg = &spec.config;
    let seed = derive_seed(spec.trial_seed(trial), 5, k as u64);
    let mut out = Vec::new();
    let edge = pathloss_gain(spec.joint.symmetric_distance_m, cfg)?;
    let sym = vec![edge; k];
    out.push(learned_point(spec, "symmetric", &sym, trial, seed)?);
    let opt = joint_optimal_solve(cfg, k, edge, &spec.joint.solver, seed)?;
    out.push(CurvePoint {
        scenario: "symmetric".into(),
        k,
        policy: "optimal_joint".into(),
        trial,
        sum_w_hz: opt.sum_w,
        feasible: opt.sum_w <= cfg.w_max_hz,
        max_gap: opt.per_user_gap.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    });
    out.push(equal_point(spec, "symmetric", &sym, trial, seed)?);
    if spec.joint.asymmetric {
        let alphas = road_alphas(cfg, k, derive_seed(seed, 6, 0));
        out.push(learned_point(spec, "asymmetric", &alphas, trial, seed)?);
        out.push(equal_point(spec, "asymmetric", &alphas, trial, seed)?);
    }
    Ok(out)
}

fn mean_by(points: &[CurvePoint], scenario: &str, policy: &str, k: usize) -> Option<f64> {
    let v: Vec<f64> = points
        .iter()
        .filter(|p| p.scenario == scenario && p.policy == policy && p.k == k)
        .map(|p| p.sum_w_hz)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Total bandwidth of the learned joint policy, the joint optimum
/// (symmetric users only) and equal power, for each user count.
pub fn run_joint_bandwidth_curve(spec: &ExperimentSpec) -> Result<(Report, Vec<FileRecord>)> {
    let jobs: Vec<(usize, usize)> = spec
        .joint
        .users
        .iter()
        .flat_map(|&k| (0..spec.trials).map(move |t| (k, t)))
        .collect();
    let results: Vec<Result<Vec<CurvePoint>>> = jobs.par_iter().map(|&(k, t)| curve_points(spec, k, t)).collect();
    let mut points = Vec::new();
    for r in results {
        points.extend(r?);
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.scenario.clone(),
                p.k.to_string(),
                p.policy.clone(),
                p.trial.to_string(),
                num(p.sum_w_hz),
                p.feasible.to_string(),
                num(p.max_gap),
            ]
        })
        .collect();
    let files = vec![write_table(&spec.output_dir, &JOINT_CURVE_SCHEMA, &rows)?];

    let mut checks = Vec::new();
    let mut ks = spec.joint.users.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut worst_rel: f64 = 0.0;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut ordering_ok = true;
    for p in points.iter().filter(|p| p.policy == "learned_joint") {
        worst_gap = worst_gap.max(p.max_gap);
        let same = |policy: &str| {
            points
                .iter()
                .find(|q| q.scenario == p.scenario && q.k == p.k && q.trial == p.trial && q.policy == policy)
                .map(|q| q.sum_w_hz)
        };
        if let Some(opt) = same("optimal_joint") {
            worst_rel = worst_rel.max((p.sum_w_hz - opt).abs() / opt);
        }
        if let Some(eq) = same("equal_power") {
            ordering_ok &= eq >= p.sum_w_hz;
        }
    }
    checks.push(Check::new(
        "learned_matches_optimal",
        worst_rel <= 0.03,
        format!("largest |learned - optimal| / optimal = {worst_rel:.4} (limit 0.03)"),
    ));
    checks.push(Check::new(
        "learned_per_user_gap",
        worst_gap <= 1e-3,
        format!("largest per-user validation qos_gap {worst_gap:.2e} (limit 1e-3)"),
    ));
    checks.push(Check::new(
        "equal_power_not_better",
        ordering_ok,
        "equal-power total bandwidth at least the learned joint total for every K and trial".into(),
    ));
    let mut monotone = true;
    for scenario in ["symmetric", "asymmetric"] {
        for policy in ["learned_joint", "optimal_joint", "equal_power"] {
            let series: Vec<f64> = ks.iter().filter_map(|&k| mean_by(&points, scenario, policy, k)).collect();
            monotone &= series.windows(2).all(|w| w[1] >= w[0]);
        }
    }
    checks.push(Check::new("monotone_in_k", monotone, "trial-mean total bandwidth nondecreasing in K".into()));
    let report = JointCurveReport {
        points,
        checks,
        omitted_baselines: vec![
            "multi-user diversity without frequency diversity".into(),
            "no multi-user diversity, no frequency diversity".into(),
        ],
    };
    Ok((Report::JointBandwidthCurve(report), files))
}

// ---------------------------------------------------------------------------
// Convergence with and without pre-training
// ---------------------------------------------------------------------------

const CONVERGENCE_QUANTILES: [f64; 3] = [0.5, 0.9, 0.99];

fn slot_quantiles(counts: &[SlotCount]) -> Vec<(f64, u64)> {
    let v: Vec<f64> = counts.iter().map(|c| c.slots as f64).collect();
    CONVERGENCE_QUANTILES.iter().map(|&q| (q, quantile(&v, q) as u64)).collect()
}

/// Paired mobility trials counting slots to convergence from a random start
/// and from a pre-trained policy.
pub fn run_convergence_table(spec: &ExperimentSpec) -> Result<(Report, Vec<FileRecord>)> {
    let c = &spec.convergence;
    let results: Vec<Result<_>> = (0..spec.trials)
        .into_par_iter()
        .map(|t| pretrain_finetune_run(&spec.config, c.users, &c.mobility, &c.options, spec.trial_seed(t)))
        .collect();
    let mut pairs = Vec::with_capacity(results.len());
    for r in results {
        pairs.push(r?);
    }
    let bool_s = |b: bool| b.to_string();
    let rows: Vec<Vec<String>> = pairs
        .iter()
        .enumerate()
        .map(|(t, p)| {
            vec![
                t.to_string(),
                spec.trial_seed(t).to_string(),
                p.random_init.slots.to_string(),
                bool_s(p.random_init.censored),
                p.pretrained.slots.to_string(),
                bool_s(p.pretrained.censored),
            ]
        })
        .collect();
    let random: Vec<SlotCount> = pairs.iter().map(|p| p.random_init).collect();
    let pre: Vec<SlotCount> = pairs.iter().map(|p| p.pretrained).collect();
    let random_censored = random.iter().filter(|c| c.censored).count();
    let pretrained_censored = pre.iter().filter(|c| c.censored).count();
    let rq = slot_quantiles(&random);
    let pq = slot_quantiles(&pre);
    let mut qrows = Vec::new();
    for (arm, qs, cens) in [("random_init", &rq, random_censored), ("pretrained", &pq, pretrained_censored)] {
        for (q, s) in qs.iter() {
            qrows.push(vec![arm.into(), num(*q), s.to_string(), cens.to_string()]);
        }
    }
    let dir = &spec.output_dir;
    let files = vec![
        write_table(dir, &CONVERGENCE_PAIRS_SCHEMA, &rows)?,
        write_table(dir, &CONVERGENCE_QUANTILES_SCHEMA, &qrows)?,
    ];
    let n = pairs.len();
    let faster = pairs
        .iter()
        .filter(|p| !p.pretrained.censored && p.pretrained.slots < p.random_init.slots)
        .count();
    let faster_fraction = faster as f64 / n as f64;
    let ratios: Vec<f64> = pairs
        .iter()
        .map(|p| p.random_init.slots as f64 / p.pretrained.slots.max(1) as f64)
        .collect();
    let median_speedup = quantile(&ratios, 0.5);
    let pretrain_converged = pairs.iter().filter(|p| p.pretrain_converged).count();
    let checks = vec![
        Check::new("pairs", n >= 20, format!("{n} paired trials (need at least 20)")),
        Check::new(
            "pretrained_faster",
            faster_fraction >= 0.95,
            format!("pre-trained strictly faster in {faster} of {n} pairs ({:.1}%, need 95%)", 100.0 * faster_fraction),
        ),
        Check::new(
            "median_speedup",
            median_speedup >= 10.0,
            format!("median per-pair speedup {median_speedup:.2}x (need 10x)"),
        ),
        Check::new(
            "median_ordering",
            pq[0].1 < rq[0].1,
            format!("median slots pre-trained {} vs random {}", pq[0].1, rq[0].1),
        ),
    ];
    let report = ConvergenceReport {
        pairs: n,
        pretrain_converged,
        faster_fraction,
        median_speedup,
        random_quantiles: rq,
        pretrained_quantiles: pq,
        random_censored,
        pretrained_censored,
        checks,
    };
    Ok((Report::ConvergenceTable(report), files))
}

// ---------------------------------------------------------------------------
// Water-filling sanity check
// ---------------------------------------------------------------------------

struct WfTrial {
    optimal: f64,
    learned: f64,
    flat: f64,
    residual: f64,
    lambda: f64,
}

fn water_filling_trial(spec: &ExperimentSpec, trial: usize) -> Result<WfTrial> {
    let wf = &spec.water_filling;
    let cfg = SystemConfig {
        fading_kind: wf.fading,
        ..spec.config.clone()
    };
    let seed = spec.trial_seed(trial);
    let alpha = pathloss_gain(wf.distance_m, &cfg)?;
    let n0 = cfg.n0_w_per_hz;
    let p_ave = 10f64.powf(wf.mean_snr_db / 10.0) * n0 * wf.bandwidth_hz / alpha;
    let problem = WaterFillingProblem {
        alpha,
        w: wf.bandwidth_hz,
        n0,
        p_ave,
    };
    let run = train_water_filling(&cfg, &problem, &wf.options, seed)?;
    let gains = sample_fading(1, wf.eval_draws, &cfg, derive_seed(seed, 7, 0));
    let support: Vec<(f64, f64)> = gains.iter().map(|&g| (g, 1.0)).collect();
    let opt = water_filling_solve(alpha, wf.bandwidth_hz, p_ave, &support, n0)?;
    let p = run.policy.powers(&gains)?;
    let w = wf.bandwidth_hz;
    let n = gains.len() as f64;
    let rate = |g: f64, pw: f64| w * (alpha * g * pw / (n0 * w)).ln_1p() / std::f64::consts::LN_2;
    let learned = gains.iter().zip(&p).map(|(&g, &pw)| rate(g, pw)).sum::<f64>() / n;
    let flat = gains.iter().map(|&g| rate(g, p_ave)).sum::<f64>() / n;
    let mean_p = p.iter().sum::<f64>() / n;
    Ok(WfTrial {
        optimal: opt.capacity,
        learned,
        flat,
        residual: mean_p / p_ave - 1.0,
        lambda: run.policy.lambda,
    })
}

/// Learned average-power policy against bisection water-filling on a common
/// set of fading draws.
pub fn run_water_filling_check(spec: &ExperimentSpec) -> Result<(Report, Vec<FileRecord>)> {
    let results: Vec<Result<WfTrial>> = (0..spec.trials).into_par_iter().map(|t| water_filling_trial(spec, t)).collect();
    let mut trials = Vec::with_capacity(results.len());
    for r in results {
        trials.push(r?);
    }
    let rows: Vec<Vec<String>> = trials
        .iter()
        .enumerate()
        .map(|(t, r)| {
            vec![
                t.to_string(),
                spec.trial_seed(t).to_string(),
                num(r.optimal),
                num(r.learned),
                num(r.flat),
                num(r.learned / r.optimal - 1.0),
                num(r.residual),
                num(r.lambda),
            ]
        })
        .collect();
    let files = vec![write_table(&spec.output_dir, &WATER_FILLING_SCHEMA, &rows)?];
    let max_capacity_gap = trials.iter().map(|r| (r.learned / r.optimal - 1.0).abs()).fold(0.0, f64::max);
    let max_power_residual = trials.iter().map(|r| r.residual).fold(f64::NEG_INFINITY, f64::max);
    let flat_power_gap = trials.iter().map(|r| 1.0 - r.flat / r.optimal).fold(f64::INFINITY, f64::min);
    let checks = vec![
        Check::new(
            "capacity_gap",
            max_capacity_gap <= 0.01,
            format!("largest relative capacity gap {max_capacity_gap:.5} (limit 0.01)"),
        ),
        Check::new(
            "power_residual",
            max_power_residual <= 0.01,
            format!("largest E[P]/P_ave - 1 = {max_power_residual:.5} (limit 0.01)"),
        ),
    ];
    let report = WaterFillingReport {
        trials: trials.len(),
        max_capacity_gap,
        max_power_residual,
        flat_power_gap,
        checks,
    };
    Ok((Report::WaterFillingCheck(report), files))
}
