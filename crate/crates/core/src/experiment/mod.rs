//! End-to-end pipelines behind the command-line subcommands.
//!
//! Every pipeline is a pure function of its configuration and the covariance factors:
//! all randomness comes from streams derived from `config.seed`, so re-running with the
//! same inputs reproduces every artifact byte for byte.

pub mod config;
pub mod report;

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

pub use config::{carve_size, CalibratorKind, CovarianceArg, ExperimentConfig, SignHoldout};

use crate::calibrators::{
    isotonic_fit, platt_fit, theoretical_ab, AngularPredictor, Calibrator, IntegratorCfg, PlattConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    bregman_losses, bregman_optimality_check, cal_error_at_level, reliability, BinScheme, BregmanReport, LevelError,
    OptimalityReport, ReliabilityReport,
};
use crate::link::{LinkFunction, LinkKind};
use crate::mestimator::{fit, FitConfig, FittedModel};
use crate::multiindex::{conditional_params, ConditionalParams, IndexLink, MultiAngularPredictor, MultiIndexModel, MultiIntegrator};
use crate::observable::{
    angle_estimate, compute_intermediates, inner_product_sq, sign_estimate, sign_from_projections, AngleEstimate,
    InnerProductEstimate, ObservableIntermediates, SignEstimate,
};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::synth::{
    bernoulli_labels, generate_labels, load_design_csv, sample_design, sample_projections, sample_true_weight,
    CovarianceFactors, Dataset, EntryDistribution, Provenance,
};
use report::{fmt_float, log_x_svg, reliability_csv, reliability_svg, table_csv, to_json_string, SCHEMA_VERSION};

/// Files produced by a run, as `(file name, contents)`.
pub type Artifacts = Vec<(String, String)>;

pub fn write_artifacts(dir: &Path, artifacts: &Artifacts) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, contents) in artifacts {
        fs::write(dir.join(name), contents)?;
    }
    Ok(())
}

/// Build the covariance factors described by `cfg`.
pub fn covariance_factors(cfg: &ExperimentConfig) -> Result<CovarianceFactors> {
    CovarianceFactors::from_spec(&cfg.covariance.to_spec(cfg.d)?)
}

fn check_dims(cfg: &ExperimentConfig, cov: &CovarianceFactors) -> Result<()> {
    if cov.dim() != cfg.d {
        return Err(Error::Contract(format!("covariance has dimension {}, config says d = {}", cov.dim(), cfg.d)));
    }
    Ok(())
}

/// The family fitted by Platt scaling for a given data link: the link itself when its
/// negative log-likelihood is smooth, the standard sigmoid otherwise.
pub fn platt_family(link: &LinkFunction) -> LinkFunction {
    match link.kind {
        LinkKind::ClippedRelu => LinkFunction::standard_sigmoid(),
        _ => *link,
    }
}

/// Probit link whose angular predictor stands in for `link` in the closed-form `(A, B)`.
fn probit_counterpart(link: &LinkFunction) -> Option<LinkFunction> {
    match link.kind {
        LinkKind::Probit => Some(*link),
        LinkKind::Sigmoid => Some(link.probit_bridge()),
        LinkKind::ClippedRelu => None,
    }
}

fn config_json(cfg: &ExperimentConfig) -> Value {
    json!({
        "n": cfg.n,
        "d": cfg.d,
        "cov": cfg.covariance.to_string(),
        "entry": cfg.entry.to_string(),
        "link": cfg.link.to_string(),
        "lambda": cfg.lambda,
        "seed": cfg.seed,
        "nTest": cfg.n_test,
        "nHoldoutPlatt": cfg.n_holdout_platt,
        "signHoldout": cfg.sign_holdout.to_string(),
        "bins": cfg.n_bins,
    })
}

fn config_text(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.out = None;
    c.to_text()
}

/// Training data, the fitted model and the true quantities it is judged against.
#[derive(Debug, Clone)]
pub struct FitStage {
    pub w_star: DVector<f64>,
    pub train: Dataset,
    /// Rows set aside for the sign estimate under [`SignHoldout::Carve`].
    pub carved: Option<Dataset>,
    pub model: FittedModel,
    /// `<w_star, w_hat>_Sigma`.
    pub inner_true: f64,
    pub theta_star: f64,
}

/// Sample `(w_star, X, y)` and fit the ridge-logistic estimator.
pub fn fit_stage(cfg: &ExperimentConfig, cov: &CovarianceFactors) -> Result<FitStage> {
    cfg.validate()?;
    check_dims(cfg, cov)?;
    let seed = cfg.seed;
    let w_star = sample_true_weight(cov, derive_seed(seed, Stream::Weight, 0));
    let x = sample_design(cfg.n, cov, cfg.entry, derive_seed(seed, Stream::Design, 0))?;
    let y = generate_labels(&x, &w_star, &cfg.link, derive_seed(seed, Stream::Labels, 0))?;
    let full = Dataset::new(x, y, Provenance::Synthetic { link: cfg.link, w_star: w_star.clone(), seed })?;
    let (train, carved) = match cfg.sign_holdout {
        SignHoldout::Carve { frac } => {
            let (head, tail) = full.split_tail(carve_size(cfg.n, frac))?;
            (head, Some(tail))
        }
        _ => (full, None),
    };
    let model = fit(&train, &FitConfig::with_lambda(cfg.lambda), &cov.sigma)?;
    let inner_true = w_star.dot(&(&cov.sigma * &model.w_hat));
    let theta_star = true_angle(inner_true, model.sigma_norm);
    Ok(FitStage { w_star, train, carved, model, inner_true, theta_star })
}

fn true_angle(inner: f64, sigma_norm: f64) -> f64 {
    (inner / sigma_norm).clamp(-1.0, 1.0).acos()
}

/// Projections `(w_hat^T x, w_star^T x)` of `n` fresh rows with labels drawn from `link`.
#[derive(Debug, Clone)]
pub struct FreshSample {
    pub logits: Vec<f64>,
    pub true_index: Vec<f64>,
    pub true_probs: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Draw `n` fresh rows from `stream`; index `2 * index` feeds the design and
/// `2 * index + 1` the labels.
pub fn fresh_sample(
    n: usize,
    cov: &CovarianceFactors,
    entry: EntryDistribution,
    w_hat: &DVector<f64>,
    w_star: &DVector<f64>,
    link: &LinkFunction,
    seed: u64,
    stream: Stream,
    index: u64,
) -> Result<FreshSample> {
    let proj = sample_projections(n, cov, entry, &[w_hat, w_star], derive_seed(seed, stream, 2 * index))?;
    let logits: Vec<f64> = proj.column(0).iter().copied().collect();
    let true_index: Vec<f64> = proj.column(1).iter().copied().collect();
    let true_probs: Vec<f64> = true_index.iter().map(|&g| link.eval(g)).collect();
    let mut rng = stream_rng(seed, stream, 2 * index + 1);
    let labels = bernoulli_labels(true_probs.iter().copied(), &mut rng);
    Ok(FreshSample { logits, true_index, true_probs, labels })
}

/// The observable angle estimate and everything it is built from.
#[derive(Debug, Clone)]
pub struct Observation {
    pub intermediates: ObservableIntermediates,
    pub inner_product: InnerProductEstimate,
    pub sign: SignEstimate,
    pub sign_holdout_size: usize,
    pub angle: AngleEstimate,
}

fn load_sign_holdout_file(path: &Path, d: usize) -> Result<(DMatrix<f64>, Vec<u8>)> {
    let m = load_design_csv(path)?;
    if m.ncols() != d + 1 {
        return Err(Error::Config(format!(
            "sign holdout file {} has {} columns, expected {} features plus a label column",
            path.display(),
            m.ncols(),
            d
        )));
    }
    let mut y = Vec::with_capacity(m.nrows());
    for i in 0..m.nrows() {
        let v = m[(i, d)];
        if v != 0.0 && v != 1.0 {
            return Err(Error::Ingest { row: i + 2, col: d + 1, msg: format!("label must be 0 or 1, got {v}") });
        }
        y.push(v as u8);
    }
    Ok((m.columns(0, d).into_owned(), y))
}

pub fn observe(cfg: &ExperimentConfig, cov: &CovarianceFactors, fs: &FitStage) -> Result<Observation> {
    let intermediates = compute_intermediates(&fs.train, &fs.model)?;
    let inner_product = inner_product_sq(&intermediates, &fs.train, &fs.model, &cov.inv_sqrt)?;
    let (sign, sign_holdout_size) = match &cfg.sign_holdout {
        SignHoldout::Carve { .. } => {
            let hold = fs.carved.as_ref().ok_or_else(|| Error::Contract("carved holdout missing".into()))?;
            (sign_estimate(&fs.model.w_hat, &hold.x, &hold.y)?, hold.n())
        }
        SignHoldout::Fresh { n } => {
            let s = fresh_sample(*n, cov, cfg.entry, &fs.model.w_hat, &fs.w_star, &cfg.link, cfg.seed, Stream::SignHoldout, 0)?;
            (sign_from_projections(s.logits.iter().copied(), &s.labels), *n)
        }
        SignHoldout::File(path) => {
            let (x, y) = load_sign_holdout_file(path, cfg.d)?;
            (sign_estimate(&fs.model.w_hat, &x, &y)?, y.len())
        }
    };
    let mut angle = angle_estimate(inner_product.a_star_sq, sign.sign, fs.model.sigma_norm)?;
    angle.denominator_flag = inner_product.denominator_flag;
    Ok(Observation { intermediates, inner_product, sign, sign_holdout_size, angle })
}

/// One calibrator scored on the test set.
#[derive(Debug, Clone)]
pub struct CalibratorOutcome {
    pub label: String,
    pub calibrator: Calibrator,
    pub reliability: ReliabilityReport,
    pub bregman: BregmanReport,
    pub level_errors: Vec<LevelError>,
    /// `max |delta|` over the merged level bins.
    pub max_level_error: f64,
}

impl CalibratorOutcome {
    fn json(&self) -> Value {
        json!({
            "name": self.label,
            "params": serde_json::to_value(&self.calibrator).unwrap_or(Value::Null),
            "ece": self.reliability.ece,
            "squared": self.bregman.squared,
            "kl": self.bregman.kl,
            "maxLevelError": self.max_level_error,
        })
    }
}

/// Score a calibrator on test logits with known true probabilities.
pub fn score_calibrator(
    label: &str,
    calibrator: Calibrator,
    test: &FreshSample,
    n_bins: usize,
    min_level_count: usize,
) -> Result<CalibratorOutcome> {
    let preds = calibrator.prepare()?.eval_many(&test.logits);
    let rel = reliability(&preds, &test.labels, Some(&test.true_probs), n_bins, BinScheme::EqualWidth)?;
    let bregman = bregman_losses(&preds, &test.true_probs)?;
    let level_errors = cal_error_at_level(&preds, &test.true_probs, n_bins, min_level_count)?;
    let max_level_error = level_errors.iter().map(|e| e.delta.abs()).fold(0.0, f64::max);
    Ok(CalibratorOutcome { label: label.to_string(), calibrator, reliability: rel, bregman, level_errors, max_level_error })
}

/// Bins used by the conditional-mean oracle: about 500 test points per bin.
pub fn oracle_bins(n_test: usize) -> usize {
    (n_test / 500).max(1)
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub config: ExperimentConfig,
    pub fit: FitStage,
    pub observation: Observation,
    pub test: FreshSample,
    pub outcomes: Vec<CalibratorOutcome>,
    pub optimality: OptimalityReport,
    pub warnings: Vec<String>,
}

impl SimulationResult {
    pub fn outcome(&self, label: &str) -> Option<&CalibratorOutcome> {
        self.outcomes.iter().find(|o| o.label == label)
    }

    /// `sqrt(a_star_sq)`, the magnitude estimate of `<w_star, w_hat>_Sigma`.
    pub fn inner_product_est(&self) -> f64 {
        self.observation.inner_product.a_star_sq.max(0.0).sqrt()
    }

    pub fn sign_correct(&self) -> bool {
        let truth = if self.fit.inner_true >= 0.0 { 1 } else { -1 };
        self.observation.sign.sign == truth
    }

    pub fn summary_json(&self, command: &str) -> Value {
        let fs = &self.fit;
        let ob = &self.observation;
        let im = &ob.intermediates;
        json!({
            "schema": SCHEMA_VERSION,
            "command": command,
            "config": config_json(&self.config),
            "nTrain": fs.train.n(),
            "fit": {
                "converged": fs.model.converged,
                "iterations": fs.model.iterations,
                "gradNorm": fs.model.grad_norm,
                "objective": fs.model.objective,
            },
            "sigmaNorm": fs.model.sigma_norm,
            "innerProductTrue": fs.inner_true,
            "innerProductEst": self.inner_product_est(),
            "innerProductSignedEst": f64::from(ob.sign.sign) * self.inner_product_est(),
            "aStarSq": ob.inner_product.a_star_sq,
            "denominatorFlag": ob.inner_product.denominator_flag,
            "gammaHat": im.gamma_hat,
            "gamma": im.gamma,
            "vHat": im.v_hat,
            "rHatSq": im.r_hat_sq,
            "sign": {
                "estimate": ob.sign.sign,
                "tie": ob.sign.tie,
                "correct": self.sign_correct(),
                "holdoutSize": ob.sign_holdout_size,
            },
            "thetaHat": ob.angle.theta_hat,
            "thetaStar": fs.theta_star,
            "calibrators": self.outcomes.iter().map(CalibratorOutcome::json).collect::<Vec<_>>(),
            "optimality": {
                "oracleBins": oracle_bins(self.config.n_test),
                "oracle": {"squared": self.optimality.oracle.squared, "kl": self.optimality.oracle.kl},
            },
            "warnings": self.warnings,
        })
    }

    /// `summary.json`, `reliability_<name>.csv` per calibrator, `config.txt` and,
    /// when `svg` is set, `reliability.svg`.
    pub fn artifacts(&self, command: &str, prefix: &str) -> Artifacts {
        let mut out = Vec::new();
        for o in &self.outcomes {
            out.push((format!("reliability_{prefix}{}.csv", o.label), reliability_csv(&o.reliability)));
        }
        if self.config.svg {
            let curves: Vec<(&str, &ReliabilityReport)> = self.outcomes.iter().map(|o| (o.label.as_str(), &o.reliability)).collect();
            let name = if prefix.is_empty() { "reliability.svg".to_string() } else { format!("reliability_{}.svg", prefix.trim_end_matches('_')) };
            out.push((name, reliability_svg(&curves)));
        }
        out.push(("summary.json".into(), to_json_string(&self.summary_json(command))));
        out.push(("config.txt".into(), config_text(&self.config)));
        out
    }
}

/// Fit, estimate the angle, recalibrate and score every requested calibrator.
pub fn run_simulate(cfg: &ExperimentConfig, cov: &CovarianceFactors) -> Result<SimulationResult> {
    let fs = fit_stage(cfg, cov)?;
    let observation = observe(cfg, cov, &fs)?;
    let link = cfg.link;
    let integrator = IntegratorCfg::default_for(&link);
    let sigma_norm = fs.model.sigma_norm;
    let mut warnings = Vec::new();

    let wants = |k: CalibratorKind| cfg.calibrators.contains(&k);
    let holdout = if wants(CalibratorKind::Platt) || wants(CalibratorKind::Isotonic) {
        Some(fresh_sample(cfg.n_holdout_platt, cov, cfg.entry, &fs.model.w_hat, &fs.w_star, &link, cfg.seed, Stream::PlattHoldout, 0)?)
    } else {
        None
    };

    let mut calibrators: Vec<(String, Calibrator)> = Vec::new();
    for &kind in &cfg.calibrators {
        let cal = match kind {
            CalibratorKind::Uncalibrated => Calibrator::Uncalibrated { link: LinkFunction::standard_sigmoid() },
            CalibratorKind::Angular => {
                Calibrator::Angular { theta: observation.angle.theta_hat, sigma_norm, link, integrator }
            }
            CalibratorKind::AngularTrue => Calibrator::Angular { theta: fs.theta_star, sigma_norm, link, integrator },
            CalibratorKind::Platt => {
                let h = holdout.as_ref().expect("holdout drawn when platt is requested");
                match platt_fit(&h.logits, &h.labels, &platt_family(&link), &PlattConfig::default()) {
                    Ok(f) => Calibrator::from_platt(&f),
                    Err(e @ (Error::DegenerateHoldout(_) | Error::Fit(_))) => {
                        warnings.push(format!("platt skipped: {}: {e}", e.name()));
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
            CalibratorKind::Isotonic => {
                let h = holdout.as_ref().expect("holdout drawn when isotonic is requested");
                Calibrator::from_isotonic(isotonic_fit(&h.logits, &h.labels)?)
            }
            CalibratorKind::Chance => Calibrator::Chance { link, integrator },
        };
        calibrators.push((kind.label().to_string(), cal));
    }

    let test = fresh_sample(cfg.n_test, cov, cfg.entry, &fs.model.w_hat, &fs.w_star, &link, cfg.seed, Stream::Test, 0)?;
    let mut outcomes = Vec::with_capacity(calibrators.len());
    for (label, cal) in &calibrators {
        outcomes.push(score_calibrator(label, cal.clone(), &test, cfg.n_bins, cfg.min_level_count)?);
    }
    let optimality = bregman_optimality_check(&test.logits, &test.true_probs, &calibrators, oracle_bins(cfg.n_test))?;
    Ok(SimulationResult { config: cfg.clone(), fit: fs, observation, test, outcomes, optimality, warnings })
}

/// One Platt fit in the convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct PlattConvergenceRow {
    pub size: usize,
    pub trial: usize,
    pub a_hat: f64,
    pub b_hat: f64,
    /// `max |platt(u) - angular(u)|` over the comparison grid.
    pub sup_distance: f64,
    /// Name of the error when the fit failed (for example a constant-label holdout).
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PlattConvergenceResult {
    pub config: ExperimentConfig,
    pub family: LinkFunction,
    pub theta_star: f64,
    pub sigma_norm: f64,
    /// Closed-form limits; NaN when the link has no probit counterpart.
    pub a_star: f64,
    pub b_star: f64,
    pub grid: Vec<f64>,
    pub rows: Vec<PlattConvergenceRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median over trials of a row statistic, per holdout size (failed fits excluded).
pub fn median_by_size(rows: &[PlattConvergenceRow], sizes: &[usize], stat: impl Fn(&PlattConvergenceRow) -> f64) -> Vec<f64> {
    sizes
        .iter()
        .map(|&s| median(rows.iter().filter(|r| r.size == s && r.error.is_none()).map(&stat).collect()))
        .collect()
}

impl PlattConvergenceResult {
    pub fn median_sup(&self) -> Vec<f64> {
        median_by_size(&self.rows, &self.config.sizes, |r| r.sup_distance)
    }

    pub fn median_param_error(&self) -> Vec<f64> {
        let (a, b) = (self.a_star, self.b_star);
        median_by_size(&self.rows, &self.config.sizes, |r| (r.a_hat - a).abs() + (r.b_hat - b).abs())
    }

    pub fn summary_json(&self) -> Value {
        let sup = self.median_sup();
        let perr = self.median_param_error();
        json!({
            "schema": SCHEMA_VERSION,
            "command": "platt-convergence",
            "config": config_json(&self.config),
            "aligned": self.config.aligned,
            "family": self.family.to_string(),
            "thetaStar": self.theta_star,
            "sigmaNorm": self.sigma_norm,
            "aStar": self.a_star,
            "bStar": self.b_star,
            "trials": self.rows.iter().map(|r| r.trial).max().map_or(0, |t| t + 1),
            "sizes": self.config.sizes.iter().enumerate().map(|(i, &s)| json!({
                "size": s,
                "medianSupDistance": sup[i],
                "medianParamError": perr[i],
                "failures": self.rows.iter().filter(|r| r.size == s && r.error.is_some()).count(),
            })).collect::<Vec<_>>(),
        })
    }

    pub fn artifacts(&self) -> Artifacts {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.size.to_string(),
                    r.trial.to_string(),
                    fmt_float(r.a_hat),
                    fmt_float(r.b_hat),
                    fmt_float(r.sup_distance),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .map(|mut v| {
                for c in v.iter_mut() {
                    if c == "null" {
                        c.clear();
                    }
                }
                v
            })
            .collect();
        let mut out = vec![
            ("platt_convergence.csv".to_string(), table_csv(&["n_holdout", "trial", "A_hat", "B_hat", "sup_distance", "error"], &rows)),
            ("summary.json".to_string(), to_json_string(&self.summary_json())),
            ("config.txt".to_string(), config_text(&self.config)),
        ];
        if self.config.svg {
            let xs: Vec<f64> = self.config.sizes.iter().map(|&s| s as f64).collect();
            out.push((
                "platt_convergence.svg".to_string(),
                log_x_svg("Platt vs angular, median sup distance", &xs, &[("sup distance", self.median_sup())]),
            ));
        }
        out
    }
}

/// Fit Platt scaling on fresh holdouts of increasing size and measure its distance to the
/// angular predictor at the true angle.
pub fn run_platt_convergence(cfg: &ExperimentConfig, cov: &CovarianceFactors) -> Result<PlattConvergenceResult> {
    if cfg.sizes.is_empty() || cfg.sizes.contains(&0) {
        return Err(Error::Config("holdout sizes must be positive and non-empty".into()));
    }
    if cfg.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("holdout sizes must be strictly ascending".into()));
    }
    let trials = cfg.trials.unwrap_or(10);
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let fs = fit_stage(cfg, cov)?;
    let link = cfg.link;
    let sigma_norm = fs.model.sigma_norm;
    let (w_hat, theta_star) = if cfg.aligned { (&fs.w_star * sigma_norm, 0.0) } else { (fs.model.w_hat.clone(), fs.theta_star) };

    let family = platt_family(&link);
    let (a_star, b_star) = match probit_counterpart(&link) {
        Some(p) => theoretical_ab(theta_star, sigma_norm, p.a, p.b),
        None => (f64::NAN, f64::NAN),
    };
    let angular = AngularPredictor::new(theta_star, sigma_norm, link, &IntegratorCfg::default_for(&link))?;
    let half = 4.0 * sigma_norm;
    let grid: Vec<f64> = (0..1000).map(|i| -half + 2.0 * half * i as f64 / 999.0).collect();
    let reference: Vec<f64> = grid.iter().map(|&u| angular.predict(u)).collect();

    let mut rows = Vec::with_capacity(cfg.sizes.len() * trials);
    for (si, &size) in cfg.sizes.iter().enumerate() {
        for trial in 0..trials {
            let index = (si * trials + trial) as u64;
            let h = fresh_sample(size, cov, cfg.entry, &w_hat, &fs.w_star, &link, cfg.seed, Stream::PlattHoldout, index)?;
            let row = match platt_fit(&h.logits, &h.labels, &family, &PlattConfig::default()) {
                Ok(f) => {
                    let sup = grid
                        .iter()
                        .zip(&reference)
                        .map(|(&u, &r)| (family.eval(f.a * u + f.b) - r).abs())
                        .fold(0.0, f64::max);
                    PlattConvergenceRow { size, trial, a_hat: f.a, b_hat: f.b, sup_distance: sup, error: None }
                }
                Err(e @ (Error::DegenerateHoldout(_) | Error::Fit(_))) => PlattConvergenceRow {
                    size,
                    trial,
                    a_hat: f64::NAN,
                    b_hat: f64::NAN,
                    sup_distance: f64::NAN,
                    error: Some(e.name().to_string()),
                },
                Err(e) => return Err(e),
            };
            rows.push(row);
        }
    }
    Ok(PlattConvergenceResult { config: cfg.clone(), family, theta_star, sigma_norm, a_star, b_star, grid, rows })
}

/// Two-sided 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    const Z: f64 = 1.959_963_984_540_054;
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = Z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone)]
pub struct SignMcResult {
    pub config: ExperimentConfig,
    pub inner_true: f64,
    pub holdout_size: usize,
    pub trials: usize,
    pub wrong: usize,
    pub ties: usize,
    pub rate: f64,
    pub wilson: (f64, f64),
}

impl SignMcResult {
    pub fn summary_json(&self) -> Value {
        json!({
            "schema": SCHEMA_VERSION,
            "command": "sign-mc",
            "config": config_json(&self.config),
            "innerProductTrue": self.inner_true,
            "trueSign": if self.inner_true >= 0.0 { 1 } else { -1 },
            "holdoutSize": self.holdout_size,
            "trials": self.trials,
            "wrong": self.wrong,
            "ties": self.ties,
            "errorRate": self.rate,
            "wilson95": [self.wilson.0, self.wilson.1],
        })
    }

    pub fn artifacts(&self) -> Artifacts {
        vec![
            ("summary.json".to_string(), to_json_string(&self.summary_json())),
            ("config.txt".to_string(), config_text(&self.config)),
        ]
    }
}

/// Fit once, then redraw the sign holdout `trials` times and count wrong signs.
pub fn run_sign_mc(cfg: &ExperimentConfig, cov: &CovarianceFactors) -> Result<SignMcResult> {
    let trials = cfg.trials.unwrap_or(5000);
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let holdout_size = match cfg.sign_holdout {
        SignHoldout::Carve { frac } => carve_size(cfg.n, frac),
        SignHoldout::Fresh { n } => n,
        SignHoldout::File(_) => {
            return Err(Error::Config("sign-mc redraws its holdouts and cannot use a holdout file".into()));
        }
    };
    let fs = fit_stage(cfg, cov)?;
    let truth: i8 = if fs.inner_true >= 0.0 { 1 } else { -1 };
    // All redraws come from one stream and are cut into consecutive blocks.
    let s = fresh_sample(trials * holdout_size, cov, cfg.entry, &fs.model.w_hat, &fs.w_star, &cfg.link, cfg.seed, Stream::Trial, 0)?;
    let mut wrong = 0;
    let mut ties = 0;
    for t in 0..trials {
        let r = t * holdout_size..(t + 1) * holdout_size;
        let est = sign_from_projections(s.logits[r.clone()].iter().copied(), &s.labels[r]);
        wrong += usize::from(est.sign != truth);
        ties += usize::from(est.tie);
    }
    Ok(SignMcResult {
        config: cfg.clone(),
        inner_true: fs.inner_true,
        holdout_size,
        trials,
        wrong,
        ties,
        rate: wrong as f64 / trials as f64,
        wilson: wilson_interval(wrong, trials),
    })
}

#[derive(Debug, Clone)]
pub struct UniversalityResult {
    pub entry: EntryDistribution,
    pub run: SimulationResult,
    pub gaussian: SimulationResult,
}

impl UniversalityResult {
    pub fn summary_json(&self) -> Value {
        let rows: Vec<Value> = self
            .run
            .outcomes
            .iter()
            .map(|o| {
                json!({
                    "name": o.label,
                    "ece": o.reliability.ece,
                    "eceGaussian": self.gaussian.outcome(&o.label).map_or(f64::NAN, |g| g.reliability.ece),
                })
            })
            .collect();
        json!({
            "schema": SCHEMA_VERSION,
            "command": "universality",
            "entry": self.entry.to_string(),
            "comparison": rows,
            "run": self.run.summary_json("universality"),
            "gaussian": self.gaussian.summary_json("universality"),
        })
    }

    pub fn artifacts(&self) -> Artifacts {
        let mut out: Artifacts = Vec::new();
        for (name, contents) in self.run.artifacts("universality", "") {
            if name.ends_with(".csv") || name.ends_with(".svg") {
                out.push((name, contents));
            }
        }
        for (name, contents) in self.gaussian.artifacts("universality", "gaussian_") {
            if name.ends_with(".csv") || name.ends_with(".svg") {
                out.push((name, contents));
            }
        }
        out.push(("summary.json".to_string(), to_json_string(&self.summary_json())));
        out.push(("config.txt".to_string(), config_text(&self.run.config)));
        out
    }
}

/// The simulation with a non-Gaussian design next to the same run with Gaussian entries.
pub fn run_universality(cfg: &ExperimentConfig, cov: &CovarianceFactors) -> Result<UniversalityResult> {
    if cfg.entry == EntryDistribution::Gaussian {
        return Err(Error::Config("universality compares non-Gaussian designs; use `simulate` for Gaussian entries".into()));
    }
    let run = run_simulate(cfg, cov)?;
    let mut g = cfg.clone();
    g.entry = EntryDistribution::Gaussian;
    let gaussian = run_simulate(&g, cov)?;
    Ok(UniversalityResult { entry: cfg.entry, run, gaussian })
}

/// Empirical cross-covariance of the residual `U = G - M S` with `S`, entry by entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCovCheck {
    pub samples: usize,
    /// `K x K`, row `j` is `U_j`, column `l` is `S_l`.
    pub cov: DMatrix<f64>,
    pub std_err: DMatrix<f64>,
    /// `max |cov_jl| / se_jl`.
    pub max_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct MultiIndexResult {
    pub config: ExperimentConfig,
    pub params: ConditionalParams,
    pub column_norms: DVector<f64>,
    pub reliability: ReliabilityReport,
    pub level_errors: Vec<LevelError>,
    pub max_level_error: f64,
    pub cross_cov: CrossCovCheck,
    /// For `K = 1`: largest difference between the multi-index predictions (and their
    /// reliability table) and the single-index angular pipeline.
    pub reduction_max_diff: Option<f64>,
    pub fell_back_to_mc: bool,
}

impl MultiIndexResult {
    pub fn summary_json(&self) -> Value {
        let mat = |m: &DMatrix<f64>| -> Value {
            (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>().into()
        };
        json!({
            "schema": SCHEMA_VERSION,
            "command": "multiindex",
            "config": config_json(&self.config),
            "k": self.config.k,
            "perturbation": self.config.perturbation,
            "columnNorms": self.column_norms.iter().copied().collect::<Vec<_>>(),
            "covG": mat(&self.params.cov_g),
            "R": mat(&self.params.r),
            "C": mat(&self.params.c),
            "mStar": mat(&self.params.m_star),
            "sigmaStar": mat(&self.params.sigma_star),
            "psdFlag": self.params.psd_flag,
            "fellBackToMonteCarlo": self.fell_back_to_mc,
            "ece": self.reliability.ece,
            "maxLevelError": self.max_level_error,
            "crossCov": {
                "samples": self.cross_cov.samples,
                "cov": mat(&self.cross_cov.cov),
                "stdErr": mat(&self.cross_cov.std_err),
                "maxRatio": self.cross_cov.max_ratio,
            },
            "reductionMaxDiff": self.reduction_max_diff,
        })
    }

    pub fn artifacts(&self) -> Artifacts {
        let mut out = vec![
            ("reliability_angular.csv".to_string(), reliability_csv(&self.reliability)),
            ("summary.json".to_string(), to_json_string(&self.summary_json())),
            ("config.txt".to_string(), config_text(&self.config)),
        ];
        if self.config.svg {
            out.push(("reliability.svg".to_string(), reliability_svg(&[("angular", &self.reliability)])));
        }
        out
    }
}

/// `K` true indices from the weight stream and fitted indices `w_hat_k = w_star_k + t xi_k`
/// with `xi_k` of unit `Sigma`-norm from the noise stream.
pub fn multiindex_model(cfg: &ExperimentConfig, cov: &CovarianceFactors) -> Result<MultiIndexModel> {
    let k = cfg.k;
    let cols_star: Vec<DVector<f64>> =
        (0..k).map(|j| sample_true_weight(cov, derive_seed(cfg.seed, Stream::Weight, j as u64))).collect();
    let cols_hat: Vec<DVector<f64>> = (0..k)
        .map(|j| &cols_star[j] + sample_true_weight(cov, derive_seed(cfg.seed, Stream::Noise, j as u64)) * cfg.perturbation)
        .collect();
    MultiIndexModel::new(
        DMatrix::from_columns(&cols_star),
        DMatrix::from_columns(&cols_hat),
        cov.sigma.clone(),
        IndexLink::Additive { links: vec![cfg.link; k] },
    )
}

/// Multi-index angular calibration at the true conditional parameters, with the
/// residual cross-covariance check and, for `K = 1`, the single-index reduction.
pub fn run_multiindex(cfg: &ExperimentConfig, cov: &CovarianceFactors) -> Result<MultiIndexResult> {
    if cfg.k == 0 {
        return Err(Error::Contract("multiindex needs K >= 1".into()));
    }
    if cfg.n_test == 0 || cfg.n_bins == 0 {
        return Err(Error::Contract("n-test and bins must be positive".into()));
    }
    check_dims(cfg, cov)?;
    let k = cfg.k;
    let model = multiindex_model(cfg, cov)?;
    let params = conditional_params(&model)?;
    let norms = model.column_norms();
    let predictor = MultiAngularPredictor::new(&params, &model.g, &MultiIntegrator::default())?;

    let directions: Vec<DVector<f64>> = (0..k)
        .map(|j| model.w_star.column(j).into_owned())
        .chain((0..k).map(|j| model.w_hat.column(j).into_owned()))
        .collect();
    let dir_refs: Vec<&DVector<f64>> = directions.iter().collect();
    let split = |proj: &DMatrix<f64>, i: usize| -> (Vec<f64>, Vec<f64>) {
        let g: Vec<f64> = (0..k).map(|j| proj[(i, j)]).collect();
        let s: Vec<f64> = (0..k).map(|j| proj[(i, k + j)] / norms[j]).collect();
        (g, s)
    };

    let proj = sample_projections(cfg.n_test, cov, cfg.entry, &dir_refs, derive_seed(cfg.seed, Stream::Test, 0))?;
    let mut preds = Vec::with_capacity(cfg.n_test);
    let mut true_probs = Vec::with_capacity(cfg.n_test);
    let mut s_first = Vec::with_capacity(cfg.n_test);
    for i in 0..cfg.n_test {
        let (g, s) = split(&proj, i);
        true_probs.push(model.g.eval_scalar(&g)?);
        preds.push(predictor.predict(&s)[0]);
        s_first.push(s[0]);
    }
    let labels = bernoulli_labels(true_probs.iter().copied(), &mut stream_rng(cfg.seed, Stream::Test, 1));
    let rel = reliability(&preds, &labels, Some(&true_probs), cfg.n_bins, BinScheme::EqualWidth)?;
    let level_errors = cal_error_at_level(&preds, &true_probs, cfg.n_bins, cfg.min_level_count)?;
    let max_level_error = level_errors.iter().map(|e| e.delta.abs()).fold(0.0, f64::max);

    let reduction_max_diff = if k == 1 {
        let theta = params.c[(0, 0)].clamp(-1.0, 1.0).acos();
        let single = AngularPredictor::new(theta, norms[0], cfg.link, &IntegratorCfg::default_for(&cfg.link))?;
        let single_preds: Vec<f64> = s_first.iter().map(|&s| single.predict(s * norms[0])).collect();
        let single_rel = reliability(&single_preds, &labels, Some(&true_probs), cfg.n_bins, BinScheme::EqualWidth)?;
        let pred_diff = preds.iter().zip(&single_preds).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let bin_diff = rel
            .bins
            .iter()
            .zip(&single_rel.bins)
            .filter(|(a, _)| a.count > 0)
            .map(|(a, b)| {
                let counts = if a.count == b.count { 0.0 } else { f64::INFINITY };
                counts.max((a.mean_predicted - b.mean_predicted).abs())
            })
            .fold((rel.ece - single_rel.ece).abs(), f64::max);
        Some(pred_diff.max(bin_diff))
    } else {
        None
    };

    let samples = cfg.trials.unwrap_or(1_000_000);
    if samples < 2 {
        return Err(Error::Config("cross-covariance check needs at least 2 draws".into()));
    }
    let cross_cov = cross_cov_check(cfg, cov, &dir_refs, &params, &norms, samples)?;

    Ok(MultiIndexResult {
        config: cfg.clone(),
        params,
        column_norms: norms,
        reliability: rel,
        level_errors,
        max_level_error,
        cross_cov,
        reduction_max_diff,
        fell_back_to_mc: predictor.fell_back_to_mc,
    })
}

fn cross_cov_check(
    cfg: &ExperimentConfig,
    cov: &CovarianceFactors,
    dirs: &[&DVector<f64>],
    params: &ConditionalParams,
    norms: &DVector<f64>,
    samples: usize,
) -> Result<CrossCovCheck> {
    let k = cfg.k;
    let mut sum = DMatrix::<f64>::zeros(k, k);
    let mut sum_sq = DMatrix::<f64>::zeros(k, k);
    let chunk = 100_000;
    let mut done = 0;
    let mut block = 0u64;
    while done < samples {
        let m = chunk.min(samples - done);
        let proj = sample_projections(m, cov, cfg.entry, dirs, derive_seed(cfg.seed, Stream::Estimate, block))?;
        for i in 0..m {
            let g = DVector::from_fn(k, |j, _| proj[(i, j)]);
            let s = DVector::from_fn(k, |j, _| proj[(i, k + j)] / norms[j]);
            let u = g - &params.m_star * &s;
            for a in 0..k {
                for b in 0..k {
                    let v = u[a] * s[b];
                    sum[(a, b)] += v;
                    sum_sq[(a, b)] += v * v;
                }
            }
        }
        done += m;
        block += 1;
    }
    let nf = samples as f64;
    let mean = &sum / nf;
    let std_err = DMatrix::from_fn(k, k, |a, b| {
        let var = (sum_sq[(a, b)] / nf - mean[(a, b)] * mean[(a, b)]).max(0.0) * nf / (nf - 1.0);
        (var / nf).sqrt()
    });
    let max_ratio = (0..k * k)
        .map(|i| {
            let (a, b) = (i % k, i / k);
            if std_err[(a, b)] > 0.0 {
                mean[(a, b)].abs() / std_err[(a, b)]
            } else if mean[(a, b)] == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    Ok(CrossCovCheck { samples, cov: mean, std_err, max_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig { n: 300, d: 60, n_test: 4000, n_holdout_platt: 200, sizes: vec![200, 5000], trials: Some(3), ..Default::default() }
    }

    fn cov(cfg: &ExperimentConfig) -> CovarianceFactors {
        covariance_factors(cfg).unwrap()
    }

    #[test]
    fn simulate_is_deterministic_and_complete() {
        let mut cfg = small();
        cfg.svg = true;
        let c = cov(&cfg);
        let a = run_simulate(&cfg, &c).unwrap().artifacts("simulate", "");
        let b = run_simulate(&cfg, &c).unwrap().artifacts("simulate", "");
        assert_eq!(a, b);
        let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
        for k in CalibratorKind::ALL {
            assert!(names.contains(&format!("reliability_{}.csv", k.label()).as_str()), "{names:?}");
        }
        assert!(names.contains(&"summary.json") && names.contains(&"reliability.svg"));
        let summary: Value = serde_json::from_str(&a.iter().find(|(n, _)| n == "summary.json").unwrap().1).unwrap();
        assert_eq!(summary["schema"], 1);
        assert!(summary["innerProductTrue"].as_f64().unwrap().is_finite());
        assert_eq!(summary["nTrain"], 270);
    }

    #[test]
    fn seeds_change_outputs() {
        let cfg = small();
        let c = cov(&cfg);
        let mut other = cfg.clone();
        other.seed = 1;
        let a = run_simulate(&cfg, &c).unwrap();
        let b = run_simulate(&other, &c).unwrap();
        assert_ne!(a.fit.inner_true, b.fit.inner_true);
    }

    #[test]
    fn zero_test_size_is_a_contract_error() {
        let mut cfg = small();
        cfg.n_test = 0;
        let c = cov(&small());
        assert!(matches!(run_simulate(&cfg, &c), Err(Error::Contract(_))));
    }

    #[test]
    fn fresh_sign_holdout_keeps_all_training_rows() {
        let mut cfg = small();
        cfg.sign_holdout = SignHoldout::Fresh { n: 50 };
        let r = run_simulate(&cfg, &cov(&cfg)).unwrap();
        assert_eq!(r.fit.train.n(), 300);
        assert_eq!(r.observation.sign_holdout_size, 50);
    }

    #[test]
    fn platt_convergence_rows_and_checks() {
        let mut cfg = small();
        cfg.link = LinkFunction::probit_affine(1.0, 0.3);
        let c = cov(&cfg);
        let r = run_platt_convergence(&cfg, &c).unwrap();
        assert_eq!(r.rows.len(), 6);
        let sup = r.median_sup();
        assert!(sup[1] < sup[0], "{sup:?}");

        cfg.sizes = vec![500];
        cfg.trials = Some(1);
        let r = run_platt_convergence(&cfg, &c).unwrap();
        let csv = &r.artifacts()[0].1;
        assert_eq!(csv.lines().count(), 2);

        cfg.sizes = vec![500, 100];
        assert!(matches!(run_platt_convergence(&cfg, &c), Err(Error::Config(_))));
    }

    #[test]
    fn aligned_platt_recovers_inverse_norm() {
        let mut cfg = small();
        cfg.link = LinkFunction::probit_affine(1.5, 0.2);
        cfg.aligned = true;
        cfg.sizes = vec![200_000];
        cfg.trials = Some(1);
        let r = run_platt_convergence(&cfg, &cov(&cfg)).unwrap();
        assert_eq!(r.theta_star, 0.0);
        assert!((r.a_star - 1.0 / r.sigma_norm).abs() < 1e-15);
        assert_eq!(r.b_star, 0.0);
        let row = &r.rows[0];
        assert!((row.a_hat * r.sigma_norm - 1.0).abs() < 0.05, "{row:?}");
        assert!(row.b_hat.abs() < 0.05, "{row:?}");
    }

    #[test]
    fn sign_mc_basics() {
        let mut cfg = small();
        cfg.trials = Some(1);
        let c = cov(&cfg);
        let r = run_sign_mc(&cfg, &c).unwrap();
        assert!(r.rate == 0.0 || r.rate == 1.0);
        cfg.trials = Some(200);
        let r = run_sign_mc(&cfg, &c).unwrap();
        assert!(r.wilson.0 <= r.rate && r.rate <= r.wilson.1);
        cfg.sign_holdout = SignHoldout::File("x.csv".into());
        assert!(matches!(run_sign_mc(&cfg, &c), Err(Error::Config(_))));
    }

    #[test]
    fn wilson_reference_values() {
        // 5 of 100: (0.02154, 0.11175)
        let (lo, hi) = wilson_interval(5, 100);
        assert!((lo - 0.021_543).abs() < 1e-5 && (hi - 0.111_750).abs() < 1e-5, "{lo} {hi}");
        let (lo, hi) = wilson_interval(0, 10);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.277_532).abs() < 1e-5);
    }

    #[test]
    fn universality_rejects_gaussian() {
        let cfg = small();
        assert!(matches!(run_universality(&cfg, &cov(&cfg)), Err(Error::Config(_))));
    }

    #[test]
    fn multiindex_reduction_and_alignment() {
        let mut cfg = small();
        cfg.k = 1;
        cfg.trials = Some(10_000);
        let c = cov(&cfg);
        let r = run_multiindex(&cfg, &c).unwrap();
        assert!(r.reduction_max_diff.unwrap() <= 1e-8, "{:?}", r.reduction_max_diff);

        cfg.k = 2;
        cfg.perturbation = 0.0;
        let r = run_multiindex(&cfg, &c).unwrap();
        assert!(r.params.sigma_star.amax() < 1e-10);
        assert!(r.max_level_error < 0.03);
        assert!(r.reduction_max_diff.is_none());
    }
}
