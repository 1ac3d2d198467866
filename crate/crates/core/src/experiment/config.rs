//! Experiment configuration and its flat `key = value` file format.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Keys match the
//! command-line flags without the leading dashes; `_` and `-` are interchangeable.
//!
//! ```text
//! # 6.1-scale run
//! n = 1000
//! d = 2000
//! cov = ar1:0.5
//! link = sigmoid:3:1
//! calibrators = uncalibrated,angular,platt
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::link::LinkFunction;
use crate::synth::{load_design_csv, CovarianceSpec, EntryDistribution};

/// Covariance family; the AR(1) and identity forms carry the `1/d` scale.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceArg {
    Ar1 { rho: f64 },
    Identity,
    /// Square CSV with a header row, used as is.
    File(PathBuf),
}

impl CovarianceArg {
    pub fn to_spec(&self, d: usize) -> Result<CovarianceSpec> {
        match self {
            CovarianceArg::Ar1 { rho } => Ok(CovarianceSpec::ar1(*rho, d)),
            CovarianceArg::Identity => Ok(CovarianceSpec::identity(d, 1.0 / d as f64)),
            CovarianceArg::File(path) => {
                let m = load_design_csv(path)?;
                if m.nrows() != d || m.ncols() != d {
                    return Err(Error::Config(format!(
                        "covariance file {} is {}x{}, expected {d}x{d}",
                        path.display(),
                        m.nrows(),
                        m.ncols()
                    )));
                }
                Ok(CovarianceSpec::external(m))
            }
        }
    }
}

impl FromStr for CovarianceArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "identity" {
            return Ok(Self::Identity);
        }
        if let Some(rest) = s.strip_prefix("ar1:") {
            let rho: f64 = rest.parse().map_err(|_| Error::Config(format!("bad AR(1) coefficient '{rest}'")))?;
            if !(rho.abs() < 1.0) {
                return Err(Error::Config(format!("AR(1) coefficient must lie in (-1, 1), got {rho}")));
            }
            return Ok(Self::Ar1 { rho });
        }
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(Self::File(PathBuf::from(path)));
        }
        Err(Error::Config(format!("unknown covariance '{s}' (expected ar1:<rho>, identity or file:<path>)")))
    }
}

impl fmt::Display for CovarianceArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovarianceArg::Ar1 { rho } => write!(f, "ar1:{rho}"),
            CovarianceArg::Identity => f.write_str("identity"),
            CovarianceArg::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

/// Where the rows for the sign estimate come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SignHoldout {
    /// The last `ceil(frac * n)` training rows are set aside before fitting.
    Carve { frac: f64 },
    /// `n` fresh rows drawn from the model; the fit uses all training rows.
    Fresh { n: usize },
    /// CSV whose last column holds the 0/1 labels.
    File(PathBuf),
}

impl fmt::Display for SignHoldout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignHoldout::Carve { frac } => write!(f, "carve:{frac}"),
            SignHoldout::Fresh { n } => write!(f, "fresh:{n}"),
            SignHoldout::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CalibratorKind {
    Uncalibrated,
    /// Angular predictor at the estimated angle.
    Angular,
    /// Angular predictor at the true angle (synthetic runs only).
    AngularTrue,
    Platt,
    Isotonic,
    Chance,
}

impl CalibratorKind {
    pub const ALL: [CalibratorKind; 6] = [
        CalibratorKind::Uncalibrated,
        CalibratorKind::Angular,
        CalibratorKind::AngularTrue,
        CalibratorKind::Platt,
        CalibratorKind::Isotonic,
        CalibratorKind::Chance,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CalibratorKind::Uncalibrated => "uncalibrated",
            CalibratorKind::Angular => "angular",
            CalibratorKind::AngularTrue => "angular_true",
            CalibratorKind::Platt => "platt",
            CalibratorKind::Isotonic => "isotonic",
            CalibratorKind::Chance => "chance",
        }
    }
}

impl FromStr for CalibratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown calibrator '{s}'")))
    }
}

fn parse_calibrators(s: &str) -> Result<Vec<CalibratorKind>> {
    let mut out: Vec<CalibratorKind> = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(|p| parse_num::<usize>("sizes", p)).collect()
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("bad value '{}' for '{key}'", v.trim())))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean '{other}' for '{key}'"))),
    }
}

/// Every knob of every subcommand. Each subcommand reads the fields it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub covariance: CovarianceArg,
    pub entry: EntryDistribution,
    pub link: LinkFunction,
    pub lambda: f64,
    pub seed: u64,
    pub n_test: usize,
    pub n_holdout_platt: usize,
    pub sign_holdout: SignHoldout,
    pub calibrators: Vec<CalibratorKind>,
    pub n_bins: usize,
    pub min_level_count: usize,
    /// Holdout sizes for `platt-convergence`, ascending.
    pub sizes: Vec<usize>,
    /// Monte Carlo trials; subcommand default when `None`.
    pub trials: Option<usize>,
    /// `platt-convergence`: replace the fitted direction by the true one.
    pub aligned: bool,
    /// `multiindex`: number of indices.
    pub k: usize,
    /// `multiindex`: size of the perturbation separating the fitted from the true indices.
    pub perturbation: f64,
    pub out: Option<PathBuf>,
    pub svg: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            d: 2000,
            covariance: CovarianceArg::Ar1 { rho: 0.5 },
            entry: EntryDistribution::Gaussian,
            link: LinkFunction::sigmoid_affine(3.0, 1.0),
            lambda: 0.5,
            seed: 0,
            n_test: 20_000,
            n_holdout_platt: 100,
            sign_holdout: SignHoldout::Carve { frac: 0.1 },
            calibrators: CalibratorKind::ALL.to_vec(),
            n_bins: 10,
            min_level_count: 200,
            sizes: vec![100, 1000, 10_000, 100_000],
            trials: None,
            aligned: false,
            k: 2,
            perturbation: 1.0,
            out: None,
            svg: false,
        }
    }
}

impl ExperimentConfig {
    /// Set one key from its textual value.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let v = value.trim();
        match key.as_str() {
            "n" => self.n = parse_num(&key, v)?,
            "d" => self.d = parse_num(&key, v)?,
            "cov" => self.covariance = v.parse()?,
            "entry" => self.entry = v.parse()?,
            "link" => self.link = v.parse()?,
            "lambda" => self.lambda = parse_num(&key, v)?,
            "seed" => self.seed = parse_num(&key, v)?,
            "n-test" => self.n_test = parse_num(&key, v)?,
            "platt-holdout" => self.n_holdout_platt = parse_num(&key, v)?,
            "sign-holdout-frac" => self.sign_holdout = SignHoldout::Carve { frac: parse_num(&key, v)? },
            "sign-holdout-n" => self.sign_holdout = SignHoldout::Fresh { n: parse_num(&key, v)? },
            "sign-holdout-file" => self.sign_holdout = SignHoldout::File(PathBuf::from(v)),
            "calibrators" => self.calibrators = parse_calibrators(v)?,
            "bins" => self.n_bins = parse_num(&key, v)?,
            "min-level-count" => self.min_level_count = parse_num(&key, v)?,
            "sizes" => self.sizes = parse_sizes(v)?,
            "trials" => self.trials = Some(parse_num(&key, v)?),
            "aligned" => self.aligned = parse_bool(&key, v)?,
            "k" => self.k = parse_num(&key, v)?,
            "perturbation" => self.perturbation = parse_num(&key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "svg" => self.svg = parse_bool(&key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Apply every line of a `key = value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            self.apply(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Serialize back to the file format; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("n", self.n.to_string());
        put("d", self.d.to_string());
        put("cov", self.covariance.to_string());
        put("entry", self.entry.to_string());
        put("link", self.link.to_string());
        put("lambda", format!("{:?}", self.lambda));
        put("seed", self.seed.to_string());
        put("n-test", self.n_test.to_string());
        put("platt-holdout", self.n_holdout_platt.to_string());
        match &self.sign_holdout {
            SignHoldout::Carve { frac } => put("sign-holdout-frac", format!("{frac:?}")),
            SignHoldout::Fresh { n } => put("sign-holdout-n", n.to_string()),
            SignHoldout::File(p) => put("sign-holdout-file", p.display().to_string()),
        }
        put("calibrators", self.calibrators.iter().map(|c| c.label()).collect::<Vec<_>>().join(","));
        put("bins", self.n_bins.to_string());
        put("min-level-count", self.min_level_count.to_string());
        put("sizes", self.sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        if let Some(t) = self.trials {
            put("trials", t.to_string());
        }
        put("aligned", self.aligned.to_string());
        put("k", self.k.to_string());
        put("perturbation", format!("{:?}", self.perturbation));
        if let Some(o) = &self.out {
            put("out", o.display().to_string());
        }
        put("svg", self.svg.to_string());
        s
    }

    /// Checks shared by all subcommands.
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.d == 0 {
            return Err(Error::Contract(format!("need n >= 2 and d >= 1, got n={}, d={}", self.n, self.d)));
        }
        if self.n_test == 0 {
            return Err(Error::Contract("n-test must be positive".into()));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.n_bins == 0 {
            return Err(Error::Config("bins must be positive".into()));
        }
        if !(self.link.a.is_finite() && self.link.b.is_finite()) {
            return Err(Error::Config("link parameters must be finite".into()));
        }
        match &self.sign_holdout {
            SignHoldout::Carve { frac } if !(*frac > 0.0 && *frac < 1.0) => {
                return Err(Error::Config(format!("sign-holdout-frac must lie in (0, 1), got {frac}")));
            }
            SignHoldout::Carve { frac } if self.n - carve_size(self.n, *frac) < 1 => {
                return Err(Error::Config("sign holdout leaves no training rows".into()));
            }
            SignHoldout::Fresh { n: 0 } => return Err(Error::Config("sign-holdout-n must be positive".into())),
            _ => {}
        }
        if self.calibrators.is_empty() {
            return Err(Error::Config("no calibrators requested".into()));
        }
        let needs_holdout = self.calibrators.iter().any(|c| matches!(c, CalibratorKind::Platt | CalibratorKind::Isotonic));
        if needs_holdout && self.n_holdout_platt == 0 {
            return Err(Error::Contract("platt-holdout must be positive when platt or isotonic is requested".into()));
        }
        if !(self.perturbation.is_finite() && self.perturbation >= 0.0) {
            return Err(Error::Config(format!("perturbation must be non-negative, got {}", self.perturbation)));
        }
        Ok(())
    }
}

/// `ceil(frac * n)` rows, at least one.
pub fn carve_size(n: usize, frac: f64) -> usize {
    ((frac * n as f64).ceil() as usize).clamp(1, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_format() {
        let cfg = ExperimentConfig::from_text(
            "# comment\n\nn = 300\nd=40 # trailing\nlink = probit:1.5:-0.2\ncov = identity\nn_test = 500\ncalibrators = platt, angular\nsvg = true\n",
        )
        .unwrap();
        assert_eq!(cfg.n, 300);
        assert_eq!(cfg.d, 40);
        assert_eq!(cfg.link, LinkFunction::probit_affine(1.5, -0.2));
        assert_eq!(cfg.covariance, CovarianceArg::Identity);
        assert_eq!(cfg.n_test, 500);
        assert_eq!(cfg.calibrators, vec![CalibratorKind::Angular, CalibratorKind::Platt]);
        assert!(cfg.svg);
    }

    #[test]
    fn errors_name_the_line() {
        let e = ExperimentConfig::from_text("n = 10\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(matches!(ExperimentConfig::from_text("n 10"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_text("n = ten"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_text("calibrators = magic"), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply("sign-holdout-n", "77").unwrap();
        cfg.apply("trials", "12").unwrap();
        cfg.apply("out", "/tmp/x").unwrap();
        cfg.apply("lambda", "0.1").unwrap();
        assert_eq!(ExperimentConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_text(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let mut c = ExperimentConfig::default();
        c.n_test = 0;
        assert!(matches!(c.validate(), Err(Error::Contract(_))));
        let mut c = ExperimentConfig::default();
        c.lambda = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::default();
        c.sign_holdout = SignHoldout::Carve { frac: 1.0 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn covariance_args() {
        assert_eq!("ar1:0.5".parse::<CovarianceArg>().unwrap(), CovarianceArg::Ar1 { rho: 0.5 });
        assert!("ar1:1.5".parse::<CovarianceArg>().is_err());
        assert!("toeplitz".parse::<CovarianceArg>().is_err());
        assert_eq!(carve_size(1000, 0.1), 100);
        assert_eq!(carve_size(999, 0.1), 100);
    }
}
