//! Experiment configuration read from TOML.
//!
//! Every key is optional; an empty file yields the defaults below. Unknown
//! keys are rejected.
//!
//! ```toml
//! seed = 0                      # master seed for initialisation and data
//! out = "out"                   # output directory
//!
//! [model]                       # design model
//! f = [[1.0, 1.0], [0.0, 1.0]]
//! g = [[0.0], [1.0]]
//! h = [[1.0, 0.0], [0.0, 1.0]]
//! x0 = [10.0, 0.0]
//!
//! [mismatch]                    # setting for single-cell commands
//! target = "none"               # none | evolution | observation
//! alpha = 20.0                  # degrees
//!
//! [noise]
//! sweep_db = [-10.0, -5.0, 0.0, 5.0, 10.0]
//!
//! [cost]                        # weights default to identity, targets to zero
//! horizon = 100
//!
//! [train]
//! learning_rate = 3e-3
//! iterations = 200
//! batch_size = 32
//! regularization = 1e-4
//! optimizer = "adam"            # adam | gradient
//! checkpoint_every = 0
//! # grad_clip = 10.0
//! # embed = 40                  # default 10 (m + n)
//! # hidden = 40                 # default 10 (m + n)
//! base_gain = "steady-state"  # steady-state | observation-inverse | zero
//! zero_head = true             # start the output head at zero
//! x0_std = 1.0                  # training initial-state spread
//!
//! [eval]
//! test_seeds = 1000
//!
//! [run]                         # single-cell commands
//! noise_db = 0.0
//! stream = 0                    # test stream for exported trajectories
//!
//! [grad_check]
//! horizon = 20
//! directions = 8
//! epsilon = 1e-6
//! tolerance = 1e-4
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lqg_core::dynamics::{noise_covariances, MismatchSpec, NoiseSpec, StateSpaceModel};
use lqg_core::gain_net::GainNetConfig;
use lqg_core::regulation::QuadraticCost;
use lqg_core::training::{BaseGain, Optimizer, TrainConfig};
use lqg_core::Matrix;
use serde::Deserialize;

use crate::error::{BenchError, CoreContext, Result};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub mismatch: MismatchSection,
    pub noise: NoiseSection,
    pub cost: CostSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub run: RunSection,
    pub grad_check: GradCheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("out"),
            model: ModelSection::default(),
            mismatch: MismatchSection::default(),
            noise: NoiseSection::default(),
            cost: CostSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            run: RunSection::default(),
            grad_check: GradCheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub f: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            f: vec![vec![1.0, 1.0], vec![0.0, 1.0]],
            g: vec![vec![0.0], vec![1.0]],
            h: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            x0: vec![10.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetName {
    None,
    Evolution,
    Observation,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MismatchSection {
    pub target: TargetName,
    pub alpha: f64,
}

impl Default for MismatchSection {
    fn default() -> Self {
        MismatchSection {
            target: TargetName::None,
            alpha: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub sweep_db: Vec<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            sweep_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub horizon: usize,
    pub q_state: Option<Vec<Vec<f64>>>,
    pub q_final: Option<Vec<Vec<f64>>>,
    pub r_control: Option<Vec<Vec<f64>>>,
    pub state_target: Option<Vec<f64>>,
    pub control_target: Option<Vec<f64>>,
}

impl Default for CostSection {
    fn default() -> Self {
        CostSection {
            horizon: 100,
            q_state: None,
            q_final: None,
            r_control: None,
            state_target: None,
            control_target: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Adam,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseGainName {
    SteadyState,
    ObservationInverse,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub regularization: f64,
    pub optimizer: OptimizerName,
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
    pub embed: Option<usize>,
    pub hidden: Option<usize>,
    pub base_gain: BaseGainName,
    pub zero_head: bool,
    pub x0_std: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 3e-3,
            iterations: 200,
            batch_size: 32,
            regularization: 1e-4,
            optimizer: OptimizerName::Adam,
            checkpoint_every: 0,
            grad_clip: None,
            embed: None,
            hidden: None,
            base_gain: BaseGainName::SteadyState,
            zero_head: true,
            x0_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub test_seeds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { test_seeds: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub noise_db: f64,
    pub stream: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            noise_db: 0.0,
            stream: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub horizon: usize,
    pub directions: usize,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        GradCheckSection {
            horizon: 20,
            directions: 8,
            epsilon: 1e-6,
            tolerance: 1e-4,
        }
    }
}

/// Experimental setting: which design matrix, if any, is rotated in the
/// ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setting {
    Matched,
    MismatchF,
    MismatchH,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Matched, Setting::MismatchF, Setting::MismatchH];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Matched => "matched",
            Setting::MismatchF => "mismatch-f",
            Setting::MismatchH => "mismatch-h",
        }
    }

    pub fn mismatch(self, alpha_degrees: f64) -> MismatchSpec {
        match self {
            Setting::Matched => MismatchSpec::none(),
            Setting::MismatchF => MismatchSpec::evolution(alpha_degrees),
            Setting::MismatchH => MismatchSpec::observation(alpha_degrees),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "matched" => Ok(Setting::Matched),
            "mismatch-f" => Ok(Setting::MismatchF),
            "mismatch-h" => Ok(Setting::MismatchH),
            other => Err(format!(
                "unknown setting `{other}` (expected matched, mismatch-f or mismatch-h)"
            )),
        }
    }
}

impl From<TargetName> for Setting {
    fn from(t: TargetName) -> Self {
        match t {
            TargetName::None => Setting::Matched,
            TargetName::Evolution => Setting::MismatchF,
            TargetName::Observation => Setting::MismatchH,
        }
    }
}

/// Seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    /// Network initialisation.
    pub init: u64,
    /// Training simulators.
    pub train_data: u64,
    /// Test simulators, shared by every controller.
    pub test: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<Matrix> {
    Matrix::from_rows(rows).map_err(|e| BenchError::Config(format!("{name}: {e}")))
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Seeds {
        Seeds {
            init: self.seed,
            train_data: splitmix(self.seed ^ 0x7472_6169_6e00_0001),
            test: splitmix(self.seed ^ 0x7465_7374_0000_0002),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.model.f.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.model.h.len()
    }

    pub fn x0(&self) -> Matrix {
        Matrix::column(&self.model.x0)
    }

    /// Design model with `W = V = σ² I` at `noise_db`.
    pub fn design_model(&self, noise_db: f64) -> Result<StateSpaceModel> {
        let f = matrix("model.f", &self.model.f)?;
        let g = matrix("model.g", &self.model.g)?;
        let h = matrix("model.h", &self.model.h)?;
        let (w, v) = noise_covariances(NoiseSpec::equal(noise_db), f.rows(), h.rows());
        StateSpaceModel::new(f, g, h, w, v).context("model")
    }

    pub fn quadratic_cost(&self) -> Result<QuadraticCost> {
        let m = self.state_dim();
        let q = self.model.g.first().map_or(0, Vec::len);
        let square = |name: &str, given: &Option<Vec<Vec<f64>>>, n: usize| match given {
            Some(rows) => matrix(name, rows),
            None => Ok(Matrix::identity(n)),
        };
        let column = |given: &Option<Vec<f64>>, n: usize| match given {
            Some(v) => Matrix::column(v),
            None => Matrix::zeros(n, 1),
        };
        QuadraticCost::new(
            square("cost.q_state", &self.cost.q_state, m)?,
            square("cost.q_final", &self.cost.q_final, m)?,
            square("cost.r_control", &self.cost.r_control, q)?,
            self.cost.horizon,
            column(&self.cost.state_target, m),
            column(&self.cost.control_target, q),
        )
        .context("cost")
    }

    pub fn train_config(&self) -> TrainConfig {
        let (m, n) = (self.state_dim(), self.obs_dim());
        let default_net = GainNetConfig::for_dims(m, n);
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            iterations: t.iterations,
            batch_size: t.batch_size,
            regularization: t.regularization,
            optimizer: match t.optimizer {
                OptimizerName::Adam => Optimizer::Adam,
                OptimizerName::Gradient => Optimizer::Gradient,
            },
            seed: self.seeds().init,
            checkpoint_every: t.checkpoint_every,
            grad_clip: t.grad_clip,
            net: GainNetConfig {
                embed: t.embed.unwrap_or(default_net.embed),
                hidden: t.hidden.unwrap_or(default_net.hidden),
            },
            base_gain: match t.base_gain {
                BaseGainName::SteadyState => BaseGain::SteadyState,
                BaseGainName::ObservationInverse => BaseGain::ObservationInverse,
                BaseGainName::Zero => BaseGain::Zero,
            },
            zero_head: t.zero_head,
        }
    }

    /// Setting used by single-cell commands when none is given.
    pub fn default_setting(&self) -> Setting {
        self.mismatch.target.into()
    }

    /// Check cross-field constraints that the TOML types cannot express.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        if self.model.x0.len() != self.state_dim() {
            return bad(format!(
                "model.x0 has {} entries, model.f has {} rows",
                self.model.x0.len(),
                self.state_dim()
            ));
        }
        let model = self.design_model(0.0)?;
        self.quadratic_cost()?;
        if !self.mismatch.alpha.is_finite() {
            return bad("mismatch.alpha must be finite".into());
        }
        let setting = self.default_setting();
        lqg_core::dynamics::apply_mismatch(&model, setting.mismatch(self.mismatch.alpha))
            .context(format!("mismatch for {setting}"))?;
        if let Some(db) = self.noise.sweep_db.iter().find(|d| !d.is_finite()) {
            return bad(format!("noise.sweep_db contains {db}"));
        }
        if !self.run.noise_db.is_finite() {
            return bad("run.noise_db must be finite".into());
        }
        self.train_config().validate().context("train")?;
        if !(self.train.x0_std >= 0.0) {
            return bad("train.x0_std must be non-negative".into());
        }
        if self.train.embed == Some(0) || self.train.hidden == Some(0) {
            return bad("train.embed and train.hidden must be positive".into());
        }
        if self.eval.test_seeds == 0 {
            return bad("eval.test_seeds must be at least 1".into());
        }
        let gc = &self.grad_check;
        if gc.directions == 0 || !(gc.epsilon > 0.0) || !(gc.tolerance > 0.0) {
            return bad("grad_check needs directions >= 1 and positive epsilon and tolerance".into());
        }
        Ok(())
    }
}

/// Parse and validate a configuration string. `origin` names the source in
/// error messages.
pub fn parse_config_str(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| BenchError::Config(format!("{origin}: {}", describe(text, &e))))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text, &path.display().to_string())
}

/// One-line message with the 1-based line of the offending span.
fn describe(text: &str, err: &toml::de::Error) -> String {
    let message = err.message().trim();
    match err.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {message}")
        }
        None => message.to_string(),
    }
}
