//! Recurrent network that produces a surrogate Kalman gain each step.
//!
//! Per step the network consumes three difference features, each
//! normalised by its running RMS over the trajectory:
//!
//! * innovation `y_t - ŷ_{t|t-1}`
//! * observation difference `y_t - y_{t-1}`
//! * forward update difference `x̂_{t-1} - x̂_{t-1|t-2}`
//!
//! and passes them through a rectified embedding, a gated recurrent cell
//! and a linear head reshaped to an `m x n` correction. The gain is that
//! correction added to a fixed, non-trainable base gain (zero unless set
//! with [`GainNetParams::with_base_gain`]).

mod checkpoint;

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

/// Lower bound on the running RMS used for feature normalisation.
pub const RMS_FLOOR: f64 = 1e-8;

/// Layer widths of the gain network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GainNetConfig {
    pub embed: usize,
    pub hidden: usize,
}

impl GainNetConfig {
    /// `10 (m + n)` for both the embedding and the recurrent state.
    pub fn for_dims(m: usize, n: usize) -> Self {
        GainNetConfig {
            embed: 10 * (m + n),
            hidden: 10 * (m + n),
        }
    }
}

pub fn feature_dim(m: usize, n: usize) -> usize {
    2 * n + m
}

const TENSOR_NAMES: [&str; 8] = [
    "embed_w", "embed_b", "input_w", "input_b", "hidden_w", "hidden_b", "out_w", "out_b",
];

fn tensor_shapes(m: usize, n: usize, cfg: GainNetConfig) -> [(usize, usize); 8] {
    let d = feature_dim(m, n);
    let (e, h) = (cfg.embed, cfg.hidden);
    [
        (e, d),
        (e, 1),
        (3 * h, e),
        (3 * h, 1),
        (3 * h, h),
        (3 * h, 1),
        (m * n, h),
        (m * n, 1),
    ]
}

/// Trainable weights of the gain network.
#[derive(Debug, Clone, PartialEq)]
pub struct GainNetParams {
    state_dim: usize,
    obs_dim: usize,
    config: GainNetConfig,
    seed: u64,
    tensors: Vec<Matrix>,
    base_gain: Matrix,
}

impl GainNetParams {
    /// Uniform `±1/sqrt(fan_in)` initialisation, deterministic per seed.
    pub fn init(m: usize, n: usize, config: GainNetConfig, seed: u64) -> Result<Self> {
        check_dims(m, n, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = tensor_shapes(m, n, config);
        // biases share the fan-in of the weight they pair with
        let fan_in = [shapes[0].1, shapes[0].1, shapes[2].1, shapes[2].1, shapes[4].1, shapes[4].1, shapes[6].1, shapes[6].1];
        let tensors = shapes
            .iter()
            .zip(fan_in)
            .map(|(&(r, c), fan)| {
                let bound = 1.0 / (fan as f64).sqrt();
                let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
                Matrix::new(r, c, data).expect("shape from layout")
            })
            .collect();
        Ok(GainNetParams {
            state_dim: m,
            obs_dim: n,
            config,
            seed,
            tensors,
            base_gain: Matrix::zeros(m, n),
        })
    }

    pub fn zeros(m: usize, n: usize, config: GainNetConfig) -> Result<Self> {
        check_dims(m, n, config)?;
        Ok(GainNetParams {
            state_dim: m,
            obs_dim: n,
            config,
            seed: 0,
            tensors: tensor_shapes(m, n, config)
                .iter()
                .map(|&(r, c)| Matrix::zeros(r, c))
                .collect(),
            base_gain: Matrix::zeros(m, n),
        })
    }

    pub fn from_flat(m: usize, n: usize, config: GainNetConfig, seed: u64, flat: &[f64]) -> Result<Self> {
        check_dims(m, n, config)?;
        let count = Self::count(m, n, config);
        if flat.len() != count {
            return Err(Error::Contract(format!(
                "expected {count} parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let tensors = tensor_shapes(m, n, config)
            .iter()
            .map(|&(r, c)| {
                let t = Matrix::new(r, c, flat[offset..offset + r * c].to_vec()).expect("sized slice");
                offset += r * c;
                t
            })
            .collect();
        Ok(GainNetParams {
            state_dim: m,
            obs_dim: n,
            config,
            seed,
            tensors,
            base_gain: Matrix::zeros(m, n),
        })
    }

    /// Set the fixed gain the network output is added to.
    pub fn with_base_gain(mut self, base: Matrix) -> Result<Self> {
        if base.shape() != (self.state_dim, self.obs_dim) {
            return Err(Error::Dimension {
                op: "base gain",
                lhs: base.shape(),
                rhs: (self.state_dim, self.obs_dim),
            });
        }
        self.base_gain = base;
        Ok(self)
    }

    /// Zero the output head so the network's initial correction vanishes.
    pub fn with_zero_head(mut self) -> Self {
        for t in &mut self.tensors[6..] {
            *t = Matrix::zeros(t.rows(), t.cols());
        }
        self
    }

    pub fn base_gain(&self) -> &Matrix {
        &self.base_gain
    }

    /// Parameter count implied by the layer layout.
    pub fn count(m: usize, n: usize, config: GainNetConfig) -> usize {
        tensor_shapes(m, n, config).iter().map(|(r, c)| r * c).sum()
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn config(&self) -> GainNetConfig {
        self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensor_names() -> &'static [&'static str] {
        &TENSOR_NAMES
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in &self.tensors {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    /// Replace all weights from a flat vector in layout order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let base = std::mem::replace(&mut self.base_gain, Matrix::zeros(0, 0));
        *self = Self::from_flat(self.state_dim, self.obs_dim, self.config, self.seed, flat)?
            .with_base_gain(base)?;
        Ok(())
    }

    pub fn norm_squared(&self) -> f64 {
        self.tensors.iter().map(Matrix::norm_squared).sum()
    }

    /// Record every tensor as a leaf on `tape`.
    pub fn attach<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
            base_gain: tape.constant(self.base_gain.clone()),
            state_dim: self.state_dim,
            obs_dim: self.obs_dim,
            hidden: self.config.hidden,
        }
    }
}

fn check_dims(m: usize, n: usize, cfg: GainNetConfig) -> Result<()> {
    if m == 0 || n == 0 || cfg.embed == 0 || cfg.hidden == 0 {
        return Err(Error::Contract(format!(
            "gain network needs positive dimensions, got m={m} n={n} {cfg:?}"
        )));
    }
    Ok(())
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars<'t> {
    vars: Vec<Var<'t>>,
    base_gain: Var<'t>,
    state_dim: usize,
    obs_dim: usize,
    hidden: usize,
}

impl<'t> ParamVars<'t> {
    pub fn leaves(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// `‖Θ‖²` on the tape.
    pub fn norm_squared(&self) -> Result<Var<'t>> {
        let mut total = self.vars[0].sum_squares();
        for v in &self.vars[1..] {
            total = total.add(v.sum_squares())?;
        }
        Ok(total)
    }
}

/// Per-trajectory recurrence carrier.
#[derive(Debug, Clone)]
pub struct GainNetState<'t> {
    pub hidden: Var<'t>,
    pub prev_posterior: Var<'t>,
    pub prev_prior: Var<'t>,
    pub prev_observation: Var<'t>,
    feature_sq_sum: Var<'t>,
    steps: usize,
}

impl<'t> GainNetState<'t> {
    /// Zero state at the start of a trajectory.
    pub fn reset(tape: &'t Tape, m: usize, n: usize, hidden: usize) -> Self {
        GainNetState {
            hidden: tape.constant(Matrix::zeros(hidden, 1)),
            prev_posterior: tape.constant(Matrix::zeros(m, 1)),
            prev_prior: tape.constant(Matrix::zeros(m, 1)),
            prev_observation: tape.constant(Matrix::zeros(n, 1)),
            feature_sq_sum: tape.constant(Matrix::zeros(feature_dim(m, n), 1)),
            steps: 0,
        }
    }

    pub fn for_params(tape: &'t Tape, params: &GainNetParams) -> Self {
        Self::reset(tape, params.state_dim, params.obs_dim, params.config.hidden)
    }

    /// Record the estimates and observation of the step just completed.
    pub fn advance(&mut self, posterior: Var<'t>, prior: Var<'t>, observation: Var<'t>) {
        self.prev_posterior = posterior;
        self.prev_prior = prior;
        self.prev_observation = observation;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Normalised step features; updates the running RMS held in `state`.
pub fn build_features<'t>(
    y: Var<'t>,
    state: &mut GainNetState<'t>,
    y_hat: Var<'t>,
) -> Result<Var<'t>> {
    let innovation = y.sub(y_hat)?;
    let obs_diff = y.sub(state.prev_observation)?;
    let update_diff = state.prev_posterior.sub(state.prev_prior)?;
    let raw = Var::vstack(&[innovation, obs_diff, update_diff])?;

    state.steps += 1;
    state.feature_sq_sum = state.feature_sq_sum.add(raw.hadamard(raw)?)?;
    let rms = state
        .feature_sq_sum
        .scale(1.0 / state.steps as f64)
        .max_scalar(RMS_FLOOR * RMS_FLOOR)
        .sqrt();
    raw.div_elem(rms)
}

/// One recurrent step: returns the `m x n` gain and updates `state.hidden`.
pub fn gain_step<'t>(
    params: &ParamVars<'t>,
    state: &mut GainNetState<'t>,
    features: Var<'t>,
) -> Result<Var<'t>> {
    let [ew, eb, iw, ib, hw, hb, ow, ob] = params.vars[..] else {
        return Err(Error::Contract("gain network parameter layout".into()));
    };
    let h = params.hidden;
    let embed = ew.matmul(features)?.add(eb)?.relu();

    let gi = iw.matmul(embed)?.add(ib)?;
    let gh = hw.matmul(state.hidden)?.add(hb)?;
    let reset = gi.slice_rows(0, h)?.add(gh.slice_rows(0, h)?)?.sigmoid();
    let update = gi.slice_rows(h, h)?.add(gh.slice_rows(h, h)?)?.sigmoid();
    let candidate = gi
        .slice_rows(2 * h, h)?
        .add(reset.hadamard(gh.slice_rows(2 * h, h)?)?)?
        .tanh();
    // h' = (1 - z) * n + z * h
    let hidden = candidate.add(update.hadamard(state.hidden.sub(candidate)?)?)?;
    state.hidden = hidden;

    ow.matmul(hidden)?
        .add(ob)?
        .reshape(params.state_dim, params.obs_dim)?
        .add(params.base_gain)
}

/// Pseudo-inverse of a full-rank observation matrix: `(H'H)^{-1} H'` when
/// `H` has at least as many rows as columns, `H' (H H')^{-1}` otherwise.
/// With it as the base gain the untrained estimator follows the
/// observations, which keeps early rollouts bounded when the design model's
/// open-loop prediction is unstable under the true dynamics.
pub fn observation_inverse(h: &Matrix) -> Result<Matrix> {
    let ht = h.transpose();
    if h.rows() >= h.cols() {
        ht.matmul(h)?.solve_spd(&ht)
    } else {
        Ok(h.matmul(&ht)?.solve_spd(h)?.transpose())
    }
}
