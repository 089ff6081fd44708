//! Linear-Gaussian state-space model, its seeded simulator, and the
//! rotation mismatch used to build ground-truth dynamics that differ from
//! the design model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `x_t = F x_{t-1} + G u_{t-1} + w_t`, `y_t = H x_t + v_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub f: Matrix,
    pub g: Matrix,
    pub h: Matrix,
    pub w: Matrix,
    pub v: Matrix,
}

impl StateSpaceModel {
    pub fn new(f: Matrix, g: Matrix, h: Matrix, w: Matrix, v: Matrix) -> Result<Self> {
        let model = StateSpaceModel { f, g, h, w, v };
        model.validate()?;
        Ok(model)
    }

    /// Double integrator with full-state observation:
    /// `F = [[1,1],[0,1]]`, `G = [0,1]^T`, `H = I`.
    pub fn double_integrator(w: Matrix, v: Matrix) -> Result<Self> {
        let f = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]])?;
        let g = Matrix::column(&[0.0, 1.0]);
        Self::new(f, g, Matrix::identity(2), w, v)
    }

    pub fn state_dim(&self) -> usize {
        self.f.rows()
    }

    pub fn control_dim(&self) -> usize {
        self.g.cols()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.f.rows();
        let check = |op: &'static str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Dimension {
                    op,
                    lhs: got,
                    rhs: want,
                })
            }
        };
        check("model F", self.f.shape(), (m, m))?;
        check("model G", (self.g.rows(), 0), (m, 0))?;
        check("model H", (0, self.h.cols()), (0, m))?;
        let n = self.h.rows();
        check("model W", self.w.shape(), (m, m))?;
        check("model V", self.v.shape(), (n, n))?;
        for (name, cov) in [("W", &self.w), ("V", &self.v)] {
            if cov.max_abs_diff(&cov.transpose()) > 1e-12 * cov.max_abs().max(1.0) {
                return Err(Error::Domain(format!("{name} is not symmetric")));
            }
            cov.psd_sqrt()
                .map_err(|_| Error::Domain(format!("{name} is not positive semi-definite")))?;
        }
        Ok(())
    }

    pub fn with_noise(&self, w: Matrix, v: Matrix) -> Result<Self> {
        Self::new(self.f.clone(), self.g.clone(), self.h.clone(), w, v)
    }
}

/// Process and observation noise variances in power decibels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub process_db: f64,
    pub observation_db: f64,
}

impl NoiseSpec {
    /// Equal process and observation variance.
    pub fn equal(db: f64) -> Self {
        NoiseSpec {
            process_db: db,
            observation_db: db,
        }
    }

    pub fn process_variance(&self) -> f64 {
        db_to_power(self.process_db)
    }

    pub fn observation_variance(&self) -> f64 {
        db_to_power(self.observation_db)
    }
}

/// `10^(db/10)`.
pub fn db_to_power(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Isotropic `W = σ_w² I_m` and `V = σ_v² I_n`.
pub fn noise_covariances(spec: NoiseSpec, m: usize, n: usize) -> (Matrix, Matrix) {
    (
        Matrix::identity(m).scale(spec.process_variance()),
        Matrix::identity(n).scale(spec.observation_variance()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MismatchTarget {
    None,
    Evolution,
    Observation,
}

/// Which design matrix the ground truth rotates, and by how much.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MismatchSpec {
    pub target: MismatchTarget,
    pub alpha_degrees: f64,
}

impl MismatchSpec {
    pub fn none() -> Self {
        MismatchSpec {
            target: MismatchTarget::None,
            alpha_degrees: 0.0,
        }
    }

    pub fn evolution(alpha_degrees: f64) -> Self {
        MismatchSpec {
            target: MismatchTarget::Evolution,
            alpha_degrees,
        }
    }

    pub fn observation(alpha_degrees: f64) -> Self {
        MismatchSpec {
            target: MismatchTarget::Observation,
            alpha_degrees,
        }
    }
}

/// Planar rotation by `alpha_degrees`.
pub fn rotation(alpha_degrees: f64) -> Matrix {
    let (s, c) = alpha_degrees.to_radians().sin_cos();
    Matrix::from_rows(&[[c, -s], [s, c]]).expect("2x2 literal")
}

/// Ground-truth model obtained by left-multiplying the targeted design
/// matrix by a rotation.
pub fn apply_mismatch(design: &StateSpaceModel, spec: MismatchSpec) -> Result<StateSpaceModel> {
    let mut truth = design.clone();
    let slot = match spec.target {
        MismatchTarget::None => return Ok(truth),
        MismatchTarget::Evolution => &mut truth.f,
        MismatchTarget::Observation => &mut truth.h,
    };
    if slot.rows() != 2 {
        if spec.alpha_degrees == 0.0 {
            return Ok(truth);
        }
        return Err(Error::UnsupportedShape(format!(
            "rotation mismatch needs a matrix with 2 rows, got {:?}",
            slot.shape()
        )));
    }
    *slot = rotation(spec.alpha_degrees).matmul(slot)?;
    Ok(truth)
}

/// Noise realisation for one simulator step.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub process: Matrix,
    pub observation: Matrix,
}

/// Seeded simulator of a [`StateSpaceModel`].
///
/// Each simulator owns a ChaCha stream selected by `(seed, stream)`, so a
/// batch of simulators reproduces the same draws regardless of the order in
/// which they are run.
#[derive(Debug, Clone)]
pub struct Simulator {
    truth: StateSpaceModel,
    w_sqrt: Matrix,
    v_sqrt: Matrix,
    rng: ChaCha8Rng,
    state: Matrix,
}

impl Simulator {
    pub fn new(truth: StateSpaceModel, x0: Matrix, seed: u64, stream: u64) -> Result<Self> {
        if x0.shape() != (truth.state_dim(), 1) {
            return Err(Error::Dimension {
                op: "simulator x0",
                lhs: x0.shape(),
                rhs: (truth.state_dim(), 1),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Simulator {
            w_sqrt: truth.w.psd_sqrt()?,
            v_sqrt: truth.v.psd_sqrt()?,
            truth,
            rng,
            state: x0,
        })
    }

    /// Like [`Simulator::new`] but draws `x0 ~ N(mean, std² I)` from the
    /// simulator's own stream before any step noise.
    pub fn with_random_initial(
        truth: StateSpaceModel,
        mean: &Matrix,
        std: f64,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        let mut sim = Self::new(truth, mean.clone(), seed, stream)?;
        if std > 0.0 {
            let z = sim.standard_normal(mean.rows());
            sim.state = mean.add(&z.scale(std))?;
        }
        Ok(sim)
    }

    fn standard_normal(&mut self, n: usize) -> Matrix {
        let draws: Vec<f64> = (0..n)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        Matrix::column(&draws)
    }

    pub fn truth(&self) -> &StateSpaceModel {
        &self.truth
    }

    pub fn state(&self) -> &Matrix {
        &self.state
    }

    /// Overwrite the current state, used when the propagation is carried out
    /// elsewhere (e.g. on a differentiation tape) with noise from
    /// [`Simulator::sample_noise`].
    pub fn set_state(&mut self, x: Matrix) {
        self.state = x;
    }

    /// Draw `w ~ N(0, W)` then `v ~ N(0, V)`.
    pub fn sample_noise(&mut self) -> StepNoise {
        let zw = self.standard_normal(self.truth.state_dim());
        let zv = self.standard_normal(self.truth.obs_dim());
        StepNoise {
            process: self.w_sqrt.matmul(&zw).expect("square root shape"),
            observation: self.v_sqrt.matmul(&zv).expect("square root shape"),
        }
    }

    /// Advance one step under control `u`, returning the new state and its
    /// noisy observation.
    pub fn step(&mut self, u: &Matrix) -> Result<(Matrix, Matrix)> {
        if u.shape() != (self.truth.control_dim(), 1) {
            return Err(Error::Dimension {
                op: "simulator step",
                lhs: u.shape(),
                rhs: (self.truth.control_dim(), 1),
            });
        }
        let noise = self.sample_noise();
        let x = self
            .truth
            .f
            .matmul(&self.state)?
            .add(&self.truth.g.matmul(u)?)?
            .add(&noise.process)?;
        let y = self.truth.h.matmul(&x)?.add(&noise.observation)?;
        self.state = x.clone();
        Ok((x, y))
    }
}
