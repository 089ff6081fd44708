//! Model-based Kalman filter over a (possibly mismatched) design model.

use crate::dynamics::StateSpaceModel;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Covariance used for a known initial state.
pub const KNOWN_PRIOR_VARIANCE: f64 = 1e-6;

/// Gaussian belief over the state.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub mean: Matrix,
    pub covariance: Matrix,
}

impl Belief {
    pub fn new(mean: Matrix, covariance: Matrix) -> Result<Self> {
        let m = mean.rows();
        if mean.cols() != 1 || covariance.shape() != (m, m) {
            return Err(Error::Dimension {
                op: "belief",
                lhs: mean.shape(),
                rhs: covariance.shape(),
            });
        }
        Ok(Belief { mean, covariance })
    }

    /// Belief for a state known up to [`KNOWN_PRIOR_VARIANCE`].
    pub fn known(mean: Matrix) -> Self {
        let m = mean.rows();
        Belief {
            mean,
            covariance: Matrix::identity(m).scale(KNOWN_PRIOR_VARIANCE),
        }
    }
}

/// Quantities produced by one measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub innovation: Matrix,
    pub innovation_covariance: Matrix,
    pub gain: Matrix,
}

/// Time update. Returns the predicted belief and predicted observation.
pub fn kf_predict(model: &StateSpaceModel, prev: &Belief, u: &Matrix) -> Result<(Belief, Matrix)> {
    let mean = model.f.matmul(&prev.mean)?.add(&model.g.matmul(u)?)?;
    let covariance = model
        .f
        .matmul(&prev.covariance)?
        .matmul(&model.f.transpose())?
        .add(&model.w)?
        .symmetrize()?;
    let y_hat = model.h.matmul(&mean)?;
    Ok((Belief { mean, covariance }, y_hat))
}

/// Innovation covariance `S = H Σ H^T + V` and gain `K = Σ H^T S^{-1}`
/// for a predicted covariance.
pub fn kalman_gain(model: &StateSpaceModel, predicted_cov: &Matrix) -> Result<(Matrix, Matrix)> {
    let h_sigma = model.h.matmul(predicted_cov)?;
    let s = h_sigma
        .matmul(&model.h.transpose())?
        .add(&model.v)?
        .symmetrize()?;
    // S K^T = H Σ, with Σ and S symmetric.
    let gain = s.solve_spd(&h_sigma)?.transpose();
    Ok((s, gain))
}

/// Limit of the gain recursion started from a zero posterior covariance.
/// Iterates until successive gains differ by less than `tol` (max-abs).
pub fn steady_state_gain(model: &StateSpaceModel, tol: f64, max_iter: usize) -> Result<Matrix> {
    let mut posterior = Matrix::zeros(model.state_dim(), model.state_dim());
    let mut previous: Option<Matrix> = None;
    for _ in 0..max_iter {
        let predicted = model
            .f
            .matmul(&posterior)?
            .matmul(&model.f.transpose())?
            .add(&model.w)?
            .symmetrize()?;
        let (_, gain) = kalman_gain(model, &predicted)?;
        let eye = Matrix::identity(model.state_dim());
        posterior = eye.sub(&gain.matmul(&model.h)?)?.matmul(&predicted)?.symmetrize()?;
        if let Some(prev) = &previous {
            if gain.sub(prev)?.max_abs() < tol {
                return Ok(gain);
            }
        }
        previous = Some(gain);
    }
    Err(Error::Domain(format!("gain recursion did not converge in {max_iter} steps")))
}

/// Measurement update with the closed-form gain.
pub fn kf_update(
    model: &StateSpaceModel,
    predicted: &Belief,
    y_hat: &Matrix,
    y: &Matrix,
) -> Result<(Belief, UpdateReport)> {
    let innovation = y.sub(y_hat)?;
    let (s, gain) = kalman_gain(model, &predicted.covariance)?;
    let mean = predicted.mean.add(&gain.matmul(&innovation)?)?;
    let covariance = predicted
        .covariance
        .sub(&gain.matmul(&s)?.matmul(&gain.transpose())?)?
        .symmetrize()?;
    Ok((
        Belief { mean, covariance },
        UpdateReport {
            innovation,
            innovation_covariance: s,
            gain,
        },
    ))
}

/// Output of [`filter_trajectory`]: `beliefs[0]` is the prior, `beliefs[t]`
/// the posterior after `y_t`; `reports[t - 1]` belongs to step `t`.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub beliefs: Vec<Belief>,
    pub reports: Vec<UpdateReport>,
}

/// Run the filter over `u_0..u_{T-1}` and `y_1..y_T`.
pub fn filter_trajectory(
    model: &StateSpaceModel,
    prior: Belief,
    controls: &[Matrix],
    observations: &[Matrix],
) -> Result<FilterOutput> {
    if controls.len() != observations.len() {
        return Err(Error::Contract(format!(
            "{} controls for {} observations",
            controls.len(),
            observations.len()
        )));
    }
    let mut beliefs = Vec::with_capacity(controls.len() + 1);
    let mut reports = Vec::with_capacity(controls.len());
    beliefs.push(prior);
    for (u, y) in controls.iter().zip(observations) {
        let prev = beliefs.last().expect("prior present");
        let (pred, y_hat) = kf_predict(model, prev, u)?;
        let (post, report) = kf_update(model, &pred, &y_hat, y)?;
        beliefs.push(post);
        reports.push(report);
    }
    Ok(FilterOutput { beliefs, reports })
}
