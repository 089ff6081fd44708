//! Finite-horizon LQR: backward Riccati recursion and the linear feedback law.

use crate::dynamics::StateSpaceModel;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Quadratic cost over a finite horizon, measured as deviations from the
/// state and control targets.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q_state: Matrix,
    pub q_final: Matrix,
    pub r_control: Matrix,
    pub horizon: usize,
    pub state_target: Matrix,
    pub control_target: Matrix,
}

impl QuadraticCost {
    pub fn new(
        q_state: Matrix,
        q_final: Matrix,
        r_control: Matrix,
        horizon: usize,
        state_target: Matrix,
        control_target: Matrix,
    ) -> Result<Self> {
        let cost = QuadraticCost {
            q_state,
            q_final,
            r_control,
            horizon,
            state_target,
            control_target,
        };
        cost.validate()?;
        Ok(cost)
    }

    /// Identity weights and zero targets.
    pub fn identity(m: usize, q: usize, horizon: usize) -> Self {
        QuadraticCost {
            q_state: Matrix::identity(m),
            q_final: Matrix::identity(m),
            r_control: Matrix::identity(q),
            horizon,
            state_target: Matrix::zeros(m, 1),
            control_target: Matrix::zeros(q, 1),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.q_state.rows()
    }

    pub fn control_dim(&self) -> usize {
        self.r_control.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.q_state.rows();
        let q = self.r_control.rows();
        for (op, got, want) in [
            ("cost Q_state", self.q_state.shape(), (m, m)),
            ("cost Q_final", self.q_final.shape(), (m, m)),
            ("cost R_control", self.r_control.shape(), (q, q)),
            ("cost state target", self.state_target.shape(), (m, 1)),
            ("cost control target", self.control_target.shape(), (q, 1)),
        ] {
            if got != want {
                return Err(Error::Dimension {
                    op,
                    lhs: got,
                    rhs: want,
                });
            }
        }
        for (name, w) in [("Q_state", &self.q_state), ("Q_final", &self.q_final)] {
            w.psd_sqrt()
                .map_err(|_| Error::Domain(format!("{name} is not positive semi-definite")))?;
        }
        if q > 0 {
            self.r_control.cholesky()?;
        }
        Ok(())
    }

    /// Multiply every weight matrix by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        QuadraticCost {
            q_state: self.q_state.scale(factor),
            q_final: self.q_final.scale(factor),
            r_control: self.r_control.scale(factor),
            ..self.clone()
        }
    }
}

/// Feedback gains `L_0..L_{T-1}` and cost-to-go matrices `P_0..P_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub gains: Vec<Matrix>,
    pub riccati: Vec<Matrix>,
}

impl GainSchedule {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }
}

/// Backward Riccati recursion from `P_T = Q_final`:
/// `L_t = (R + G^T P_{t+1} G)^{-1} G^T P_{t+1} F` and
/// `P_t = Q + F^T P_{t+1} F - F^T P_{t+1} G L_t`.
pub fn riccati_backward(design: &StateSpaceModel, cost: &QuadraticCost) -> Result<GainSchedule> {
    if cost.state_dim() != design.state_dim() || cost.control_dim() != design.control_dim() {
        return Err(Error::Dimension {
            op: "riccati_backward",
            lhs: (design.state_dim(), design.control_dim()),
            rhs: (cost.state_dim(), cost.control_dim()),
        });
    }
    let f = &design.f;
    let g = &design.g;
    let ft = f.transpose();
    let gt = g.transpose();
    let horizon = cost.horizon;

    let mut riccati = vec![Matrix::zeros(0, 0); horizon + 1];
    let mut gains = vec![Matrix::zeros(0, 0); horizon];
    riccati[horizon] = cost.q_final.symmetrize()?;
    for t in (0..horizon).rev() {
        let p_next = &riccati[t + 1];
        let gt_p = gt.matmul(p_next)?;
        let bracket = cost.r_control.add(&gt_p.matmul(g)?)?.symmetrize()?;
        let gain = bracket.solve_spd(&gt_p.matmul(f)?)?;
        let ft_p = ft.matmul(p_next)?;
        let p = cost
            .q_state
            .add(&ft_p.matmul(f)?)?
            .sub(&ft_p.matmul(g)?.matmul(&gain)?)?
            .symmetrize()?;
        gains[t] = gain;
        riccati[t] = p;
    }
    Ok(GainSchedule { gains, riccati })
}

/// `u = u_target - L (x_hat - x_target)`.
pub fn lqr_control(gain: &Matrix, x_hat: &Matrix, cost: &QuadraticCost) -> Result<Matrix> {
    let dev = x_hat.sub(&cost.state_target)?;
    cost.control_target.sub(&gain.matmul(&dev)?)
}
