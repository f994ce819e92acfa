//! A damped oscillator whose forcing is set by a small MLP taking per-subject
//! inputs: two fixed features (a constant and the `z` covariate) with the two
//! random effects appended.
//!
//! The MLP has `width` hidden tanh units and a linear readout, no biases, so
//! the parameter count is exactly `5 * width`: construction picks the desk
//! scale. Because the MLP inputs are constant along a trajectory, its output
//! is computed once per likelihood evaluation and enters the drift as a
//! constant; gradient cost in reverse mode is therefore dominated by the
//! dynamics, not the parameter count, while forward mode still pays one pass
//! per chunk of the full parameter vector. The observation noise scale is a
//! fixed model constant so the weights are the only population parameters;
//! a standard-normal prior on each weight regularizes the over-parameterized
//! fit via the MAP hook.

use super::{normal_logpdf, Domain, EtaTransform, EvalCtx, Model, PriorCov, Subject};
use crate::ad::Scalar;
use crate::error::Result;
use crate::ode::{solve_rk4, OdeEvent};
use crate::rng;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::RngCore;

/// Observation noise scale (model constant, not a parameter).
pub const OBS_SD: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct MiniNeuralOde {
    width: usize,
}

impl MiniNeuralOde {
    pub fn new(width: usize) -> Self {
        assert!(width >= 1, "hidden width must be at least 1");
        MiniNeuralOde { width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// MLP output for one subject: hidden row dots over
    /// [1, z, eta1, eta2], tanh, then the linear readout.
    fn network<S: Scalar>(&self, z: f64, eta: &[S], theta: &[S]) -> S {
        let x = [S::one(), S::constant(z), eta[0], eta[1]];
        let mut hidden = Vec::with_capacity(self.width);
        for i in 0..self.width {
            let row = &theta[4 * i..4 * i + 4];
            hidden.push(S::dot(row, &x).tanh());
        }
        S::dot(&theta[4 * self.width..5 * self.width], &hidden)
    }

    fn trajectory<S: Scalar>(
        &self,
        subject: &Subject,
        eta: &[S],
        theta: &[S],
        steps: usize,
    ) -> Result<Vec<S>> {
        let z = subject.covariates.get("z").copied().unwrap_or(0.0);
        let force = self.network(z, eta, theta).tanh();
        let saves: Vec<S> = subject
            .observation_times
            .iter()
            .map(|t| S::constant(*t))
            .collect();
        let events: Vec<OdeEvent<S>> = subject
            .dose_events
            .iter()
            .map(|d| OdeEvent {
                time: S::constant(d.time),
                jumps: vec![(d.compartment, S::constant(d.amount))],
            })
            .collect();
        let half = S::constant(0.5);
        let sol = solve_rk4(
            |_t, y: &[S], dy: &mut [S]| {
                dy[0] = y[1];
                dy[1] = force - y[0] - half * y[1];
            },
            &[S::one(), S::zero()],
            S::zero(),
            &saves,
            &events,
            steps,
        )?;
        Ok(sol.states.iter().map(|y| y[0]).collect())
    }
}

impl Model for MiniNeuralOde {
    fn name(&self) -> &'static str {
        "mini_neural_ode"
    }
    fn n_theta(&self) -> usize {
        5 * self.width
    }
    fn n_eta(&self) -> usize {
        2
    }
    fn theta_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_theta());
        for i in 0..self.width {
            for j in 0..4 {
                names.push(format!("w_h_{i}_{j}"));
            }
        }
        for i in 0..self.width {
            names.push(format!("w_o_{i}"));
        }
        names
    }
    fn theta_domains(&self) -> Vec<Domain> {
        vec![Domain::Free; self.n_theta()]
    }
    fn theta_init(&self) -> Vec<f64> {
        // Deterministic pseudorandom weights keyed by the width: hidden rows
        // at sd 1/sqrt(fan_in) = 0.5, readout at sd 1/sqrt(width).
        let mut r = rng::stream(self.width as u64, &[rng::tag::INIT]);
        let mut theta = rng::standard_normal_vec(&mut r, self.n_theta());
        let out_sd = 1.0 / (self.width as f64).sqrt();
        for (k, w) in theta.iter_mut().enumerate() {
            *w *= if k < 4 * self.width { 0.5 } else { out_sd };
        }
        theta
    }
    fn eta_transforms(&self) -> Vec<EtaTransform> {
        vec![EtaTransform::Identity; 2]
    }
    fn response_names(&self) -> Vec<&'static str> {
        vec!["y"]
    }

    fn prior_moments<S: Scalar>(&self, _theta: &[S]) -> Result<(Vec<S>, PriorCov<S>)> {
        Ok((vec![S::zero(); 2], PriorCov::Diag(vec![S::one(); 2])))
    }

    fn conditional_loglik<S: Scalar>(
        &self,
        subject: &Subject,
        eta: &[S],
        theta: &[S],
        ctx: &EvalCtx,
    ) -> Result<S> {
        super::expect_responses(subject, 1, "mini_neural_ode")?;
        let traj = self.trajectory(subject, eta, theta, ctx.ode_steps)?;
        let sd = S::constant(OBS_SD);
        let mut ll = S::zero();
        for (u, y) in traj.iter().zip(&subject.observations[0]) {
            if let Some(y) = y {
                ll = ll + normal_logpdf(*y, *u, sd);
            }
        }
        Ok(ll)
    }

    fn theta_prior_logpdf<S: Scalar>(&self, theta: &[S]) -> Option<Result<S>> {
        let mut quad = S::zero();
        for w in theta {
            quad = quad + *w * *w;
        }
        Some(Ok(-S::constant(0.5) * quad
            - S::constant(0.5 * super::LN_2PI * theta.len() as f64)))
    }

    fn simulate(
        &self,
        design: &Subject,
        eta: &[f64],
        theta: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Vec<Option<f64>>>> {
        let traj = self.trajectory(design, eta, theta, EvalCtx::default().ode_steps)?;
        let noise = rng::standard_normal_vec(rng, traj.len());
        Ok(vec![traj
            .iter()
            .zip(&noise)
            .map(|(u, e)| Some(u + OBS_SD * e))
            .collect()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use alloc::string::ToString;

    #[test]
    fn parameter_count_tracks_width_exactly() {
        for (w, n) in [(20, 100), (80, 400), (320, 1600)] {
            let m = MiniNeuralOde::new(w);
            assert_eq!(m.n_theta(), n);
            assert_eq!(m.theta_init().len(), n);
            assert_eq!(m.theta_names().len(), n);
        }
    }

    #[test]
    fn init_is_width_deterministic() {
        assert_eq!(MiniNeuralOde::new(20).theta_init(), MiniNeuralOde::new(20).theta_init());
        assert_ne!(
            MiniNeuralOde::new(20).theta_init()[..100],
            MiniNeuralOde::new(80).theta_init()[..100]
        );
    }

    #[test]
    fn trajectory_settles_at_network_forcing() {
        // dv = tanh(nn) - u - v/2 settles at u = tanh(nn).
        let m = MiniNeuralOde::new(20);
        let theta = m.theta_init();
        let mut cov = BTreeMap::new();
        cov.insert("z".to_string(), 0.7);
        let d = Subject::design("s", vec![60.0], Vec::new(), cov).unwrap();
        let eta = [0.4, -0.9];
        let force: f64 = m.network(0.7, &eta, &theta).tanh();
        // one long segment: enough steps to stay inside RK4's stability region
        let traj = m.trajectory(&d, &eta, &theta, 256).unwrap();
        assert!(
            (traj[0] - force).abs() < 1e-6,
            "u(60) = {} vs forcing {force}",
            traj[0]
        );
    }
}
