//! Fit result persistence.
//!
//! The JSON layout keeps every timing figure inside `meta.timing`, so two
//! runs with the same seed produce byte-identical files apart from that one
//! block. Floats round-trip losslessly (shortest-representation encoding).

use crate::error::{CliError, Result};
use nlmevem::ad::AdMode;
use nlmevem::fit::FitResult;
use nlmevem::marginal::LoglikReport;
use nlmevem::variational::{scale_len, VariationalState};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDoc {
    pub theta: ThetaDoc,
    pub subjects: Vec<SubjectDoc>,
    pub trace: Vec<TraceEntryDoc>,
    pub loglik: FitLoglikDoc,
    pub meta: MetaDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaDoc {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectDoc {
    pub id: String,
    pub mu: Vec<f64>,
    pub scale_raw: Vec<f64>,
    pub dense: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntryDoc {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step_size: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitLoglikDoc {
    pub elbo: LoglikReportDoc,
    pub importance: LoglikReportDoc,
    pub laplace: LoglikReportDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoglikReportDoc {
    pub method: String,
    pub total: f64,
    pub per_subject: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_se: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_subject_mc_se: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inner_iterations: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inner_converged: Vec<bool>,
}

impl From<&LoglikReport> for LoglikReportDoc {
    fn from(r: &LoglikReport) -> Self {
        LoglikReportDoc {
            method: r.method.to_string(),
            total: r.total,
            per_subject: r.per_subject.clone(),
            mc_se: r.mc_se,
            per_subject_mc_se: r.per_subject_mc_se.clone(),
            samples: r.samples,
            nodes: r.nodes,
            inner_iterations: r.inner_iterations.clone(),
            inner_converged: r.inner_converged.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaDoc {
    pub model: String,
    pub variant: String,
    pub termination: String,
    pub seed: u64,
    pub dense: bool,
    pub draws_per_subject: usize,
    pub map_prior: bool,
    pub minibatch_percent: f64,
    pub minibatch_scheme: String,
    pub ode_steps: usize,
    pub ode_steps_tuned: bool,
    pub ad_mode: String,
    pub is_samples: usize,
    pub objective_evals: usize,
    pub skipped_steps: usize,
    pub lbfgs: LbfgsDoc,
    pub adam: AdamDoc,
    pub timing: TimingDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbfgsDoc {
    pub memory: usize,
    pub c1: f64,
    pub backtrack: f64,
    pub max_ls_trials: usize,
    pub grad_norm_tol: f64,
    pub rel_obj_tol: f64,
    pub max_iters: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamDoc {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay: f64,
    pub clip_norm: f64,
    pub max_iters: usize,
}

/// The only block allowed to differ between reruns of the same seed.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingDoc {
    pub wall_time_s: f64,
    pub per_iteration_s: Vec<f64>,
}

pub fn fit_doc(model: &str, ids: &[String], result: &FitResult) -> FitDoc {
    let subjects = ids
        .iter()
        .zip(&result.states)
        .map(|(id, s)| SubjectDoc {
            id: id.clone(),
            mu: s.mu.clone(),
            scale_raw: s.scale_raw.clone(),
            dense: s.dense,
        })
        .collect();
    let trace = result
        .trace
        .iter()
        .map(|t| TraceEntryDoc {
            iteration: t.iteration,
            objective: t.objective,
            grad_norm: t.grad_norm,
            step_size: t.step_size,
        })
        .collect();
    let meta = &result.meta;
    FitDoc {
        theta: ThetaDoc {
            names: result.theta_names.clone(),
            values: result.theta.clone(),
        },
        subjects,
        trace,
        loglik: FitLoglikDoc {
            elbo: (&result.loglik.elbo).into(),
            importance: (&result.loglik.importance).into(),
            laplace: (&result.loglik.laplace).into(),
        },
        meta: MetaDoc {
            model: model.to_string(),
            variant: meta.variant.as_str().to_string(),
            termination: result.termination.as_str().to_string(),
            seed: meta.seed,
            dense: meta.dense,
            draws_per_subject: meta.draws_per_subject,
            map_prior: meta.map_prior,
            minibatch_percent: meta.minibatch_percent,
            minibatch_scheme: meta.minibatch_scheme.to_string(),
            ode_steps: meta.ode_steps,
            ode_steps_tuned: meta.ode_steps_tuned,
            ad_mode: match meta.ad_mode {
                AdMode::Forward => "forward".to_string(),
                AdMode::Reverse => "reverse".to_string(),
            },
            is_samples: meta.is_samples,
            objective_evals: meta.objective_evals,
            skipped_steps: meta.skipped_steps,
            lbfgs: LbfgsDoc {
                memory: meta.lbfgs.memory,
                c1: meta.lbfgs.c1,
                backtrack: meta.lbfgs.backtrack,
                max_ls_trials: meta.lbfgs.max_ls_trials,
                grad_norm_tol: meta.lbfgs.grad_norm_tol,
                rel_obj_tol: meta.lbfgs.rel_obj_tol,
                max_iters: meta.lbfgs.max_iters,
            },
            adam: AdamDoc {
                learning_rate: meta.adam.learning_rate,
                beta1: meta.adam.beta1,
                beta2: meta.adam.beta2,
                epsilon: meta.adam.epsilon,
                decay: meta.adam.decay,
                clip_norm: meta.adam.clip_norm,
                max_iters: meta.adam.max_iters,
            },
            timing: TimingDoc {
                wall_time_s: meta.wall_time_s,
                per_iteration_s: result.trace.iter().map(|t| t.wall_time_s).collect(),
            },
        },
    }
}

impl FitDoc {
    pub fn load(path: &Path) -> Result<FitDoc> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let doc: FitDoc = serde_path_to_error::deserialize(de).map_err(|e| {
            CliError::parse(path, format!("at `{}`: {}", e.path(), e.inner()))
        })?;
        doc.validate(path)?;
        Ok(doc)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.theta.names.len() != self.theta.values.len() {
            return Err(CliError::parse(
                path,
                format!(
                    "theta has {} names but {} values",
                    self.theta.names.len(),
                    self.theta.values.len()
                ),
            ));
        }
        for s in &self.subjects {
            let want = scale_len(s.mu.len(), s.dense);
            if s.scale_raw.len() != want {
                return Err(CliError::parse(
                    path,
                    format!(
                        "subject {}: scale_raw has {} entries, expected {}",
                        s.id,
                        s.scale_raw.len(),
                        want
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("fit document serializes");
        text.push('\n');
        text
    }

    /// Variational state for a data subject, matched by id.
    pub fn state_for(&self, id: &str) -> Option<VariationalState> {
        self.subjects.iter().find(|s| s.id == id).map(|s| VariationalState {
            mu: s.mu.clone(),
            scale_raw: s.scale_raw.clone(),
            dense: s.dense,
        })
    }
}

pub fn report_to_json(report: &LoglikReport) -> String {
    let doc: LoglikReportDoc = report.into();
    let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
    text.push('\n');
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use nlmevem::fit::{fit, FitConfig};
    use nlmevem::model::{simulate_population, LinearGaussian, Model, Subject};
    use std::collections::BTreeMap;

    fn small_fit() -> (Vec<Subject>, FitResult) {
        let model = LinearGaussian;
        let design =
            Subject::design("d", vec![0.0, 1.0, 2.0], Vec::new(), BTreeMap::new()).unwrap();
        let (subjects, _) =
            simulate_population(&model, 6, &design, &model.theta_init(), 11).unwrap();
        let result = fit(&model, &subjects, &FitConfig::default()).unwrap();
        (subjects, result)
    }

    #[test]
    fn json_round_trips_and_isolates_timing() {
        let (subjects, result) = small_fit();
        let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
        let doc = fit_doc("linear_gaussian", &ids, &result);
        let text = doc.to_json();
        assert!(text.ends_with('\n'));
        assert_eq!(text.matches("wall_time_s").count(), 1);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.json");
        doc.save(&path).unwrap();
        let back = FitDoc::load(&path).unwrap();
        assert_eq!(back.theta.values, result.theta);
        assert_eq!(back.subjects.len(), subjects.len());
        let state = back.state_for("3").unwrap();
        assert_eq!(state.mu, result.states[2].mu);
        assert_eq!(state.scale_raw, result.states[2].scale_raw);
        assert!(back.state_for("nope").is_none());
        assert_eq!(back.meta.model, "linear_gaussian");
        assert_eq!(back.meta.variant, "deterministic");
        assert_eq!(back.meta.timing.per_iteration_s.len(), back.trace.len());
    }

    #[test]
    fn rerun_differs_only_in_timing() {
        let (subjects, first) = small_fit();
        let (_, second) = small_fit();
        let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
        let mut a = fit_doc("linear_gaussian", &ids, &first);
        let mut b = fit_doc("linear_gaussian", &ids, &second);
        a.meta.timing = TimingDoc {
            wall_time_s: 0.0,
            per_iteration_s: Vec::new(),
        };
        b.meta.timing = TimingDoc {
            wall_time_s: 0.0,
            per_iteration_s: Vec::new(),
        };
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn malformed_results_are_rejected_with_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.json");
        std::fs::write(&path, "{\"theta\": 3}").unwrap();
        let err = FitDoc::load(&path).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
