//! Subcommand implementations.

use crate::config::{resolve_seed, AdModeArg, FileConfig, VariantArg};
use crate::dataset;
use crate::error::{CliError, Result};
use crate::result_io::{self, FitDoc};
use nlmevem::elbo::ElboConfig;
use nlmevem::fit::{compute_ebes, fit, FitConfig};
use nlmevem::marginal::{
    default_gh_nodes, report_elbo, report_gh, report_is, report_laplace,
};
use nlmevem::model::{by_name, EvalCtx, Model, Subject};
use nlmevem::variational::VariationalState;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, clap::Args)]
pub struct FitArgs {
    /// Model name from the built-in catalog
    #[arg(long)]
    pub model: String,
    /// Dataset CSV
    #[arg(long)]
    pub data: PathBuf,
    /// JSON configuration file (defaults apply for absent fields)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output path for the fit result JSON
    #[arg(long)]
    pub out: PathBuf,
    /// RNG seed (overrides config file and NLMEVEM_SEED; default 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Algorithm variant (default deterministic)
    #[arg(long)]
    pub variant: Option<VariantArg>,
    /// Gradient mode (default auto: reverse above 512 parameters)
    #[arg(long)]
    pub ad_mode: Option<AdModeArg>,
    /// Gradient-norm stopping tolerance (default 1e-3)
    #[arg(long)]
    pub grad_tol: Option<f64>,
    /// Relative objective-change stopping tolerance (default 1e-5)
    #[arg(long)]
    pub rel_obj_tol: Option<f64>,
    /// Monte Carlo draws per subject (default 15)
    #[arg(long)]
    pub samples: Option<usize>,
    /// Print a one-line summary per iteration
    #[arg(long)]
    pub verbose: bool,
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let model = by_name(&args.model)?;
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(name) = &file.model {
        if name != &args.model {
            return Err(CliError::Usage(format!(
                "config file names model `{name}` but --model is `{}`",
                args.model
            )));
        }
    }
    let mut config: FitConfig = file.to_fit_config();
    config.seed = resolve_seed(args.seed, file.seed)?;
    if let Some(v) = args.variant {
        config.variant = v.into();
    }
    if let Some(m) = args.ad_mode {
        config.ad_mode = m.into();
    }
    if let Some(t) = args.grad_tol {
        config.lbfgs.grad_norm_tol = t;
    }
    if let Some(t) = args.rel_obj_tol {
        config.lbfgs.rel_obj_tol = t;
    }
    if let Some(m) = args.samples {
        config.elbo.m = m;
    }

    let subjects = dataset::read_subjects(&args.data, &model)?;
    let result = fit(&model, &subjects, &config)?;

    if args.verbose {
        for t in &result.trace {
            println!(
                "iter {:>4}  objective {:.6}  grad_norm {:.3e}  step {:.3e}  wall {:.3}s",
                t.iteration, t.objective, t.grad_norm, t.step_size, t.wall_time_s
            );
        }
        println!(
            "{} after {} iterations, objective {:.6}, wall {:.3}s",
            result.termination.as_str(),
            result.trace.len(),
            result.trace.last().map_or(f64::NAN, |t| t.objective),
            result.meta.wall_time_s
        );
    }

    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    result_io::fit_doc(model.name(), &ids, &result).save(&args.out)
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// Model name from the built-in catalog
    #[arg(long)]
    pub model: String,
    /// Number of subjects to simulate
    #[arg(long)]
    pub n: usize,
    /// JSON file with population parameters: an array, {"values": [..]},
    /// or a fit result (default: the model's init values)
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// Design CSV; the first subject supplies times, doses, and covariates
    #[arg(long)]
    pub design: PathBuf,
    /// RNG seed (overrides NLMEVEM_SEED; default 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path for the dataset CSV
    #[arg(long)]
    pub out: PathBuf,
}

fn load_theta<M: Model>(path: &Path, model: &M) -> Result<Vec<f64>> {
    #[derive(Deserialize)]
    struct Inner {
        values: Vec<f64>,
    }
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum ThetaFile {
        Bare(Vec<f64>),
        Named { values: Vec<f64> },
        FitResult { theta: Inner },
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed: ThetaFile = serde_json::from_str(&text).map_err(|e| {
        CliError::parse(path, format!("expected a theta array or object: {e}"))
    })?;
    let values = match parsed {
        ThetaFile::Bare(v) => v,
        ThetaFile::Named { values } => values,
        ThetaFile::FitResult { theta } => theta.values,
    };
    validate_theta(model, &values).map_err(|e| CliError::parse(path, e))?;
    Ok(values)
}

fn validate_theta<M: Model>(model: &M, theta: &[f64]) -> std::result::Result<(), String> {
    if theta.len() != model.n_theta() {
        return Err(format!(
            "{} takes {} parameters, got {}",
            model.name(),
            model.n_theta(),
            theta.len()
        ));
    }
    let names = model.theta_names();
    for ((value, domain), name) in theta.iter().zip(model.theta_domains()).zip(&names) {
        if !domain.contains(*value) {
            return Err(format!("{name} = {value} is outside its domain"));
        }
    }
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let model = by_name(&args.model)?;
    let theta = match &args.theta {
        Some(path) => load_theta(path, &model)?,
        None => model.theta_init(),
    };
    let seed = resolve_seed(args.seed, None)?;

    let designs = dataset::read_subjects(&args.design, &model)?;
    let subjects = if args.n == 0 {
        Vec::new()
    } else {
        let design = designs.first().ok_or_else(|| {
            CliError::parse(&args.design, "design file contains no subjects")
        })?;
        let (subjects, _) =
            nlmevem::model::simulate_population(&model, args.n, design, &theta, seed)?;
        subjects
    };
    dataset::write_subjects_to(&args.out, &subjects, &model)
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum LoglikMethod {
    /// Replay the fitted variational bound on its stored draw stream
    Elbo,
    /// Importance sampling with the fitted variational proposals
    Is,
    /// Laplace approximation at the per-subject joint modes
    Laplace,
    /// Adaptive Gauss-Hermite quadrature (r <= 2)
    Gh,
}

#[derive(Debug, clap::Args)]
pub struct LoglikArgs {
    /// Marginal log-likelihood approximation
    #[arg(long, value_enum)]
    pub method: LoglikMethod,
    /// Fit result JSON from the fit command
    #[arg(long)]
    pub result: PathBuf,
    /// Dataset CSV
    #[arg(long)]
    pub data: PathBuf,
    /// Sample count for elbo/is (defaults: the fit's stored counts)
    #[arg(long)]
    pub samples: Option<usize>,
    /// Quadrature nodes for gh (default 64 for r=1, 32 for r=2)
    #[arg(long)]
    pub nodes: Option<usize>,
}

/// Fitted states for data subjects, matched by id.
fn states_for(
    doc: &FitDoc,
    subjects: &[Subject],
    result_path: &Path,
) -> Result<Vec<VariationalState>> {
    subjects
        .iter()
        .map(|s| {
            doc.state_for(&s.id).ok_or_else(|| {
                CliError::Usage(format!(
                    "no fitted state for subject {} in {}",
                    s.id,
                    result_path.display()
                ))
            })
        })
        .collect()
}

pub fn cmd_loglik(args: &LoglikArgs) -> Result<()> {
    let doc = FitDoc::load(&args.result)?;
    let model = by_name(&doc.meta.model)?;
    let subjects = dataset::read_subjects(&args.data, &model)?;
    let theta = &doc.theta.values;
    let ctx = EvalCtx::with_steps(doc.meta.ode_steps);

    let report = match args.method {
        LoglikMethod::Elbo => {
            let states = states_for(&doc, &subjects, &args.result)?;
            let config = ElboConfig {
                m: args.samples.unwrap_or(doc.meta.draws_per_subject),
                seed: doc.meta.seed,
                ..ElboConfig::default()
            };
            report_elbo(&model, &subjects, theta, &states, &config, &ctx)?
        }
        LoglikMethod::Is => {
            let states = states_for(&doc, &subjects, &args.result)?;
            let m = args.samples.unwrap_or(doc.meta.is_samples);
            if m == 0 {
                return Err(CliError::Usage("--samples must be at least 1".into()));
            }
            report_is(&model, &subjects, theta, &states, m, doc.meta.seed, &ctx)?
        }
        LoglikMethod::Laplace => {
            let states = states_for(&doc, &subjects, &args.result)?;
            let inits: Vec<Vec<f64>> = states.iter().map(|s| s.mu.clone()).collect();
            report_laplace(&model, &subjects, theta, Some(&inits), &ctx)?
        }
        LoglikMethod::Gh => {
            let r = model.n_eta();
            if r > 2 {
                return Err(CliError::Usage(format!(
                    "gauss-hermite evaluation supports up to 2 random effects; {} has {r}",
                    model.name()
                )));
            }
            let nodes = args.nodes.unwrap_or_else(|| default_gh_nodes(r));
            report_gh(&model, &subjects, theta, nodes, &ctx)?
        }
    };
    print!("{}", result_io::report_to_json(&report));
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct EbeArgs {
    /// Fit result JSON from the fit command
    #[arg(long)]
    pub result: PathBuf,
    /// Dataset CSV
    #[arg(long)]
    pub data: PathBuf,
    /// Output path for the EBE CSV (id, eta.1..eta.r, converged)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_ebe(args: &EbeArgs) -> Result<()> {
    let doc = FitDoc::load(&args.result)?;
    let model = by_name(&doc.meta.model)?;
    let subjects = dataset::read_subjects(&args.data, &model)?;
    let states = states_for(&doc, &subjects, &args.result)?;
    let ctx = EvalCtx::with_steps(doc.meta.ode_steps);
    let ebes = compute_ebes(&model, &subjects, &doc.theta.values, &states, &ctx)?;

    let mut out = String::from("id");
    for k in 1..=model.n_eta() {
        out.push_str(&format!(",eta.{k}"));
    }
    out.push_str(",converged\n");
    for (subject, ebe) in subjects.iter().zip(&ebes) {
        out.push_str(&subject.id);
        for v in &ebe.eta {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push_str(if ebe.converged { ",true\n" } else { ",false\n" });
    }
    std::fs::write(&args.out, out).map_err(|e| CliError::io(&args.out, e))
}

/// `--help` footer listing the available models.
pub fn after_help() -> String {
    format!("Models: {}", nlmevem::model::CATALOG.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn simulate_fit_loglik_ebe_chain() {
        let dir = tempfile::tempdir().unwrap();
        let model = by_name("linear_gaussian").unwrap();
        let design = Subject::design(
            "d",
            vec![0.0, 1.0, 2.0, 3.0],
            Vec::new(),
            BTreeMap::new(),
        )
        .unwrap();
        let design_path = dir.path().join("design.csv");
        write(&design_path, &dataset::write_subjects(&[design], &model));

        let data_path = dir.path().join("data.csv");
        cmd_simulate(&SimulateArgs {
            model: "linear_gaussian".into(),
            n: 8,
            theta: None,
            design: design_path.clone(),
            seed: Some(5),
            out: data_path.clone(),
        })
        .unwrap();

        let out_path = dir.path().join("fit.json");
        cmd_fit(&FitArgs {
            model: "linear_gaussian".into(),
            data: data_path.clone(),
            config: None,
            out: out_path.clone(),
            seed: Some(5),
            variant: None,
            ad_mode: None,
            grad_tol: None,
            rel_obj_tol: None,
            samples: None,
            verbose: false,
        })
        .unwrap();
        let doc = FitDoc::load(&out_path).unwrap();
        assert_eq!(doc.subjects.len(), 8);
        assert_eq!(doc.meta.seed, 5);

        cmd_loglik(&LoglikArgs {
            method: LoglikMethod::Laplace,
            result: out_path.clone(),
            data: data_path.clone(),
            samples: None,
            nodes: None,
        })
        .unwrap();

        let ebe_path = dir.path().join("ebe.csv");
        cmd_ebe(&EbeArgs {
            result: out_path.clone(),
            data: data_path.clone(),
            out: ebe_path.clone(),
        })
        .unwrap();
        let ebe_text = std::fs::read_to_string(&ebe_path).unwrap();
        let mut lines = ebe_text.lines();
        assert_eq!(lines.next(), Some("id,eta.1,converged"));
        assert_eq!(lines.count(), 8);
    }

    #[test]
    fn simulate_zero_subjects_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let model = by_name("linear_gaussian").unwrap();
        let design = Subject::design("d", vec![1.0], Vec::new(), BTreeMap::new()).unwrap();
        let design_path = dir.path().join("design.csv");
        write(&design_path, &dataset::write_subjects(&[design], &model));
        let out = dir.path().join("empty.csv");
        cmd_simulate(&SimulateArgs {
            model: "linear_gaussian".into(),
            n: 0,
            theta: None,
            design: design_path,
            seed: Some(0),
            out: out.clone(),
        })
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&out).unwrap(),
            "id,time,evid,amt,cmt,y\n"
        );
    }

    #[test]
    fn theta_files_accept_three_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let model = by_name("linear_gaussian").unwrap();
        let path = dir.path().join("theta.json");

        write(&path, "[0.5, 1.2, 0.8]");
        assert_eq!(load_theta(&path, &model).unwrap(), vec![0.5, 1.2, 0.8]);

        write(&path, r#"{"values": [0.5, 1.2, 0.8]}"#);
        assert_eq!(load_theta(&path, &model).unwrap(), vec![0.5, 1.2, 0.8]);

        write(&path, r#"{"theta": {"names": ["a","b","c"], "values": [0.5, 1.2, 0.8]}}"#);
        assert_eq!(load_theta(&path, &model).unwrap(), vec![0.5, 1.2, 0.8]);

        write(&path, "[0.5]");
        let err = load_theta(&path, &model).unwrap_err();
        assert!(err.to_string().contains("3 parameters"), "{err}");

        write(&path, "[0.5, -1.0, 0.8]");
        let err = load_theta(&path, &model).unwrap_err();
        assert!(err.to_string().contains("outside its domain"), "{err}");
    }

    #[test]
    fn config_model_conflict_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("cfg.json");
        write(&config_path, r#"{"model": "ppca"}"#);
        let err = cmd_fit(&FitArgs {
            model: "linear_gaussian".into(),
            data: dir.path().join("absent.csv"),
            config: Some(config_path),
            out: dir.path().join("out.json"),
            seed: None,
            variant: None,
            ad_mode: None,
            grad_tol: None,
            rel_obj_tol: None,
            samples: None,
            verbose: false,
        })
        .unwrap_err();
        assert!(err.to_string().contains("ppca"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
