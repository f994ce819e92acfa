use nlmevem::fit::{fit, FitConfig};
use nlmevem::model::{by_name, simulate_population, DoseEvent, Model, Subject};
use std::collections::BTreeMap;
use std::time::Instant;

fn main() {
    let model = by_name("warfarin_pkpd").unwrap();
    let truth = model.theta_init();
    let mut cov = BTreeMap::new();
    cov.insert("WT".to_string(), 70.0);
    let doses = vec![DoseEvent {
        time: 0.0,
        amount: 105.0,
        compartment: 0,
        lag_name: Some("lag".to_string()),
    }];
    let times = vec![
        0.0, 0.5, 1.0, 2.0, 3.0, 6.0, 9.0, 12.0, 24.0, 36.0, 48.0, 72.0, 96.0, 120.0,
    ];
    let design = Subject::design("d", times, doses, cov).unwrap();
    let (subjects, _) = simulate_population(&model, 31, &design, &truth, 707).unwrap();

    let factors = [1.3, 0.75, 1.15, 0.85, 1.25, 0.9, 1.35, 0.8];
    let start: Vec<f64> = truth
        .iter()
        .enumerate()
        .map(|(i, t)| t * factors[i % factors.len()])
        .collect();

    let mut config = FitConfig::default();
    config.dense = true;
    config.elbo.m = 15;
    config.lbfgs.grad_norm_tol = 1e-3;
    config.lbfgs.rel_obj_tol = 1e-5;
    config.lbfgs.max_iters = 2500;
    config.lbfgs.memory = 100;
    config.theta_init = Some(start);
    let t0 = Instant::now();
    let result = fit(&model, &subjects, &config).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let elbo = result.loglik.elbo.total;
    let lap = result.loglik.laplace.total;
    println!(
        "iters={} term={:?} evals={} ode_steps={} tuned={} elbo={elbo:.3} laplace={lap:.3} gap={:.3} secs={secs:.0}",
        result.trace.len(),
        result.termination,
        result.meta.objective_evals,
        result.meta.ode_steps,
        result.meta.ode_steps_tuned,
        (elbo - lap).abs()
    );
    println!(
        "pop_cl {:.4} (truth {:.4})  pop_v {:.3} (truth {:.3})",
        result.theta[0], truth[0], result.theta[1], truth[1]
    );
    for w in result.trace.chunks(100) {
        let t = &w[w.len() - 1];
        println!(
            "  iter {:4}  obj {:.3}  grad {:.2e}  step {:.2e}",
            t.iteration, t.objective, t.grad_norm, t.step_size
        );
    }
}
