use std::sync::Arc;
use mfglab::chaos::{run_chaos_study, StudyPlan};
use mfglab::fbsde::{SolverConfig, TimeGrid};
use mfglab::model::make_lq;
use mfglab::riccati::LqParams;

#[test]
#[ignore]
fn pilot_chaos_study() {
    let params = LqParams::<f64>::scalar(0.25, 1.0, 0.5, 0.5, 1.0, 0.4, 0.3, 0.6, 0.25);
    let spec = Arc::new(make_lq(&params).unwrap());
    let plan = StudyPlan {
        ns: vec![8, 16, 32, 64, 128],
        trials: 32,
        grid: TimeGrid::new(1.0, 100).unwrap(),
        mkv_particles: 256,
        chaos_k: 4,
        moment_order: 4.0,
        seed: 42,
    };
    let config = SolverConfig::default();
    let t0 = std::time::Instant::now();
    let result = run_chaos_study(&spec, &plan, &config).unwrap();
    println!("elapsed: {:?}", t0.elapsed());
    for e in &result.entries {
        println!(
            "N={:<4} state={:.5e} (se {:.1e}) ctrl={:.5e} eF={:.3e} eG={:.3e} cont={}",
            e.n_players,
            e.mean_sup_state_err,
            e.stderr_sup_state_err,
            e.mean_control_err,
            e.per_trial.iter().filter_map(|t| t.errors.e_f_sq).sum::<f64>() / 32.0,
            e.per_trial.iter().filter_map(|t| t.errors.e_g_sq).sum::<f64>() / 32.0,
            e.used_continuation,
        );
    }
    println!("state slope: {:?}", result.fitted_slope);
    println!("control slope: {:?}", result.control_slope);
    println!("eF slope: {:?}", result.error_slopes.e_f);
    println!("eG slope: {:?}", result.error_slopes.e_g);
    println!("observed M4: {:.4e}", result.observed_moment);
}
