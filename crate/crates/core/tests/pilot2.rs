use std::sync::Arc;
use mfglab::fbsde::*;
use mfglab::mkv::{equilibrium_coefficients, mfe_cost, solve_mkv, EnsembleStreams};
use mfglab::model::make_lq;
use mfglab::riccati::{solve_riccati_mfe, LqParams};

#[test]
#[ignore]
fn pilot_long_horizon() {
    let params = LqParams::<f64>::scalar(0.25, 1.0, 0.5, 0.5, 5.0, 0.4, 0.3, 0.6, 0.25);
    let spec = Arc::new(make_lq(&params).unwrap());
    let grid = TimeGrid::new(5.0, 250).unwrap();
    let layout = EnsembleLayout { paths: 8, particles: 128 };
    let config = SolverConfig::default();

    // plain Picard on the equilibrium system with a frozen uncontrolled flow
    let coeffs = equilibrium_coefficients(&spec);
    let streams = EnsembleStreams::field(42);
    let mut ens = mfglab::mkv::build_ensemble(&spec, grid, layout, &streams, 1);
    // populate а flow from uncontrolled dynamics quickly: use forward with zero fields
    let flow = forward_pass(&coeffs, &mut ens, &FlowPolicy::SelfConsistent, None, 1e8).unwrap();
    let mut ens2 = ens.clone_noise_only();
    let t0 = std::time::Instant::now();
    let picard = picard_solve(&coeffs, &mut ens2, &FlowPolicy::Frozen(&flow), &config, None);
    println!("picard on T=5: {:?} ({:?})", picard.as_ref().map(|o| o.log.iters).map_err(|e| e.to_string()), t0.elapsed());

    let t0 = std::time::Instant::now();
    let sol = solve_mkv(&spec, grid, layout, &config, &EnsembleStreams::field(42));
    match sol {
        Ok(sol) => {
            let oracle = solve_riccati_mfe(&params).unwrap();
            let y0 = sol.y0_mean()[0];
            println!(
                "solve_mkv ok in {:?}: y0 {} vs oracle {} rel {:.4}; cost {} vs {} rel {:.4}; continuation={} outer={}",
                t0.elapsed(),
                y0,
                oracle.y0_mean[0],
                (y0 - oracle.y0_mean[0]).abs() / oracle.y0_mean[0].abs(),
                mfe_cost(&spec, &sol),
                oracle.cost,
                (mfe_cost(&spec, &sol) - oracle.cost).abs() / oracle.cost,
                sol.used_continuation,
                sol.outer_iters
            );
        }
        Err(e) => println!("solve_mkv FAILED in {:?}: {e}", t0.elapsed()),
    }
}
