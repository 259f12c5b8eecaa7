use std::sync::Arc;
use mfglab::fbsde::*;
use mfglab::measure::MeasureFlow;
use mfglab::mkv::{equilibrium_coefficients, EnsembleStreams};
use mfglab::model::make_lq;
use mfglab::riccati::{solve_riccati_mfe, LqParams};

#[test]
#[ignore]
fn pilot_outer_loop_trace() {
    let f_cost: f64 = std::env::var("PILOT_F").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let rho: f64 = std::env::var("PILOT_RHO").ok().and_then(|v| v.parse().ok()).unwrap_or(0.5);
    let params = LqParams::<f64>::scalar(0.25, f_cost, rho, 0.5, 5.0, 0.4, 0.3, 0.6, 0.25);
    let spec = Arc::new(make_lq(&params).unwrap());
    let steps: usize = std::env::var("PILOT_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(250);
    let grid = TimeGrid::new(5.0, steps).unwrap();
    let paths: usize = std::env::var("PILOT_PATHS").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    let parts: usize = std::env::var("PILOT_PARTS").ok().and_then(|v| v.parse().ok()).unwrap_or(128);
    let layout = EnsembleLayout { paths, particles: parts };
    let config = SolverConfig::default();
    let coeffs = equilibrium_coefficients(&spec);
    let streams = EnsembleStreams::field(42);
    let mut ens = mfglab::mkv::build_ensemble(&spec, grid, layout, &streams, 1);
    let mut flow = forward_pass(&coeffs, &mut ens, &FlowPolicy::SelfConsistent, None, 1e8).unwrap();
    ens = ens.clone_noise_only();
    let oracle = solve_riccati_mfe(&params).unwrap();

    let mut maps = None;
    for outer in 1..=12 {
        let policy = FlowPolicy::Frozen(&flow);
        let r = field_solve(&coeffs, &mut ens, &policy, &config, None, maps.clone());
        let (out, m) = match r {
            Ok(v) => v,
            Err(e) => { println!("outer {outer}: field err {e}"); 
                ens = ens.clone_noise_only();
                let (out, _) = continuation_solve(&coeffs, &mut ens, &policy, &config).unwrap();
                let m2 = out.maps.clone();
                (out, m2)
            }
        };
        maps = Some(m);
        let new_flow = MeasureFlow::from_ensemble(&ens);
        let change = flow.max_mean_sq_distance(&new_flow);
        // y0 mean now
        let mut y0 = 0.0;
        for p in 0..8 { for mm in 0..128 { y0 += ens.y_at(p, mm, 0)[0]; } }
        y0 /= 1024.0;
        println!("outer {outer}: inner_iters={} damping={} change={change:.5e} y0={y0:.5} oracle_y0={:.5}", out.log.iters, out.damping_used, oracle.y0_mean[0]);
        flow = new_flow;
    }
}
