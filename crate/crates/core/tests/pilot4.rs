use std::sync::Arc;
use mfglab::fbsde::*;
use mfglab::mkv::{equilibrium_coefficients, EnsembleStreams};
use mfglab::model::make_lq;
use mfglab::riccati::LqParams;

#[test]
#[ignore]
fn pilot_damping_ladder() {
    let params = LqParams::<f64>::scalar(0.25, 1.0, 0.5, 0.5, 5.0, 0.4, 0.3, 0.6, 0.25);
    let spec = Arc::new(make_lq(&params).unwrap());
    let grid = TimeGrid::new(5.0, 250).unwrap();
    let layout = EnsembleLayout { paths: 8, particles: 128 };
    let coeffs = equilibrium_coefficients(&spec);
    let streams = EnsembleStreams::field(42);
    let mut ens = mfglab::mkv::build_ensemble(&spec, grid, layout, &streams, 1);
    let flow = forward_pass(&coeffs, &mut ens, &FlowPolicy::SelfConsistent, None, 1e8).unwrap();
    let zero = coeffs.blend(0.0);
    for theta in [1.0, 0.5, 0.25, 0.125] {
        let mut e = ens.clone_noise_only();
        let config = SolverConfig { damping: theta, picard_max_iters: 400, ..SolverConfig::default() };
        let r = field_solve(&zero, &mut e, &FlowPolicy::Frozen(&flow), &config, None, None);
        match r {
            Ok((out, _)) => println!("theta={theta}: ok iters={}", out.log.iters),
            Err(e) => println!("theta={theta}: err {e}"),
        }
    }
    // also examine residual trajectory at theta=0.5 with high blowup limit
    let mut e = ens.clone_noise_only();
    let config = SolverConfig { damping: 0.5, picard_max_iters: 60, blowup_limit: 1e300, ..SolverConfig::default() };
    if let Ok((out, _)) = field_solve(&zero, &mut e, &FlowPolicy::Frozen(&flow), &config, None, None) {
        println!("residuals: {:?}", out.log.residuals);
    } else if let Err(err) = field_solve(&zero, &mut ens.clone_noise_only(), &FlowPolicy::Frozen(&flow), &config, None, None) {
        println!("still err: {err}");
    }
}
