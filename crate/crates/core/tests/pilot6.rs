use std::sync::Arc;
use mfglab::fbsde::*;
use mfglab::mkv::{equilibrium_coefficients, EnsembleStreams};
use mfglab::model::make_lq;
use mfglab::riccati::LqParams;

#[test]
#[ignore]
fn pilot_slope_profile() {
    // pure single-agent: q=0.25, g=0.5, p(t) ≡ 0.5 exactly
    let params = LqParams::<f64>::scalar(0.25, 0.0, 0.0, 0.5, 5.0, 0.4, 0.3, 0.6, 0.25);
    let spec = Arc::new(make_lq(&params).unwrap());
    let grid = TimeGrid::new(5.0, 500).unwrap();
    let layout = EnsembleLayout { paths: 8, particles: 128 };
    let config = SolverConfig::default();
    let coeffs = equilibrium_coefficients(&spec);
    let streams = EnsembleStreams::field(42);
    let mut ens = mfglab::mkv::build_ensemble(&spec, grid, layout, &streams, 1);
    let flow = forward_pass(&coeffs, &mut ens, &FlowPolicy::SelfConsistent, None, 1e8).unwrap();
    ens = ens.clone_noise_only();
    let (out, maps) = field_solve(&coeffs, &mut ens, &FlowPolicy::Frozen(&flow), &config, None, None).unwrap();
    println!("iters {}", out.log.iters);
    for j in [0usize, 100, 200, 300, 400, 480] {
        let node = &maps.nodes[j];
        // coef layout: [1, x, x^2, mean, mean^2] -> coef_y rows
        println!(
            "node {j}: y-coefs const={:.4} x={:.4} x2={:.4} mean={:.4} mean2={:.4}",
            node.coef_y.at(0, 0),
            node.coef_y.at(1, 0),
            node.coef_y.at(2, 0),
            node.coef_y.at(3, 0),
            node.coef_y.at(4, 0)
        );
    }
    // effective field slope at x=mu0: dY/dx = x-coef + 2 x2-coef * x
    let x0 = 0.6;
    let node = &maps.nodes[0];
    println!("field slope at x0: {:.4}", node.coef_y.at(1,0) + 2.0*node.coef_y.at(2,0)*x0);
}
