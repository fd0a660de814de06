use betacut::equilibrium::EquilibriumData;
use betacut::operators::hard_edge_data;
use betacut::potential::{EdgeConfig, PotentialSpec};
use betacut::recursion::{expand, ExpandScope, RecursionParams};

fn main() {
    let v = PotentialSpec::simple(vec![0.0, 0.0, 0.5, 0.0, 0.1], (-3.0, 3.0), "quartic");
    let edges = EdgeConfig::soft_soft(-2.3, 2.3);
    let eq = EquilibriumData::solve(&v, &edges).unwrap();
    let edge = hard_edge_data(&edges);
    let mut params = RecursionParams::default();
    params.imk_tol = 1.0; // disable gate for diagnostics
    if let Ok(m) = std::env::var("DIAG_MODES") {
        params.modes_by_rank = m.split(',').map(|x| x.parse().unwrap()).collect();
    }
    let t0 = std::time::Instant::now();
    let e = expand(&eq, &edge, &v, 1.0, ExpandScope::Full { max_k: 2 }, &params).unwrap();
    println!("rho_live = {} elapsed = {:?}", params.rho_live, t0.elapsed());
    for (&(n, k), t) in e.terms.iter() {
        let m = t.tensor.dims[0];
        let mut maxc = vec![0.0f64; m];
        let after: usize = t.tensor.dims[1..].iter().product();
        for j in 0..m {
            for a in 0..after {
                maxc[j] = maxc[j].max(t.tensor.data[j * after + a].norm());
            }
        }
        let scaled: Vec<f64> = maxc.iter().enumerate().map(|(j, c)| c * params.rho_live.powi(-(j as i32 + 1))).collect();
        let mx = scaled.iter().cloned().fold(0.0, f64::max);
        let tail = scaled[(3 * m) / 4..].iter().cloned().fold(0.0, f64::max) / mx.max(1e-300);
        println!(
            "({n},{k}): sup={:.3e} asym={:.2e} imk={:.2e} tail={:.2e}",
            t.tensor.sup(), t.asymmetry, t.imk_residual, tail
        );
    }
    for (&(n, k), &r) in &e.residuals {
        println!("residual ({n},{k}) = {r:.3e}");
    }
}
