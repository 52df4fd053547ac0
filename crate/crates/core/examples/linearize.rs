//! Linearises the two-agent filtered loop around the symmetric swap and
//! compares its unstable eigenvalue with the closed forms.

use pcca::scenario::ScenarioConfig;
use pcca::stability::{compare_eigenvalues, numerical_linearization, TwoAgentLoop, MPH};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig::default();
    let pcca = cfg.pcca()?;
    let kappa = cfg.controller.kappa;
    let delta0 = 0.015;

    println!("  mph   s_a        formula  loop     numerical");
    for row in compare_eigenvalues(&pcca, &cfg.vehicle, &[10.0 * MPH, 20.0 * MPH, 30.0 * MPH], delta0, kappa, cfg.ctrl_period)? {
        println!(
            "  {:4.0}  {:.3e}  {:7.3}  {:7.3}  {:7.3}",
            row.v0 / MPH,
            row.s_a,
            row.formula,
            row.loop_model,
            row.numerical
        );
    }

    let lp = TwoAgentLoop::new(pcca, 20.0 * MPH, delta0, kappa, cfg.ctrl_period);
    let spectrum = numerical_linearization(&lp)?;
    println!("mirror-symmetric modes     {:?}", rounded(&spectrum.symmetric));
    println!("mirror-antisymmetric modes {:?}", rounded(&spectrum.antisymmetric));
    Ok(())
}

fn rounded(v: &[(f64, f64)]) -> Vec<String> {
    v.iter()
        .map(|&(re, im)| if im.abs() < 1e-9 { format!("{re:.3}") } else { format!("{re:.3}{im:+.3}i") })
        .collect()
}
