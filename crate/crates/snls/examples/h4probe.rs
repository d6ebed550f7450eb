fn main() {
    use snls::config::builtin_scenario;
    use snls::estimators::{estimate_moment_decay, h_ensemble};
    use snls::spectral::SpectralField;
    let cfg = builtin_scenario("reference").unwrap();
    let mut resolved = cfg.resolve(None).unwrap();
    resolved.sim.horizon = 12.0;
    let ens = h_ensemble(&resolved.sim, &SpectralField::zeros(128), 96, 99, 20, 4.0).unwrap();
    let d4 = estimate_moment_decay(&ens, 4.0, 2.0);
    println!("H^4 plateau = {}, c4_hat = {}", d4.c_k_hat / 2.0, d4.c_k_hat);
    // Max of H over the ensemble tail, and high quantiles of H^4
    let mut tail_h4: Vec<f64> = Vec::new();
    for row in &ens.h {
        for (j, &h) in row.iter().enumerate() {
            if ens.times[j] >= 4.0 { tail_h4.push(h.powi(4)); }
        }
    }
    tail_h4.sort_by(f64::total_cmp);
    let q = |p: f64| tail_h4[((tail_h4.len() as f64 * p) as usize).min(tail_h4.len()-1)];
    println!("H^4 quantiles: 50% {:.0} 90% {:.0} 99% {:.0} 99.9% {:.0} max {:.0}",
             q(0.5), q(0.9), q(0.99), q(0.999), tail_h4.last().unwrap());
    // E_{u,4}(t, s) growth rate: value at the end over elapsed
    let growth: Vec<f64> = ens.e_acc.iter().map(|row| row.last().unwrap() / 12.0).collect();
    let mean = growth.iter().sum::<f64>() / growth.len() as f64;
    let max = growth.iter().cloned().fold(0.0, f64::max);
    println!("E_u4 mean growth rate {:.0}, max {:.0}", mean, max);
}
