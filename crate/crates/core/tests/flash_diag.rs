use ksurf_core::cloudsim::*;
use rayon::prelude::*;

const BURN_IN: usize = 500;

fn flash_config(scaler: ScalerKind, seed: u64) -> ScenarioConfig {
    let mut workload = WorkloadSpec::poisson(2.5, 4000);
    let amps = [2.0, 3.0, 4.0, 5.0];
    workload.flash_crowds = (0..11)
        .map(|k| FlashCrowd {
            start: 300 + 320 * k,
            duration: 160,
            amplitude: amps[k % 4],
            ramp: 60,
        })
        .collect();
    let mut cfg = ScenarioConfig::new(scaler, workload, seed);
    cfg.pod_bounds = (1, 20);
    cfg.initial_pods = 4;
    cfg.decision_every = 10;
    cfg.scaling_step = 2;
    cfg.latency.service_rate = 1.0;
    cfg.latency.lipschitz_l = 50.0;
    cfg.measurement_noise_std = 0.1;
    cfg.filter_noise = (0.01, 0.25);
    cfg
}

fn windowed_pctl_var(lat: &[f64], window: usize, p: f64) -> f64 {
    let pcts: Vec<f64> = lat
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| ksurf_core::stats::percentile(c, p).unwrap())
        .collect();
    ksurf_core::stats::variance(&pcts)
}

#[test]
fn diag() {
    let seeds: Vec<u64> = (0..20).collect();
    let rows: Vec<(u64, f64, f64, f64, f64, f64, f64)> = seeds
        .par_iter()
        .map(|&seed| {
            let dr = run_scenario(&flash_config(ScalerKind::Dr, seed)).unwrap();
            let drkf = run_scenario(&flash_config(ScalerKind::Drkf, seed)).unwrap();
            let (l_dr, l_kf) = (&dr.latencies()[BURN_IN..], &drkf.latencies()[BURN_IN..]);
            let v95 = (windowed_pctl_var(l_dr, 50, 95.0), windowed_pctl_var(l_kf, 50, 95.0));
            let v99 = (windowed_pctl_var(l_dr, 50, 99.0), windowed_pctl_var(l_kf, 50, 99.0));
            let n = (dr.metrics.len() - BURN_IN) as f64;
            let pods_dr = dr.metrics[BURN_IN..].iter().map(|m| f64::from(m.pods)).sum::<f64>() / n;
            let pods_kf = drkf.metrics[BURN_IN..].iter().map(|m| f64::from(m.pods)).sum::<f64>() / n;
            (seed, v95.0, v95.1, v99.0, v99.1, pods_dr, pods_kf)
        })
        .collect();

    let mut w95 = 0;
    let mut w99 = 0;
    let mut wp = 0;
    let mut red95 = 0.0;
    let mut red99 = 0.0;
    for (seed, a95, b95, a99, b99, pa, pb) in &rows {
        if b95 < a95 { w95 += 1 }
        if b99 < a99 { w99 += 1 }
        if pb <= pa { wp += 1 }
        red95 += (a95 - b95) / a95;
        red99 += (a99 - b99) / a99;
        println!(
            "seed {seed:2}  v95 DR {a95:9.3} KF {b95:9.3}  v99 DR {a99:9.3} KF {b99:9.3}  pods DR {pa:5.2} KF {pb:5.2}"
        );
    }
    println!(
        "wins: v95 {w95}/20  v99 {w99}/20  pods {wp}/20  mean reduction95 {:.3} reduction99 {:.3}",
        red95 / 20.0,
        red99 / 20.0
    );
}
