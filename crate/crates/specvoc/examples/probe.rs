use specvoc::config::RunConfig;
use specvoc::harness::*;

fn main() {
    let domains = standard_domains();
    for lr in [0.01f64, 0.02, 0.04] {
        for noise in [8.0f64, 12.0] {
            for entries in [2048usize] {
                let mut ok = 0;
                let mut detail = String::new();
                for seed in [1u64, 2, 3] {
                    let cfg = RunConfig { lr, seed, ..Default::default() };
                    let params = SweepParams { entries, noise, seed };
                    let runs = beta_sweep(&cfg, &domains, &[0.0, 0.3, 0.7], &params).unwrap();
                    let f: Vec<f64> = runs.iter().map(|r| r.final_smoothed).collect();
                    let pass = f[1] <= f[0] && f[1] <= f[2];
                    if pass { ok += 1; }
                    detail.push_str(&format!(" [{:.2}/{:.2}/{:.2}{}]", f[0], f[1], f[2], if pass {"+"} else {"-"}));
                }
                println!("lr={lr} noise={noise} n={entries}: {ok}/3 {detail}");
            }
        }
    }
}
