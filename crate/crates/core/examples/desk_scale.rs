//! Desk-scale leave-one-domain-out sweep over several seeds.
//!
//! Usage: `cargo run --release --example desk_scale -- [seeds] [key=value ...]`

use fedprompt::config::ExperimentConfig;
use fedprompt::experiment::run_experiment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut overrides = serde_json::json!({"num_clients": 12, "clients_per_round": 5, "rounds": 40});
    for kv in args.iter().skip(1) {
        let (k, v) = kv.split_once('=').ok_or("expected key=value")?;
        overrides[k] = serde_json::from_str(v).unwrap_or(serde_json::Value::String(v.into()));
    }
    let start = std::time::Instant::now();
    let (mut ens, mut g, mut top, mut q) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..seeds {
        let mut o = overrides.clone();
        o["seed"] = seed.into();
        let cfg = ExperimentConfig::from_json(&o.to_string())?;
        let s = run_experiment(&cfg, None)?;
        print!("seed {seed}\n{}", s.table());
        ens += s.mean_ensemble();
        g += s.mean_g_only();
        top += s.mean(|r| r.top_domain_only);
        q += s.mean_query_accuracy().unwrap_or(f64::NAN);
    }
    let n = seeds as f64;
    println!(
        "mean ensemble {:.4} g_only {:.4} top {:.4} query {:.4} ({:.1}s)",
        ens / n,
        g / n,
        top / n,
        q / n,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
