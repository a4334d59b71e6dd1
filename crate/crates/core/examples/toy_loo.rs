//! Leave-one-domain-out toy experiment: SSAN-T against the ablation without
//! the adversarial and contrastive terms.
//!
//! `cargo run --release -p ssan-core --example toy_loo -- [seeds] [n_per_class]`
//!
//! Environment knobs: `HOLD` (held-out domain, default 2), `LR` (1e-3),
//! `RAMP` (GRL ramp gamma, 10; 0 for a constant reversal), `BINARY=1` for the
//! binary head instead of the depth head, `V=1` to print every epoch.

use std::time::Instant;

use ssan::data::{make_splits, synth_dataset, Protocol, SynthSpec};
use ssan::losses::LossWeights;
use ssan::model::{HeadVariant, ModelConfig};
use ssan::training::{fit, GrlSchedule, TrainConfig, TrainState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(48);
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let depth = env("BINARY", 0.0) == 0.0;
    let hold = env("HOLD", 2.0) as usize;
    let spec = SynthSpec { with_depth: depth, ..SynthSpec::standard(2024) };
    let data = synth_dataset(&spec, n).unwrap();
    let (train, test) = make_splits(&data, Protocol::LeaveOneDomainOut(hold)).unwrap();
    let variant = if depth { HeadVariant::DepthHead } else { HeadVariant::BinaryHead };
    let cfg = ModelConfig { num_domains: 2, ..ModelConfig::tiny(variant) };
    let ramp = env("RAMP", 10.0);
    println!("seed variant   {}", ssan::training::EpochMetrics::csv_header());
    for seed in 0..seeds {
        for (name, weights) in [("ssan", LossWeights::default()), ("ablation", LossWeights { lambda1: 0.0, lambda2: 0.0 })] {
            let t = Instant::now();
            let mut tcfg = TrainConfig { seed, weights, ..TrainConfig::default() };
            tcfg.optim.lr = env("LR", 1e-3);
            if ramp > 0.0 {
                tcfg.grl = GrlSchedule::Ramp { gamma: ramp };
            }
            let (_, metrics) = fit(TrainState::<f64>::new(&cfg, seed).unwrap(), &cfg, &train, &test, &tcfg, None).unwrap();
            for m in &metrics {
                if std::env::var("V").is_ok() || m.epoch == metrics.len() {
                    println!("{seed} {name:9} {}", m.csv_row());
                }
            }
            println!("{seed} {name:9} took {:.1}s", t.elapsed().as_secs_f64());
        }
    }
}
