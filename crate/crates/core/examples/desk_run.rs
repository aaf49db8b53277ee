//! Small end-to-end run on synthetic data: `desk_run [iters] [seed] [dropout]`.

use std::time::Instant;

use dinomaly_core::data::{load_mvtec_layout, synth_dataset, SynthSpec};
use dinomaly_core::model::NoiseKind;
use dinomaly_core::trainer::{evaluate, train, TrainConfig};

fn main() -> dinomaly_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dropout: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let dir = std::env::temp_dir().join(format!("dinomaly_desk_{seed}"));
    let t0 = Instant::now();
    synth_dataset(&SynthSpec { seed, ..SynthSpec::default() }, &dir)?;
    let data = load_mvtec_layout(&dir)?;
    let mut cfg = TrainConfig::default().with_iters(iters);
    cfg.seed = seed;
    cfg.eval.eval_size = (112, 112);
    cfg.reconstructor.bottleneck.noise = NoiseKind::Dropout { p: dropout };
    let t1 = Instant::now();
    let out = train(&cfg, &data, None)?;
    let t2 = Instant::now();
    for r in out.log.iter().step_by((iters / 10).max(1)) {
        println!("it {:5} loss {:.5} k {:.1} lr {:.2e} clip {:.2}", r.iteration, r.loss, r.k, r.lr, r.clip_fraction);
    }
    let (report, _) = evaluate(&out.model, &data, &cfg.preprocess, &cfg.eval)?;
    print!("{}", report.to_csv_string()?);
    println!(
        "synth {:.1}s train {:.1}s eval {:.1}s",
        (t1 - t0).as_secs_f64(),
        (t2 - t1).as_secs_f64(),
        t2.elapsed().as_secs_f64()
    );
    Ok(())
}
