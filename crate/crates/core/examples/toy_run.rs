//! Trains one toy model and prints held-out metrics of both domains.
//!
//! `cargo run --release --example toy_run -- <sim_fraction> <steps> [skip_from] [w_uv] [lr]`

use std::time::Instant;

use densesim::metrics::MetricParams;
use densesim::mixer::{CropParams, MixSpec};
use densesim::net::{MicroNet, NetConfig, TaskWeights};
use densesim::toy::{render_toy_frames, DatasetConfig};
use densesim::train::{evaluate, train, EvalOptions};

fn main() -> densesim::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let p = arg(0, 0.5);
    let steps = arg(1, 300.0) as usize;
    let skip = args.get(2).and_then(|s| s.parse().ok()).filter(|&s: &usize| s < 99);
    let w_uv = arg(3, 0.25);
    let lr = arg(4, 0.005);

    let t = Instant::now();
    let mix = MixSpec { sim_fraction: p, ..MixSpec::default() };
    let env = |k: &str, d: usize| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let mut ds = DatasetConfig::default();
    ds.scene.n_max = env("TOY_NMAX", ds.scene.n_max);
    ds.figures = env("TOY_FIGURES", ds.figures);
    let frames = render_toy_frames(&ds)?;
    let data = frames.crops(&CropParams::from_spec(&mix), 7)?;
    println!(
        "data: {} sim / {} real train, {} / {} test in {:.1}s",
        data.sim_train.len(),
        data.real_train.len(),
        data.sim_test.len(),
        data.real_test.len(),
        t.elapsed().as_secs_f64()
    );
    let mut net = MicroNet::new(NetConfig { skip_from: skip, learning_rate: lr, ..NetConfig::default() })?;
    let weights = TaskWeights { uv: w_uv, ..TaskWeights::default() };
    let t = Instant::now();
    let log = train(&mut net, &data.sim_train, &data.real_train, &mix, &weights, steps, |r| {
        if r.step % 100 == 0 {
            println!("step {} loss {:.3} uv {:.4} ({:.1}s)", r.step, r.loss.total(), r.loss.uv, t.elapsed().as_secs_f64());
        }
    })?;
    println!("{} steps in {:.1}s, final loss {:.3}", log.len(), t.elapsed().as_secs_f64(), log.last().unwrap().loss.total());
    let opts = EvalOptions {
        metrics: MetricParams::default(),
        disk_radius: mix.disk_radius,
        train_sim_fraction: p,
        batch_size: 16,
        geodesics: None,
    };
    let s = evaluate(&mut net, &data.sim_test, &opts)?;
    let r = evaluate(&mut net, &data.real_test, &opts)?;
    println!(
        "sim: uv_l2 {:?} add {:?} iou {:?} oks {:?}\nreal: iou {:?} oks {:?}",
        s.uv_l2_mean, s.add_degrees, s.iou_mean, s.oks_mean, r.iou_mean, r.oks_mean
    );
    Ok(())
}
