//! Overfits FINED2 on five synthetic scenes and reports ODS/OIS on them.
//!
//! ```text
//! cargo run --release --example toy_train -- [epochs] [weights.bin]
//! ```

use std::time::Instant;

use fined_core::evaluation::{evaluate_dataset, BinaryMap, EvalConfig};
use fined_core::inference::predict;
use fined_core::network::{init_params_with, save_params, Init};
use fined_core::synth::{scenes, SceneConfig};
use fined_core::trainer::{augment_with, fit_with, TrainConfig};
use fined_core::{Graph, Mode, NetworkSpec};

fn main() -> fined_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args
        .next()
        .map_or(20, |e| e.parse().expect("epochs must be an integer"));
    let out = args.next();

    let spec = NetworkSpec::fined2(Mode::Train);
    let graph = Graph::build(&spec)?;
    let params = init_params_with(&spec, 0, Init::Fan)?;
    let base = scenes(&SceneConfig::default(), 5, 100);
    let data = augment_with(&base, &[1.0])?;
    let cfg = TrainConfig {
        lr0: 1.5e-4,
        momentum: 0.9,
        batch_size: 1,
        clip_norm: Some(1000.0),
        epochs,
        ..Default::default()
    };

    let start = Instant::now();
    let outcome = fit_with(&graph, params, &data, &cfg, |e| {
        println!(
            "epoch {:>2}  lr {:.1e}  loss {:>8.3}  max |g| {:>8.1}  ({:.0}s)",
            e.epoch,
            e.lr,
            e.mean_total_loss,
            e.max_grad_norm,
            start.elapsed().as_secs_f64()
        );
    })?;
    if let Some(path) = out {
        save_params(&outcome.params, &path)?;
        println!("saved {path}");
    }

    let items = base
        .iter()
        .map(|s| {
            let em = predict(&graph, &outcome.params, &s.image)?;
            Ok((s.id.clone(), em, vec![BinaryMap::from_tensor(s.gt.map())?]))
        })
        .collect::<fined_core::Result<Vec<_>>>()?;
    let r = evaluate_dataset(&items, &EvalConfig::default())?;
    println!(
        "ODS {:.4} (t = {:.2})  OIS {:.4}",
        r.ods_f, r.ods_threshold, r.ois_f
    );
    Ok(())
}
