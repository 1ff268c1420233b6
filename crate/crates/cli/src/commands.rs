use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fined_core::dataset::{load_samples, read_annotations, read_manifest, to_rgb};
use fined_core::evaluation::{
    evaluate_dataset, pr_curve, summary_json, uniform_thresholds, EvalConfig, Matching,
};
use fined_core::gradcheck::{grad_check, random_problem, GradCheckConfig};
use fined_core::inference::{nms_thin, predict_multiscale, DEFAULT_SCALES};
use fined_core::io::{read_image, write_atomic, write_image, BitDepth};
use fined_core::network::{
    count_params, init_params_with, load_params, load_params_for, prune_helpers, save_params, Init,
    LoadMode,
};
use fined_core::trainer::{augment, fit_with, log_csv, TrainConfig};
use fined_core::{EdgeMap, Graph, Mode, NetworkSpec, ParamStore};
use rayon::prelude::*;

use crate::{
    CliError, CliResult, EvalArgs, GradcheckArgs, InferArgs, InitArg, ParamsArgs, PruneArgs,
    TrainArgs,
};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let spec = NetworkSpec::new(a.net.spec, Mode::Train);
    let graph = Graph::build(&spec)?;
    let init = match a.init {
        InitArg::Gauss => Init::default(),
        InitArg::He => Init::He,
        InitArg::Fan => Init::Fan,
    };
    let params = init_params_with(&spec, a.seed, init)?;
    let mut data = load_samples(&read_manifest(&a.manifest)?)?;
    if a.augment {
        data = augment(&data)?;
    }
    let cfg = TrainConfig {
        lr0: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        momentum: a.momentum,
        clip_norm: a.clip_norm,
        seed: a.seed,
        ..Default::default()
    };
    eprintln!("training {} on {} samples", a.net.spec, data.len());
    let start = Instant::now();
    let outcome = fit_with(&graph, params, &data, &cfg, |e| {
        eprintln!(
            "epoch {:>3}  lr {:.1e}  loss {:.4}  ({:.0}s)",
            e.epoch,
            e.lr,
            e.mean_total_loss,
            start.elapsed().as_secs_f64()
        );
    })?;
    save_params(&outcome.params, &a.out)?;
    let log_path = loss_log_path(&a.out);
    write_atomic(&log_path, log_csv(&outcome.log).as_bytes())?;
    println!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

fn loss_log_path(weights: &Path) -> PathBuf {
    let stem = weights
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "weights".into());
    weights.with_file_name(format!("{stem}.loss.csv"))
}

pub fn prune(a: &PruneArgs) -> CliResult<()> {
    let spec = NetworkSpec::new(a.net.spec, Mode::Train);
    let store = load_params(&a.weights)?;
    let pruned = prune_helpers(&store, &spec)?;
    save_params(&pruned, &a.out)?;
    println!(
        "{}: {} -> {} parameters",
        a.out.display(),
        count_params(&store),
        count_params(&pruned)
    );
    Ok(())
}

fn list_images(input: &Path) -> CliResult<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| fined_core::Error::Io {
            path: input.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|x| {
                    IMAGE_EXTENSIONS.contains(&x.to_string_lossy().to_ascii_lowercase().as_str())
                })
                .unwrap_or(false)
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::Usage(format!(
            "no images found in {}",
            input.display()
        )));
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(fined_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    let graph = Graph::build(&NetworkSpec::new(a.net.spec, Mode::Inference))?;
    let params = load_params_for(&a.weights, &graph, LoadMode::Lenient)?;
    let scales: Vec<f64> = if a.multiscale {
        DEFAULT_SCALES.to_vec()
    } else {
        a.scales.clone()
    };
    let inputs = list_images(&a.input)?;
    create_dir(&a.out)?;
    let results: Vec<CliResult<PathBuf>> = inputs
        .par_iter()
        .map(|path| {
            let image = to_rgb(read_image(path)?);
            let mut em = predict_multiscale(&graph, &params, &image, &scales)?;
            if a.nms {
                em = nms_thin(&em);
            }
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let out = a.out.join(format!("{stem}.png"));
            write_image(&out, em.tensor(), BitDepth::Sixteen)?;
            Ok(out)
        })
        .collect();
    for (input, r) in inputs.iter().zip(results) {
        let out = r?;
        println!("{} -> {}", input.display(), out.display());
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let cfg = EvalConfig {
        tolerance: a.tolerance,
        thresholds: uniform_thresholds(a.thresholds),
        thin_before_eval: !a.no_nms,
        matching: if a.greedy {
            Matching::Greedy
        } else {
            Matching::Maximum
        },
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let entries = read_manifest(&a.manifest)?;
    let items = entries
        .iter()
        .map(|e| {
            let t = read_image(&e.image)?;
            if t.shape().c != 1 {
                return Err(fined_core::Error::Image {
                    path: e.image.clone(),
                    msg: "prediction must be a single-channel image".into(),
                });
            }
            Ok((e.id(), EdgeMap::new(t)?, read_annotations(e)?))
        })
        .collect::<fined_core::Result<Vec<_>>>()?;
    let report = evaluate_dataset(&items, &cfg)?;
    create_dir(&a.out)?;
    write_atomic(
        &a.out.join("summary.json"),
        summary_json(&report).as_bytes(),
    )?;
    pr_curve(&report, a.out.join("pr.csv"))?;
    println!(
        "ODS {:.4} (t = {:.2})  OIS {:.4}  over {} images",
        report.ods_f,
        report.ods_threshold,
        report.ois_f,
        items.len()
    );
    Ok(())
}

pub fn params(a: &ParamsArgs) -> CliResult<()> {
    let mode = Mode::from(a.mode);
    let spec = NetworkSpec::new(a.net.spec, mode);
    let store: ParamStore = match &a.weights {
        Some(p) => load_params(p)?,
        None => init_params_with(&spec, 0, Init::Gaussian { std: 0.0 })?,
    };
    for (module, n) in store.breakdown() {
        println!("{module:<12} {n:>9}");
    }
    let total = count_params(&store);
    let reference = a.net.spec.reference_params_millions(mode);
    let deviation = 100.0 * (total as f64 / 1e6 - reference) / reference;
    let label = match mode {
        Mode::Train => "train",
        Mode::Inference => "inf",
    };
    println!("{:<12} {total:>9}", "total");
    println!(
        "{}-{label}: {:.3} M vs published {reference:.2} M ({deviation:+.1}%)",
        a.net.spec,
        total as f64 / 1e6
    );
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let spec = NetworkSpec::new(a.net.spec, Mode::from(a.mode));
    if a.size < spec.min_input_side() {
        return Err(CliError::Usage(format!(
            "--size must be at least {} for {}",
            spec.min_input_side(),
            a.net.spec
        )));
    }
    let graph = Graph::build(&spec)?;
    let (params, image, gt) = random_problem(&spec, a.size, a.seed)?;
    let cfg = GradCheckConfig {
        eps: a.eps,
        samples: a.samples,
        seed: a.seed,
        frozen: a.freeze.iter().cloned().collect(),
        ..Default::default()
    };
    let start = Instant::now();
    let report = grad_check(&graph, &params, &image, &gt, &cfg)?;
    for p in &report.params {
        if p.frozen {
            println!("{:<24} frozen", p.name);
        } else if p.checked > 0 {
            println!(
                "{:<24} {:>4} checked  max rel err {:.2e}",
                p.name, p.checked, p.max_rel_err
            );
        }
    }
    println!(
        "{} elements, {} skipped at kinks, max relative error {:.3e} ({:.1}s)",
        report.smooth().count(),
        report.kinks,
        report.max_rel_err,
        start.elapsed().as_secs_f64()
    );
    if report.max_rel_err >= a.tol {
        return Err(CliError::Failed(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err, a.tol
        )));
    }
    Ok(())
}
