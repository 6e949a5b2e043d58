//! Command-line front end: corpus generation, training, evaluation,
//! single-episode prediction and report plots.

mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmnet::checkpoint::Checkpoint;
use dmnet::data::{generate_synthetic_dataset, synthetic_fold_file, tensor_to_rgb, Episode, EpisodeImage, SyntheticDatasetSpec};
use dmnet::evaluation::PairResult;
use dmnet::pipeline::EpisodeFeatures;
use dmnet::{Config, Error, Experiment32};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dmnet", version, about = "Dual-mining few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic-shapes corpus and its fold file.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Meta-train a model on the configured fold.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`; also seeds parameter initialization.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on fixed sampled support/query pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data settings to use instead of the checkpoint's own snapshot.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Segment one query image given annotated support images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Target class, by name or numeric id.
        #[arg(long)]
        class: String,
        #[arg(long)]
        query: String,
        /// Support image ids (one per shot).
        #[arg(long, num_args = 1.., required = true)]
        support: Vec<String>,
        #[arg(long, default_value = "runs/predict")]
        out: PathBuf,
    },
    /// Render SVG charts from an eval directory and, optionally, a loss log.
    Plot {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        loss: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData { config } => gen_data(config.as_deref()),
        Command::Train { config, seed, out } => train(config.as_deref(), seed, &out),
        Command::Eval {
            checkpoint,
            config,
            fold,
            k,
            pairs,
            seed,
            out,
        } => eval(&checkpoint, config.as_deref(), fold, k, pairs, seed, &out),
        Command::Predict {
            checkpoint,
            config,
            class,
            query,
            support,
            out,
        } => predict(&checkpoint, config.as_deref(), &class, &query, &support, &out),
        Command::Plot { eval, loss, out } => plot(&eval, loss.as_deref(), out.as_deref().unwrap_or(&eval)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> dmnet::Result<Config> {
    match path {
        Some(p) => Config::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
            e => e,
        }),
        None => Ok(Config::default()),
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> dmnet::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Snapshot of everything needed to rerun a command.
fn write_manifest(dir: &Path, command: &str, cfg: &Config, seed: u64, extra: serde_json::Value) -> dmnet::Result<()> {
    let m = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": cfg.to_toml(),
        "extra": extra,
    });
    write(&dir.join("manifest.json"), serde_json::to_string_pretty(&m).expect("manifest serializes"))
}

fn synthetic_spec(cfg: &Config) -> SyntheticDatasetSpec {
    SyntheticDatasetSpec {
        n_images: cfg.data.n_images,
        image_size: cfg.data.image_size,
        seed: cfg.data.gen_seed,
        ..SyntheticDatasetSpec::default()
    }
}

fn gen_data(config: Option<&Path>) -> dmnet::Result<()> {
    let cfg = load_config(config)?;
    let spec = synthetic_spec(&cfg);
    let report = generate_synthetic_dataset(&spec, &cfg.data.root)?;
    write(&cfg.data.fold_file, synthetic_fold_file(&spec, cfg.data.test_classes_per_fold))?;
    log::info!(
        "wrote {} images to {} ({} warnings)",
        report.metadata.images.len(),
        cfg.data.root.display(),
        report.warnings.len()
    );
    Ok(())
}

fn train(config: Option<&Path>, seed: Option<u64>, out: &Path) -> dmnet::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let seed = cfg.train.seed;
    let exp = Experiment32::open(cfg.clone())?;
    let digest_before = exp.backbone_digest();
    let mut model = exp.new_model(seed);
    let every = cfg.train.log_every.max(1);
    let log = exp.train(&mut model, |r| {
        if r.iteration % every == 0 || r.iteration + 1 == cfg.train.iterations {
            match r.loss {
                Some(l) => log::info!("iter {:>6}  lr {:.5}  loss {l:.4}", r.iteration, r.lr),
                None => log::info!("iter {:>6}  warm-up", r.iteration),
            }
        }
    })?;
    let digest_after = exp.backbone_digest();
    if digest_before != digest_after {
        return Err(Error::Numerical("backbone weights changed during training".into()));
    }
    let mut csv = String::from("iteration,lr,loss\n");
    for r in &log {
        let loss = r.loss.map(|l| format!("{l:.6}")).unwrap_or_default();
        let _ = writeln!(csv, "{},{:.6},{loss}", r.iteration, r.lr);
    }
    write(&out.join("loss_log.csv"), csv)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Checkpoint::capture(&model, &cfg, seed, &digest_after).save(&out.join("checkpoint.json"))?;
    write_manifest(
        out,
        "train",
        &cfg,
        seed,
        json!({ "backbone_digest_before": digest_before, "backbone_digest_after": digest_after }),
    )?;
    log::info!("checkpoint written to {}", out.join("checkpoint.json").display());
    Ok(())
}

fn open_checkpoint(checkpoint: &Path, config: Option<&Path>) -> dmnet::Result<(Experiment32, dmnet::DmNet32)> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(p) = config {
        cfg.data = Config::load(p)?.data;
    }
    let exp = Experiment32::open(cfg)?;
    if exp.backbone_digest() != ck.backbone_digest {
        return Err(Error::Checkpoint(format!(
            "{}: trained with backbone {} but configured backbone is {}",
            checkpoint.display(),
            ck.backbone_digest,
            exp.backbone_digest()
        )));
    }
    Ok((exp, ck.into_model()?))
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: &Path,
    config: Option<&Path>,
    fold: Option<usize>,
    k: Option<usize>,
    pairs: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> dmnet::Result<()> {
    let ck_cfg = Checkpoint::<f32>::load(checkpoint)?.config;
    let mut cfg = ck_cfg.clone();
    if let Some(p) = config {
        let c = Config::load(p)?;
        cfg.data = c.data;
        cfg.eval = c.eval;
    }
    if let Some(f) = fold {
        cfg.data.fold = f;
    }
    let k = k.unwrap_or(cfg.eval.shots);
    let pairs = pairs.unwrap_or(cfg.eval.pairs);
    let seed = seed.unwrap_or(cfg.eval.seed);
    if k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    // Route the overrides through a temporary config so the data section,
    // including any fold change, is what the experiment opens.
    let tmp = out.join("effective_config.toml");
    write(&tmp, cfg.to_toml())?;
    let (exp, model) = open_checkpoint(checkpoint, Some(&tmp))?;
    let (report, results) = exp.evaluate(&model, pairs, k, seed)?;
    report.write(out)?;
    write(&out.join("pairs.csv"), pairs_csv(&results))?;
    write_manifest(out, "eval", &cfg, seed, json!({ "checkpoint": checkpoint, "k": k, "pairs": pairs }))?;
    log::info!(
        "fold {} {k}-shot: mIoU {:.2}  FB-IoU {:.2}  mAcc {:.2}  ({} pairs, {} failed)",
        cfg.data.fold,
        report.miou,
        report.fb_iou,
        report.macc,
        report.n_pairs,
        report.failed_pairs
    );
    Ok(())
}

fn pairs_csv(results: &[PairResult]) -> String {
    let mut s = String::from("class,query_id,support_ids,object_fraction,tp,fp,fn,tn,iou\n");
    for p in results {
        let c = p.counts;
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{},{},{},{:.6}",
            p.class,
            p.query_id,
            p.support_ids.join(";"),
            p.object_fraction,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            c.iou()
        );
    }
    s
}

fn predict(
    checkpoint: &Path,
    config: Option<&Path>,
    class: &str,
    query: &str,
    support: &[String],
    out: &Path,
) -> dmnet::Result<()> {
    let (exp, model) = open_checkpoint(checkpoint, config)?;
    let class_id = exp
        .fold
        .class_names
        .iter()
        .find(|(&c, n)| n.as_str() == class || c.to_string() == class)
        .map(|(&c, _)| c)
        .ok_or_else(|| {
            let names: Vec<&str> = exp.fold.class_names.values().map(String::as_str).collect();
            Error::Config(format!("unknown class {class:?}; known classes: {}", names.join(", ")))
        })?;
    let image = |id: &str| -> dmnet::Result<EpisodeImage> {
        let sample = exp.dataset.get(id)?;
        Ok(EpisodeImage {
            mask: sample.binary_mask(class_id),
            sample,
            cacheable: true,
        })
    };
    let ep = Episode {
        target_class: class_id,
        support: support.iter().map(|s| image(s)).collect::<dmnet::Result<_>>()?,
        query: image(query)?,
    };
    for s in &ep.support {
        if s.foreground() == 0 {
            return Err(Error::Data(format!("support image {} does not contain {class}", s.id())));
        }
    }
    let pred = model.predict(&EpisodeFeatures::extract(&exp.cache, &ep)?)?;
    let (h, w) = ep.query.size();
    let mask: Vec<u8> = pred.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mp = out.join(format!("{query}_mask.png"));
    dmnet::data::mask_to_gray(&mask, h, w)
        .save(&mp)
        .map_err(|e| Error::Image { path: mp.clone(), source: e })?;
    let mut overlay = tensor_to_rgb(&ep.query.sample.image);
    for (px, &m) in overlay.pixels_mut().zip(&pred.mask) {
        if m {
            px[0] = ((px[0] as u16 + 255) / 2) as u8;
            px[1] /= 2;
            px[2] /= 2;
        }
    }
    let op = out.join(format!("{query}_overlay.png"));
    overlay.save(&op).map_err(|e| Error::Image { path: op.clone(), source: e })?;
    let fg = pred.mask.iter().filter(|&&m| m).count();
    log::info!("{query}: {fg} of {} pixels predicted as {class}; wrote {}", h * w, mp.display());
    Ok(())
}

fn read(path: &Path) -> dmnet::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_rows(path: &Path) -> dmnet::Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = read(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    Ok((header, lines.map(|l| l.split(',').map(str::to_string).collect()).collect()))
}

fn column(header: &[String], name: &str, path: &Path) -> dmnet::Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("{}: missing column {name}", path.display())))
}

fn parse_f64(s: &str, path: &Path) -> dmnet::Result<f64> {
    s.parse().map_err(|_| Error::Data(format!("{}: bad number {s:?}", path.display())))
}

fn plot(eval_dir: &Path, loss: Option<&Path>, out: &Path) -> dmnet::Result<()> {
    let rp = eval_dir.join("report.json");
    let report: dmnet::evaluation::MetricsReport =
        serde_json::from_str(&read(&rp)?).map_err(|e| Error::Data(format!("{}: {e}", rp.display())))?;
    let bars: Vec<(String, f64)> = report.per_class_iou.iter().map(|(c, v)| (c.clone(), *v)).collect();
    let title = format!("{}-shot per-class IoU (mIoU {:.1})", report.k, report.miou);
    write(&out.join("per_class.svg"), svg::bar_chart(&title, "IoU (%)", &bars, 100.0))?;

    let pp = eval_dir.join("pairs.csv");
    let (header, rows) = csv_rows(&pp)?;
    let (fi, ii) = (column(&header, "object_fraction", &pp)?, column(&header, "iou", &pp)?);
    let pts = rows
        .iter()
        .filter(|r| r.len() == header.len())
        .map(|r| Ok((parse_f64(&r[fi], &pp)?, parse_f64(&r[ii], &pp)?)))
        .collect::<dmnet::Result<Vec<_>>>()?;
    write(
        &out.join("scale_vs_iou.svg"),
        svg::scatter("Object scale vs pair IoU", "target fraction of query pixels", "IoU", &pts),
    )?;

    if let Some(lp) = loss {
        let (header, rows) = csv_rows(lp)?;
        let (ti, li) = (column(&header, "iteration", lp)?, column(&header, "loss", lp)?);
        let pts = rows
            .iter()
            .filter(|r| r.len() == header.len() && !r[li].is_empty())
            .map(|r| Ok((parse_f64(&r[ti], lp)?, parse_f64(&r[li], lp)?)))
            .collect::<dmnet::Result<Vec<_>>>()?;
        write(&out.join("loss.svg"), svg::line("Training loss", "iteration", "loss", &pts))?;
    }
    log::info!("plots written to {}", out.display());
    Ok(())
}
