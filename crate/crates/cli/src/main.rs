use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use specadv::artifacts::{self, Exported, RunLog};
use specadv::attacks::{
    self, generator_attacks, optimize_fixed_c, optimize_many, spike_score, train_generator, AttackJob, Goal,
    GeneratorData, GeneratorNet, SPIKE_THRESHOLD,
};
use specadv::classifier::{train_classifier, Arch, ClassifierNet};
use specadv::config::RunConfig;
use specadv::dataset::{generate_synthetic, ingest_directory, Dataset, LabeledMesh, Split};
use specadv::losses::ShapeContext;
use specadv::spectral::{SpectralBasis, SpectralCache};
use specadv::Error;

#[derive(Parser)]
#[command(name = "specadv", version, about = "Spectral adversarial attacks on triangle meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set k=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trained classifier checkpoint.
    #[arg(long)]
    classifier: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as OFF files plus a manifest.
    GenDataset(Common),
    /// Train the point-cloud classifier.
    TrainClassifier(Common),
    /// Per-shape optimization attacks with a search over c.
    AttackOpt {
        #[command(flatten)]
        common: Common,
        /// Shape name or dataset index; all test shapes when omitted.
        #[arg(long)]
        shape: Option<String>,
        /// Target class; every wrong class when omitted.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        /// Run the bandwidth sweep instead.
        #[arg(long)]
        k_sweep: bool,
    },
    /// Train a generator (model1 or model2).
    AttackTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        /// Generator checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Build a comparison table from attack directories.
    Eval {
        /// `NAME=DIR`, repeatable; rows appear in the given order.
        #[arg(long = "run", value_name = "NAME=DIR", required = true)]
        runs: Vec<String>,
        /// Table path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Success rate over the configured bandwidths at fixed c.
    Sweep(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidTarget { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> specadv::Result<()> {
    match cli.command {
        Command::GenDataset(c) => {
            let cfg = load_config(&c, &[])?;
            let ds = dataset(&cfg)?;
            ds.write(&cfg.out_dir)?;
            let [tr, va, te] = ds.counts();
            println!("wrote {} meshes ({tr}/{va}/{te}) to {}", ds.items.len(), cfg.out_dir.display());
            Ok(())
        }
        Command::TrainClassifier(c) => cmd_train_classifier(&load_config(&c, &[])?),
        Command::AttackOpt {
            common,
            shape,
            target,
            k,
            k_sweep,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = shape {
                extra.push(format!("shape=\"{s}\""));
            }
            if let Some(t) = target {
                extra.push(format!("target={t}"));
            }
            if let Some(k) = k {
                extra.push(format!("k={k}"));
            }
            let cfg = load_config(&common, &extra)?;
            if k_sweep {
                cmd_sweep(&cfg)
            } else {
                cmd_attack_opt(&cfg)
            }
        }
        Command::AttackTrain { common, model, resume } => {
            let mut extra = Vec::new();
            if let Some(m) = model {
                extra.push(format!("model=\"{m}\""));
            }
            if let Some(r) = resume {
                extra.push(format!("resume=\"{}\"", r.display()));
            }
            cmd_attack_train(&load_config(&common, &extra)?)
        }
        Command::Eval { runs, out } => cmd_eval(&runs, &out),
        Command::Sweep(c) => cmd_sweep(&load_config(&c, &[])?),
    }
}

fn load_config(c: &Common, extra: &[String]) -> specadv::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in c.set.iter().chain(extra) {
        cfg.set(s)?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = &c.classifier {
        cfg.classifier = Some(p.clone());
    }
    Ok(cfg)
}

fn start_run(cfg: &RunConfig) -> specadv::Result<RunLog> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.toml"))?;
    let mut log = RunLog::create(&cfg.out_dir.join("run_log.jsonl"))?;
    log.record("config", cfg)?;
    Ok(log)
}

fn dataset(cfg: &RunConfig) -> specadv::Result<Dataset> {
    match &cfg.dataset_path {
        Some(p) => ingest_directory(p),
        None => generate_synthetic(cfg.dataset_seed, &cfg.synthetic_params()),
    }
}

fn classifier(cfg: &RunConfig) -> specadv::Result<ClassifierNet> {
    let path = cfg
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Config("a classifier checkpoint is required (--classifier or classifier=...)".into()))?;
    ClassifierNet::load(path)
}

fn bases(cfg: &RunConfig, items: &[&LabeledMesh], k: usize) -> specadv::Result<Vec<SpectralBasis>> {
    let cache = SpectralCache::new(cfg.out_dir.join("basis_cache"))?;
    items.iter().map(|m| cache.get_or_compute(&m.mesh, k)).collect()
}

fn cmd_train_classifier(cfg: &RunConfig) -> specadv::Result<()> {
    let mut log = start_run(cfg)?;
    let ds = dataset(cfg)?;
    let arch = Arch {
        classes: ds.classes,
        dropout: cfg.dropout,
        ..Arch::default()
    };
    let (net, report) = train_classifier(&ds, &arch, &cfg.train_config())?;
    net.save(&cfg.out_dir.join("classifier.bin"))?;
    report.write_csv(&cfg.out_dir.join("train_report.csv"))?;
    report.write_summary(&cfg.out_dir.join("summary.json"))?;
    for e in &report.epochs {
        log.record("epoch", e)?;
    }
    log.record("done", report.test_accuracy)?;
    println!(
        "train {:.3} val {:.3} test {:.3} (weights from epoch {})",
        report.train_accuracy, report.val_accuracy, report.test_accuracy, report.selected_epoch
    );
    Ok(())
}

fn select_shapes<'a>(ds: &'a Dataset, shape: Option<&str>) -> specadv::Result<Vec<&'a LabeledMesh>> {
    match shape {
        None => Ok(ds.split(Split::Test)),
        Some(s) => {
            let found = ds
                .items
                .iter()
                .find(|m| m.name == s)
                .or_else(|| s.parse::<usize>().ok().and_then(|i| ds.items.get(i)));
            found
                .map(|m| vec![m])
                .ok_or_else(|| Error::Config(format!("no shape named `{s}`")))
        }
    }
}

fn cmd_attack_opt(cfg: &RunConfig) -> specadv::Result<()> {
    let ds = dataset(cfg)?;
    let net = classifier(cfg)?;
    let shapes = select_shapes(&ds, cfg.shape.as_deref())?;
    if let Some(t) = cfg.target {
        if t >= net.classes() {
            return Err(Error::InvalidTarget {
                target: t,
                classes: net.classes(),
            });
        }
        if let Some(m) = shapes.iter().find(|m| m.label == t) {
            return Err(Error::Config(format!("target {t} is the true class of `{}`", m.name)));
        }
    }
    let mut log = start_run(cfg)?;
    let ctxs = shapes.iter().map(|m| ShapeContext::new(&m.mesh)).collect::<specadv::Result<Vec<_>>>()?;
    let bases = bases(cfg, &shapes, cfg.k)?;
    let mut jobs = Vec::new();
    let mut owners = Vec::new();
    for (i, m) in shapes.iter().enumerate() {
        let targets: Vec<usize> = match cfg.target {
            Some(t) => vec![t],
            None => (0..net.classes()).filter(|&t| t != m.label).collect(),
        };
        for t in targets {
            jobs.push(AttackJob {
                ctx: &ctxs[i],
                basis: &bases[i],
                goal: Goal::Targeted(t),
            });
            owners.push(i);
        }
    }
    let results = optimize_many(&jobs, &net, &cfg.optim_config(), &cfg.search_config());
    let mut done = Vec::new();
    let mut failed = 0usize;
    for (res, &i) in results.into_iter().zip(&owners) {
        match res {
            Ok(r) => done.push((i, r)),
            Err(Error::NoAttackFound { rounds, max_c }) => {
                failed += 1;
                log.record("no_attack", serde_json::json!({"shape": shapes[i].name, "rounds": rounds, "max_c": max_c}))?;
            }
            Err(e) => return Err(e),
        }
    }
    let exported: Vec<Exported<'_>> = done
        .iter()
        .map(|(i, r)| Exported {
            name: &shapes[*i].name,
            split: shapes[*i].split,
            label: shapes[*i].label,
            ctx: &ctxs[*i],
            result: r,
        })
        .collect();
    let rows = artifacts::export_attacks(&cfg.out_dir, &exported)?;
    for r in &rows {
        log.record("attack", r)?;
    }
    let metrics = if rows.is_empty() {
        Vec::new()
    } else {
        artifacts::evaluate_dir(&cfg.out_dir)?
    };
    attacks::write_table(&cfg.out_dir.join("metrics.csv"), &[("opt".to_string(), metrics)])?;
    let ok = rows.iter().filter(|r| r.success).count();
    log.record("done", serde_json::json!({"attempts": jobs.len(), "successes": ok, "failed": failed}))?;
    println!("{ok}/{} targeted attacks succeeded", jobs.len());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> specadv::Result<()> {
    let ds = dataset(cfg)?;
    let net = classifier(cfg)?;
    let shapes: Vec<&LabeledMesh> = select_shapes(&ds, cfg.shape.as_deref())?.into_iter().take(10).collect();
    let mut log = start_run(cfg)?;
    let ctxs = shapes.iter().map(|m| ShapeContext::new(&m.mesh)).collect::<specadv::Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("sweep.csv")).map_err(Error::from)?;
    w.write_record(["k", "attempts", "successes", "success_rate", "mean_reconstruction", "mean_curvature_distortion"])
        .map_err(Error::from)?;
    let opt = cfg.optim_config();
    for &k in &cfg.k_sweep {
        let bases = bases(cfg, &shapes, k)?;
        let (mut ok, mut recon, mut curv) = (0usize, 0.0, 0.0);
        for (i, m) in shapes.iter().enumerate() {
            let goal = Goal::Targeted(cfg.target.unwrap_or((m.label + 1) % net.classes()));
            let r = optimize_fixed_c(&ctxs[i], &bases[i], &net, goal, cfg.c, &opt)?;
            ok += r.success as usize;
            recon += r.breakdown.reconstruction;
            curv += ctxs[i].curvature_distortion(&r.x_adv)?;
        }
        let n = shapes.len().max(1) as f64;
        let rate = ok as f64 / n;
        log.record("sweep", serde_json::json!({"k": k, "successes": ok, "attempts": shapes.len()}))?;
        w.write_record([
            k.to_string(),
            shapes.len().to_string(),
            ok.to_string(),
            rate.to_string(),
            (recon / n).to_string(),
            (curv / n).to_string(),
        ])
        .map_err(Error::from)?;
        println!("k = {k}: {ok}/{} succeeded", shapes.len());
    }
    w.flush()?;
    Ok(())
}

fn cmd_attack_train(cfg: &RunConfig) -> specadv::Result<()> {
    let ds = dataset(cfg)?;
    let net = classifier(cfg)?;
    let arch = cfg.generator_arch()?;
    let mut log = start_run(cfg)?;
    let items: Vec<&LabeledMesh> = ds.items.iter().collect();
    let ctxs = items.iter().map(|m| ShapeContext::new(&m.mesh)).collect::<specadv::Result<Vec<_>>>()?;
    let basis = match arch.kind {
        attacks::ModelKind::Model1 => Some(bases(cfg, &items, cfg.k)?),
        attacks::ModelKind::Model2 => None,
    };
    let data = GeneratorData::new(&ds, &ctxs, basis.as_deref(), cfg.target_seed)?;
    let mut gen = match &cfg.resume {
        Some(p) => {
            let g = GeneratorNet::load(p)?;
            if g.arch().kind != arch.kind {
                return Err(Error::Config("resumed checkpoint is a different model".into()));
            }
            g
        }
        None => GeneratorNet::new(arch, cfg.seed)?,
    };
    let gcfg = cfg.generator_config();
    let epochs = train_generator(&mut gen, &net, &data, &gcfg)?;
    gen.save(&cfg.out_dir.join("generator.bin"))?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("epochs.csv")).map_err(Error::from)?;
    w.write_record(["epoch", "split", "misclass_pct", "recon_loss", "total_loss"]).map_err(Error::from)?;
    for e in &epochs {
        w.write_record([
            e.epoch.to_string(),
            e.split.to_string(),
            e.misclass_pct.to_string(),
            e.recon_loss.to_string(),
            e.total_loss.to_string(),
        ])
        .map_err(Error::from)?;
        log.record("epoch", e)?;
    }
    w.flush()?;

    let results = generator_attacks(&gen, &net, &data, &gcfg)?;
    let names: Vec<&str> = ds.items.iter().map(|m| m.name.as_str()).collect();
    let exported: Vec<Exported<'_>> = results
        .iter()
        .enumerate()
        .map(|(i, r)| Exported {
            name: names[i],
            split: ds.items[i].split,
            label: ds.items[i].label,
            ctx: &ctxs[i],
            result: r,
        })
        .collect();
    let attack_dir = cfg.out_dir.join("attacks");
    artifacts::export_attacks(&attack_dir, &exported)?;
    let metrics = artifacts::evaluate_dir(&attack_dir)?;
    let run = format!("{:?}", cfg.model).to_lowercase();
    attacks::write_table(&cfg.out_dir.join("metrics.csv"), &[(run, metrics.clone())])?;
    let mean_spike =
        results.iter().zip(&ctxs).map(|(r, c)| spike_score(c.vertices(), &r.x_adv)).sum::<f64>() / results.len() as f64;
    let spiky = mean_spike > SPIKE_THRESHOLD;
    let summary = serde_json::json!({
        "mean_spike_score": mean_spike,
        "spiky": spiky,
        "metrics": metrics,
    });
    std::fs::write(cfg.out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    log.record("done", &summary)?;
    if spiky {
        log::warn!("attacks look spiky: mean spike score {mean_spike:.1}");
    }
    if let Some(last) = epochs.iter().rev().find(|e| e.split == Split::Train) {
        println!(
            "epoch {}: train misclassification {:.1}%, reconstruction {:.5}",
            last.epoch, last.misclass_pct, last.recon_loss
        );
    }
    Ok(())
}

fn cmd_eval(runs: &[String], out: &Path) -> specadv::Result<()> {
    let mut table = Vec::new();
    for r in runs {
        let (name, dir) = r
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected NAME=DIR, got `{r}`")))?;
        table.push((name.to_string(), artifacts::evaluate_dir(Path::new(dir))?));
    }
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    attacks::write_table(out, &table)?;
    print!("{}", std::fs::read_to_string(out)?);
    Ok(())
}
