mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deskbot_core::checkpoint::Checkpoint;
use deskbot_core::config::{EvalConfig, RunConfig, Variant};
use deskbot_core::episode::{build_dataset, load_manifest, DatasetSpec, Split, TaskEntry};
use deskbot_core::eval::{evaluate_checkpoint, run_ablation, AblationSpec, AblationTable, EvalReport};
use deskbot_core::sim::{TaskKind, TaskSpec};
use deskbot_core::train::{resume, train, MetricsRow};
use deskbot_core::Error;

#[derive(Parser)]
#[command(name = "deskbot", version, about = "Tabletop manipulation policy: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations and write a dataset directory.
    GenData(GenData),
    /// Train a policy on the seen split of a dataset.
    Train(Train),
    /// Roll out a checkpoint and write an evaluation report.
    Eval(Eval),
    /// Train and evaluate ablation variants on one dataset.
    Ablate(Ablate),
    /// Render loss curves and success-rate charts.
    Report(Report),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file with one `key = value` per line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set learning_rate=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut pairs = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::from(e).in_file(p))?;
                RunConfig::parse(&text).map_err(|e| e.in_file(p))?
            }
            None => Vec::new(),
        };
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::config(s, "expected KEY=VALUE"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        cfg.apply(&pairs)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    task: String,
    /// Seen variations: ids 0..N.
    #[arg(long, default_value_t = 1, conflicts_with = "seen_ids")]
    variations: u32,
    /// Unseen variations: the N ids after the seen ones.
    #[arg(long, default_value_t = 0, conflicts_with = "unseen_ids")]
    unseen: u32,
    /// Explicit seen variation ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    seen_ids: Vec<u32>,
    /// Explicit unseen variation ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    unseen_ids: Vec<u32>,
    /// Objects per scene (default depends on the task).
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long, default_value_t = 10)]
    demos: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint with its stored configuration.
    #[arg(long, conflicts_with_all = ["config", "set"])]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset whose task variations to evaluate; defaults to the ones stored
    /// in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// seen, unseen or both.
    #[arg(long, default_value = "both")]
    split: String,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; defaults to `eval_<split>.json` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated variant ids: R1..R8, no_hist, one_view.
    #[arg(long, value_delimiter = ',', required = true)]
    variants: Vec<String>,
    /// Wall-clock budget for the whole table, in seconds.
    #[arg(long)]
    budget_secs: Option<f64>,
    #[arg(long, default_value = "ablation.json")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct Report {
    /// Training output directory containing `metrics.jsonl`.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Evaluation reports to chart.
    #[arg(long = "eval")]
    evals: Vec<PathBuf>,
    #[arg(long)]
    ablation: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for problems with the user's input, 2 for everything else.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config { .. }
        | Error::EmptyDataset
        | Error::UnknownTask(_)
        | Error::UnknownColor(_)
        | Error::InvalidTask(_)
        | Error::ImageSize(..)
        | Error::Incompatible(_)
        | Error::BadContainer(_)
        | Error::VersionMismatch { .. }
        | Error::Truncated(_)
        | Error::Checksum { .. }
        | Error::Json(_)
        | Error::Io(_)
        | Error::TaskOutOfRange(..) => 1,
        _ => 2,
    }
}

fn gen_data(a: GenData) -> Result<(), Error> {
    let kind = TaskKind::from_name(&a.task)?;
    let (seen, unseen): (Vec<u32>, Vec<u32>) = if a.seen_ids.is_empty() && a.unseen_ids.is_empty() {
        ((0..a.variations).collect(), (a.variations..a.variations + a.unseen).collect())
    } else {
        (a.seen_ids.clone(), a.unseen_ids.clone())
    };
    let mut tasks = Vec::new();
    for (ids, split) in [(seen, Split::Seen), (unseen, Split::Unseen)] {
        for v in ids {
            let mut t = TaskSpec::from_variation(kind, v)?;
            if let Some(n) = a.objects {
                t.num_objects = n;
                t.validate()?;
            }
            tasks.push((t, split));
        }
    }
    let spec =
        DatasetSpec { tasks, demos_per_variation: a.demos, seed: a.seed, image_size: (a.image_size, a.image_size) };
    let m = build_dataset(&spec, &a.out)?;
    println!("wrote {} episodes to {} (manifest hash {})", m.len(), a.out.display(), m.hash());
    Ok(())
}

fn run_train(a: Train) -> Result<(), Error> {
    let manifest = load_manifest(&a.data)?;
    let ckpt = match &a.resume {
        Some(p) => resume(&manifest, Checkpoint::load(p)?, Some(&a.out))?,
        None => {
            let cfg = a.config.load()?;
            std::fs::create_dir_all(&a.out)?;
            std::fs::write(a.out.join("config.toml"), cfg.to_text())?;
            train(&manifest, &cfg, Some(&a.out))?
        }
    };
    if let Some(last) = ckpt.log.last() {
        println!("iteration {} loss {:.6}", last.iteration, last.total);
    }
    println!("checkpoint {} ({})", a.out.join("final.ckpt").display(), ckpt.hash()?);
    Ok(())
}

fn splits(name: &str) -> Result<Vec<Split>, Error> {
    Ok(match name {
        "both" => vec![Split::Seen, Split::Unseen],
        s => {
            vec![Split::from_name(s)
                .map_err(|_| Error::config("split", format!("`{s}` is not seen, unseen or both")))?]
        }
    })
}

fn task_list(entries: &[TaskEntry], splits: &[Split]) -> Result<Vec<(TaskSpec, Split)>, Error> {
    entries.iter().filter(|e| splits.contains(&e.split)).map(|e| Ok((e.spec()?, e.split))).collect()
}

fn run_eval(a: Eval) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let entries = match &a.data {
        Some(d) => load_manifest(d)?.tasks(),
        None => ckpt.tasks.clone(),
    };
    let splits = splits(&a.split)?;
    let tasks = task_list(&entries, &splits)?;
    let defaults = EvalConfig::default();
    let episodes = a.episodes.unwrap_or(defaults.episodes);
    let seed = a.seed.unwrap_or(defaults.eval_seed);
    let report = evaluate_checkpoint(&ckpt, &tasks, episodes, seed)?;
    let out = a.out.unwrap_or_else(|| a.ckpt.with_file_name(format!("eval_{}.json", a.split)));
    report.save(&out)?;
    print!("{}", report.to_table());
    println!("report {}", out.display());
    Ok(())
}

fn ablate(a: Ablate) -> Result<(), Error> {
    let cfg = a.config.load()?;
    let variants = a.variants.iter().map(|v| Variant::from_name(v)).collect::<Result<Vec<_>, _>>()?;
    let manifest = load_manifest(&a.data)?;
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let episodes = manifest.rows_in(Split::Seen).map(|r| manifest.load(r)).collect::<Result<Vec<_>, _>>()?;
    let tasks = task_list(&manifest.tasks(), &[Split::Seen, Split::Unseen])?;
    let spec = AblationSpec { episodes: &episodes, eval_tasks: &tasks, base: &cfg, budget_secs: a.budget_secs };
    let table = run_ablation(&spec, &variants)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&table)?).map_err(|e| Error::from(e).in_file(&a.out))?;
    print!("{}", table.to_table());
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::from(e).in_file(path)))
        .collect()
}

fn report(a: Report) -> Result<(), Error> {
    std::fs::create_dir_all(&a.out)?;
    let mut wrote = false;
    if let Some(run) = &a.run {
        let rows = read_metrics(&run.join("metrics.jsonl"))?;
        let series = [
            ("total", rows.iter().map(|r| (r.iteration as f64, r.total)).collect::<Vec<_>>()),
            ("position", rows.iter().map(|r| (r.iteration as f64, r.position)).collect()),
            ("rotation", rows.iter().map(|r| (r.iteration as f64, r.rotation)).collect()),
            ("gripper", rows.iter().map(|r| (r.iteration as f64, r.gripper)).collect()),
            ("ce", rows.iter().map(|r| (r.iteration as f64, r.ce)).collect()),
        ];
        let path = a.out.join("loss_curve.png");
        plot::line_chart(&series, &path)?;
        println!(
            "{:>10} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "iteration", "total", "position", "rotation", "gripper", "ce"
        );
        for r in &rows {
            println!(
                "{:>10} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                r.iteration, r.total, r.position, r.rotation, r.gripper, r.ce
            );
        }
        println!("wrote {}", path.display());
        wrote = true;
    }
    let mut bars = Vec::new();
    for p in &a.evals {
        let r = EvalReport::load(p)?;
        print!("{}", r.to_table());
        for e in &r.entries {
            bars.push((format!("{} {}", e.task, e.split.name()), e.success_rate));
        }
    }
    if let Some(p) = &a.ablation {
        let text = std::fs::read_to_string(p).map_err(|e| Error::from(e).in_file(p))?;
        let t: AblationTable = serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(p))?;
        print!("{}", t.to_table());
        for r in &t.rows {
            for s in [Split::Seen, Split::Unseen] {
                if let Some(v) = r.success_rate(s) {
                    bars.push((format!("{} {}", r.variant, s.name()), v));
                }
            }
        }
    }
    if !bars.is_empty() {
        let path = a.out.join("success.png");
        plot::bar_chart(&bars, &path)?;
        println!("wrote {}", path.display());
        wrote = true;
    }
    if !wrote {
        return Err(Error::config("report", "nothing to report: pass --run, --eval or --ablation"));
    }
    Ok(())
}
