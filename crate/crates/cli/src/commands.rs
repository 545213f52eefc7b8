use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use stopband_core::data_io::{
    load_checkpoint, load_cifar10, save_checkpoint, synthetic_split, Split, SyntheticSpec,
};
use stopband_core::models::BuildOptions;
use stopband_core::pruning::{effective_prune, magnitude_prune, PruneMethod};
use stopband_core::reparam::h;
use stopband_core::trainer::{evaluate, train_with, EpochRecord, TrainHistory, TrainMode};
use stopband_core::{Checkpoint, Dataset, Model, PruneReport, Real};

use crate::config::{DatasetKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::lock::RunLock;
use crate::plot::{line_chart, Series};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.stb";
pub const HISTORY_FILE: &str = "history.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const PRUNE_DIR: &str = "prune";

/// Training, selection and test splits.
pub struct Data {
    pub train: Dataset,
    pub select: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &RunConfig) -> CliResult<Data> {
    let (mut train, test) = match cfg.dataset {
        DatasetKind::Synthetic => {
            let spec = SyntheticSpec {
                seed: cfg.data_seed,
                classes: cfg.classes,
                shape: cfg.input_shape.clone(),
                margin: cfg.margin,
            };
            synthetic_split(&spec, cfg.train_size, cfg.test_size)?
        }
        DatasetKind::Cifar10 => {
            let dir = cfg
                .data_dir
                .as_ref()
                .ok_or_else(|| CliError::usage("cifar10 needs data_dir"))?;
            if !dir.is_dir() {
                return Err(CliError::usage(format!("data directory {} does not exist", dir.display())));
            }
            let (train, test) = load_cifar10(dir).map_err(|e| match e {
                stopband_core::Error::Io(io) => CliError::usage(format!("cannot read CIFAR-10: {io}")),
                e => e.into(),
            })?;
            let train = if cfg.train_size > 0 {
                train.subset(cfg.train_size, cfg.data_seed)?
            } else {
                train
            };
            let test = if cfg.test_size > 0 {
                test.subset(cfg.test_size, cfg.data_seed.wrapping_add(1))?
            } else {
                test
            };
            (train, test)
        }
    };
    let select = if cfg.val_split > 0.0 {
        let n_val = ((train.len() as Real) * cfg.val_split).round() as usize;
        if n_val == 0 || n_val >= train.len() {
            return Err(CliError::usage(format!(
                "val_split {} leaves an empty split of {} samples",
                cfg.val_split,
                train.len()
            )));
        }
        let shuffled = train.subset(train.len(), cfg.data_seed)?;
        let idx: Vec<usize> = (0..shuffled.len()).collect();
        let (vi, ti) = idx.split_at(n_val);
        let (vx, vy) = shuffled.batch(vi)?;
        let (tx, ty) = shuffled.batch(ti)?;
        train = Dataset::new(tx, ty, shuffled.num_classes(), Split::Train)?;
        Dataset::new(vx, vy, shuffled.num_classes(), Split::Test)?
    } else {
        test.clone()
    };
    Ok(Data { train, select, test })
}

pub fn build_model(cfg: &RunConfig) -> CliResult<Model> {
    Ok(Model::build(
        &cfg.model,
        cfg.num_classes(),
        &cfg.sample_shape(),
        BuildOptions {
            seed: cfg.model_seed,
            reparam: cfg.reparam()?,
        },
    )?)
}

pub fn read_run_config(run: &Path) -> CliResult<RunConfig> {
    let path = run.join(CONFIG_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&text)?;
    Ok(cfg)
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

/// Runs the trainer, streaming the history to `dir/history.tsv`.
fn train_into(
    dir: &Path,
    model: Model,
    data: &Data,
    cfg: &RunConfig,
    mode: TrainMode,
    epochs: usize,
    budget: Option<stopband_core::BudgetSpec>,
) -> CliResult<stopband_core::trainer::TrainOutcome> {
    let mut history = BufWriter::new(File::create(dir.join(HISTORY_FILE))?);
    writeln!(history, "{}", EpochRecord::HEADER)?;
    history.flush()?;
    let mut write_err = None;
    let config = stopband_core::TrainConfig {
        mode,
        epochs,
        ..cfg.train_config()
    };
    let outcome = train_with(model, &data.train, &data.select, &config, budget.as_ref(), |rec| {
        if write_err.is_none() {
            if let Err(e) = writeln!(history, "{}", rec.to_line()).and_then(|_| history.flush()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    Ok(outcome)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.validate()?;
    let _lock = RunLock::acquire(out)?;
    let config_text = cfg.to_text();
    fs::write(out.join(CONFIG_FILE), &config_text)?;
    let data = load_data(cfg)?;
    let model = build_model(cfg)?;
    let budget = cfg.budget(model.count_prunable())?;
    info!(
        "training {} ({} mode, {} prunable weights) on {} samples",
        cfg.model,
        cfg.mode(),
        model.count_prunable(),
        data.train.len()
    );
    let outcome = train_into(out, model, &data, cfg, cfg.mode(), cfg.epochs, budget)?;
    let ckpt = Checkpoint::from_model(&outcome.best).with_provenance(outcome.best_epoch, &config_text);
    save_checkpoint(out.join(CHECKPOINT_FILE), &ckpt)?;
    let report = PruneReport::measure(&outcome.best, &data.test, cfg.prune_rate)?;
    fs::write(out.join(REPORT_FILE), report.to_kv())?;
    println!(
        "trained {} for {} epochs; selected epoch {}; test accuracy {:.2}%{}",
        cfg.model,
        outcome.history.records.len(),
        outcome.best_epoch,
        report.accuracy,
        report
            .surrogate_cost_fraction
            .map_or_else(String::new, |f| format!("; surrogate fraction {f:.4}"))
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

pub struct PruneArgs {
    pub run: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub rate: Option<Real>,
    pub method: PruneMethod,
    pub finetune: bool,
    pub finetune_epochs: usize,
    pub out: Option<PathBuf>,
}

fn rate_tag(p: Real) -> String {
    format!("{p:.2}")
}

/// Method name as spelled on the command line.
pub fn method_name(method: PruneMethod) -> &'static str {
    match method {
        PruneMethod::Effective => "ours-effective",
        PruneMethod::Magnitude => "magnitude",
    }
}

pub fn prune_dir_name(method: PruneMethod, p: Real, finetune: bool) -> String {
    let method = method_name(method);
    let ft = if finetune { "-finetune" } else { "" };
    format!("{method}-p{}{ft}", rate_tag(p))
}

pub fn cmd_prune(args: &PruneArgs) -> CliResult<PathBuf> {
    if args.finetune && args.method == PruneMethod::Effective {
        return Err(CliError::usage(
            "--finetune applies to magnitude pruning only; effective pruning is used without fine-tuning",
        ));
    }
    let cfg = read_run_config(&args.run)?;
    cfg.validate()?;
    let p = args.rate.unwrap_or(cfg.prune_rate);
    if !(0.0..1.0).contains(&p) {
        return Err(CliError::usage(format!("prune rate must be in [0, 1), got {p}")));
    }
    if args.finetune && args.finetune_epochs == 0 {
        return Err(CliError::usage("--finetune-epochs must be at least 1"));
    }
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| args.run.join(CHECKPOINT_FILE));
    let ckpt = read_checkpoint(&ckpt_path)?;
    let mut model = ckpt.to_model()?;
    let out = args.out.clone().unwrap_or_else(|| {
        args.run.join(PRUNE_DIR).join(prune_dir_name(args.method, p, args.finetune))
    });
    let _lock = RunLock::acquire(&out)?;
    let data = load_data(&cfg)?;
    let before = evaluate(&model, &data.test)?;
    let removed = match args.method {
        PruneMethod::Effective => effective_prune(&mut model, p)?,
        PruneMethod::Magnitude => magnitude_prune(&mut model, p)?,
    };
    info!("{} pruning at p={p} removed {removed} weights", args.method);
    if args.finetune {
        let outcome = train_into(&out, model, &data, &cfg, TrainMode::Finetune, args.finetune_epochs, None)?;
        model = outcome.best;
    }
    let config_text = cfg.to_text();
    let mut pruned = Checkpoint::from_model(&model)
        .with_provenance(ckpt.meta("epoch").ok().and_then(|e| e.parse().ok()).unwrap_or(0), &config_text)
        .with_meta("prune_method", args.method)
        .with_meta("prune_rate", p)
        .with_meta("finetuned", args.finetune);
    if let Ok(src) = ckpt.meta("config_sha256") {
        pruned = pruned.with_meta("source_config_sha256", src);
    }
    save_checkpoint(out.join(CHECKPOINT_FILE), &pruned)?;
    let mut report = PruneReport::measure(&model, &data.test, p)?;
    report.method = Some(args.method);
    report.accuracy_before_prune = Some(before);
    fs::write(out.join(REPORT_FILE), report.to_kv())?;
    println!(
        "{} pruning at p={p}: accuracy {before:.2}% -> {:.2}%, nonzero fraction {:.5}{}",
        method_name(args.method),
        report.accuracy,
        report.exact_nonzero_fraction,
        if args.finetune { " (fine-tuned)" } else { "" }
    );
    println!("artifacts in {}", out.display());
    Ok(out)
}

pub fn cmd_eval(run: &Path, checkpoint: Option<&Path>) -> CliResult<()> {
    let cfg = read_run_config(run)?;
    cfg.validate()?;
    let path = checkpoint.map_or_else(|| run.join(CHECKPOINT_FILE), Path::to_path_buf);
    let model = read_checkpoint(&path)?.to_model()?;
    let data = load_data(&cfg)?;
    let report = PruneReport::measure(&model, &data.test, cfg.prune_rate)?;
    print!("{}", report.to_kv());
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path, rates: &[Real]) -> CliResult<()> {
    if rates.is_empty() {
        return Err(CliError::usage("sweep needs at least one prune rate"));
    }
    for &p in rates {
        let mut c = cfg.clone();
        c.prune_rate = p;
        c.validate()?;
    }
    for &p in rates {
        let mut c = cfg.clone();
        c.prune_rate = p;
        let dir = out.join(format!("p{}", rate_tag(p)));
        cmd_train(&c, &dir)?;
        let method = match c.mode() {
            TrainMode::Reparam => PruneMethod::Effective,
            _ => PruneMethod::Magnitude,
        };
        cmd_prune(&PruneArgs {
            run: dir,
            checkpoint: None,
            rate: Some(p),
            method,
            finetune: false,
            finetune_epochs: 0,
            out: None,
        })?;
    }
    cmd_report(out, true)
}

/// Directories under `root` (inclusive, up to four levels deep) that hold `file`.
fn find_with(root: &Path, file: &str) -> CliResult<Vec<PathBuf>> {
    fn walk(dir: &Path, file: &str, depth: usize, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        if dir.join(file).is_file() {
            out.push(dir.to_path_buf());
        }
        if depth == 0 {
            return Ok(());
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for e in entries {
            walk(&e, file, depth - 1, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, file, 4, &mut out)?;
    Ok(out)
}

fn rel(root: &Path, p: &Path) -> String {
    let r = p.strip_prefix(root).unwrap_or(p).display().to_string();
    if r.is_empty() {
        ".".into()
    } else {
        r
    }
}

fn fmt_opt(v: Option<Real>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

/// Sample points of `h_t` at `n = 4` for a few temperatures.
pub fn h_curve_table() -> String {
    let temps: [Real; 3] = [0.5, 1.0, 2.0];
    let mut s = String::from("# x\th(t=0.5,n=4)\th(t=1,n=4)\th(t=2,n=4)\n");
    for i in -300..=300 {
        let x = i as Real / 100.0;
        s.push_str(&x.to_string());
        for &t in &temps {
            s.push_str(&format!("\t{}", h(x, t, 4)));
        }
        s.push('\n');
    }
    s
}

fn write_plots(root: &Path, histories: &[(String, TrainHistory)]) -> CliResult<()> {
    let table = h_curve_table();
    fs::write(root.join("h_curve.tsv"), &table)?;
    let mut series: Vec<Series> = ["t=0.5", "t=1", "t=2"]
        .iter()
        .map(|l| Series {
            label: format!("{l}, n=4"),
            points: Vec::new(),
        })
        .collect();
    for line in table.lines().skip(1) {
        let v: Vec<f64> = line.split('\t').filter_map(|x| x.parse().ok()).collect();
        for (k, s) in series.iter_mut().enumerate() {
            s.points.push((v[0], v[k + 1]));
        }
    }
    fs::write(root.join("h_curve.svg"), line_chart("stopband function h_t", "x", "h_t(x)", &series))?;

    if histories.is_empty() {
        return Ok(());
    }
    let acc: Vec<Series> = histories
        .iter()
        .map(|(name, h)| Series {
            label: name.clone(),
            points: h.records.iter().map(|r| (r.epoch as f64, r.test_accuracy as f64)).collect(),
        })
        .collect();
    fs::write(
        root.join("training_accuracy.svg"),
        line_chart("selection accuracy", "epoch", "accuracy (%)", &acc),
    )?;
    let frac: Vec<Series> = histories
        .iter()
        .filter(|(_, h)| h.records.iter().any(|r| r.surrogate_fraction.is_some()))
        .map(|(name, h)| Series {
            label: name.clone(),
            points: h
                .records
                .iter()
                .filter_map(|r| r.surrogate_fraction.map(|f| (r.epoch as f64, f as f64)))
                .collect(),
        })
        .collect();
    if !frac.is_empty() {
        fs::write(
            root.join("training_surrogate_fraction.svg"),
            line_chart("surrogate remaining fraction", "epoch", "C / C_initial", &frac),
        )?;
    }
    Ok(())
}

pub fn cmd_report(root: &Path, plots: bool) -> CliResult<()> {
    if !root.is_dir() {
        return Err(CliError::usage(format!("{} is not a directory", root.display())));
    }
    let mut reports = Vec::new();
    for dir in find_with(root, REPORT_FILE)? {
        let path = dir.join(REPORT_FILE);
        let text = fs::read_to_string(&path)?;
        let r = PruneReport::from_kv(&text)
            .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        reports.push((rel(root, &dir), r));
    }
    if reports.is_empty() {
        return Err(CliError::usage(format!(
            "no run artifacts ({REPORT_FILE}) under {}",
            root.display()
        )));
    }
    let pruned: Vec<_> = reports.iter().filter(|(_, r)| r.method.is_some()).collect();
    let mut rows: Vec<_> = if pruned.is_empty() {
        reports.iter().collect()
    } else {
        pruned
    };
    rows.sort_by(|a, b| a.1.target_rate.total_cmp(&b.1.target_rate).then_with(|| a.0.cmp(&b.0)));

    let mut table = String::new();
    table.push_str(&format!(
        "{:<40} {:<15} {:>6} {:>10} {:>10} {:>10} {:>10}\n",
        "run", "method", "p", "acc_before", "acc_after", "surrogate", "nonzero"
    ));
    for (name, r) in &rows {
        let (before, after) = match r.accuracy_before_prune {
            Some(b) => (Some(b), Some(r.accuracy)),
            None => (Some(r.accuracy), None),
        };
        table.push_str(&format!(
            "{:<40} {:<15} {:>6.2} {:>10} {:>10} {:>10} {:>10.5}\n",
            name,
            r.method.map_or("none", method_name),
            r.target_rate,
            fmt_opt(before, 2),
            fmt_opt(after, 2),
            fmt_opt(r.surrogate_cost_fraction, 4),
            r.exact_nonzero_fraction
        ));
    }
    print!("{table}");
    fs::write(root.join(SUMMARY_FILE), &table)?;

    if plots {
        let mut histories = Vec::new();
        for dir in find_with(root, HISTORY_FILE)? {
            let path = dir.join(HISTORY_FILE);
            let h = TrainHistory::parse(&fs::read_to_string(&path)?)
                .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
            histories.push((rel(root, &dir), h));
        }
        write_plots(root, &histories)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h_curve_passes_through_known_point() {
        let table = h_curve_table();
        let row = table.lines().find(|l| l.starts_with("1\t")).unwrap();
        let v: Real = row.split('\t').nth(2).unwrap().parse().unwrap();
        assert!((v - 0.3775).abs() < 5e-4, "{v}");
    }

    #[test]
    fn prune_dir_names() {
        assert_eq!(prune_dir_name(PruneMethod::Effective, 0.9, false), "ours-effective-p0.90");
        assert_eq!(prune_dir_name(PruneMethod::Magnitude, 0.95, true), "magnitude-p0.95-finetune");
    }
}
