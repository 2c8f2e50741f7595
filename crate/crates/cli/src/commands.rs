use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wheelgat::autodiff::{finite_diff_check, GradCheckReport, Parameters, Primitive, TensorError};
use wheelgat::checkpoint::{Checkpoint, CheckpointError};
use wheelgat::dataset::{load_split, Split, Utterance, Vocab};
use wheelgat::metrics::EvalReport;
use wheelgat::model::{joint_loss, LossConfig, ModelConfig, Sizes, WheelGat};
use wheelgat::training::{evaluate, train as train_model, RunMode, TrainOutcome};
use wheelgat::wheelgraph::render_attention;

use crate::config::{RunConfig, Variant, KEYS};
use crate::{AblateArgs, CliError, EvalArgs, GradcheckArgs, PredictArgs, Reference, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.best";
pub const LOG_FILE: &str = "train.log";
pub const VAL_REPORT_FILE: &str = "val.report";
pub const CONFIG_ECHO_FILE: &str = "config.resolved";
pub const ABLATION_REPORT_FILE: &str = "ablation.report";

/// Worst relative error a gradient group may show.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-5;

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn data_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let dir = cfg
        .data_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("no data directory given (use --data-dir or data_dir)".into()))?;
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    Ok(dir)
}

fn load(cfg: &RunConfig, split: Split) -> Result<Vec<Utterance>, CliError> {
    let utts = load_split(data_dir(cfg)?, split, cfg.layout).map_err(|e| CliError::Data(e.to_string()))?;
    if utts.is_empty() {
        return Err(CliError::Data(format!("split {split} is empty")));
    }
    Ok(utts)
}

fn checkpoint_error(e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Mismatch(m) => CliError::Mismatch(m),
        other => CliError::Data(other.to_string()),
    }
}

fn sizes(vocab: &Vocab) -> Sizes {
    Sizes {
        vocab: vocab.tokens.len(),
        intents: vocab.intents.len(),
        slots: vocab.slots.len(),
    }
}

/// Everything one training run produced.
pub struct RunArtifacts {
    pub outcome: TrainOutcome,
    pub vocab: Vocab,
    pub validation: EvalReport,
}

/// Trains with `cfg` and writes the checkpoint, log, validation report and
/// config echo into `out_dir`. The log is appended epoch by epoch.
pub fn train_into(cfg: &RunConfig, out_dir: &Path, tag: &str) -> Result<RunArtifacts, CliError> {
    cfg.validate()?;
    let train_set = load(cfg, Split::Train)?;
    let dev = load(cfg, Split::Dev)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join(CONFIG_ECHO_FILE), &cfg.render())?;

    let vocab = Vocab::build(&train_set, cfg.lowercase).map_err(|e| CliError::Data(e.to_string()))?;
    let model =
        WheelGat::init(cfg.model.clone(), sizes(&vocab), cfg.train.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log =
        fs::File::create(&log_path).map_err(|e| CliError::Data(format!("cannot write {}: {e}", log_path.display())))?;
    let mut io_error = None;
    let outcome = train_model(model, &vocab, &train_set, &dev, &cfg.train, |e, _| {
        if let Err(err) = writeln!(log, "{}", e.line()) {
            io_error = Some(err);
            return ControlFlow::Break(());
        }
        eprintln!(
            "[{tag}] epoch {}  loss {:.4}  {}",
            e.epoch,
            e.train_loss,
            e.validation.summary()
        );
        ControlFlow::Continue(())
    })
    .map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(err) = io_error {
        return Err(CliError::Data(format!("cannot write {}: {err}", log_path.display())));
    }

    let validation = outcome
        .log
        .get(outcome.best_epoch - 1)
        .map(|e| e.validation.clone())
        .expect("best epoch is logged");
    let ck = Checkpoint {
        model: outcome.best.clone(),
        vocab: vocab.clone(),
        epoch: outcome.best_epoch,
    };
    ck.save(&out_dir.join(CHECKPOINT_FILE)).map_err(checkpoint_error)?;
    write_file(&out_dir.join(VAL_REPORT_FILE), &validation.to_key_values())?;
    Ok(RunArtifacts {
        outcome,
        vocab,
        validation,
    })
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = args.config.resolve()?;
    cfg.apply_variant(args.variant);
    let run = train_into(&cfg, &args.out_dir, args.variant.name())?;
    println!(
        "best epoch {} ({} {:.4})",
        run.outcome.best_epoch,
        cfg.train.selection.name(),
        run.outcome.best_score
    );
    println!("validation: {}", run.validation.summary());
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(checkpoint_error)
}

/// Configuration for evaluating `ck`: the checkpoint's own architecture
/// unless one was requested explicitly, in which case it must match.
fn eval_config(args: &crate::ConfigArgs, ck: &Checkpoint) -> Result<RunConfig, CliError> {
    let mut cfg = args.resolve()?;
    if args.is_explicit() {
        ck.check_config(&cfg.model).map_err(checkpoint_error)?;
    }
    cfg.model = ck.model.config.clone();
    Ok(cfg)
}

fn dump_block(out: &mut String, model: &WheelGat, vocab: &Vocab, tokens: &[String]) -> Result<(), CliError> {
    let (pred, att) = model
        .predict_with_attention(&vocab.encode_tokens(tokens))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let intent = vocab.intents.name(pred.intent).unwrap_or("O").to_string();
    if let Some(att) = att {
        out.push_str(&render_attention(&att, tokens, &intent));
        out.push('\n');
    }
    Ok(())
}

/// Measured scores beside published ones, in percent.
pub fn reference_table(report: &EvalReport, reference: Reference) -> String {
    let (f1, intent, sentence) = reference.scores();
    let mut out = String::new();
    let _ = writeln!(out, "{:<14}{:>10}{:>12}", "metric", "measured", "published");
    for (name, ours, theirs) in [
        ("slot_f1", report.slot_f1, f1),
        ("intent_acc", report.intent_accuracy, intent),
        ("sentence_acc", report.sentence_accuracy, sentence),
    ] {
        let _ = writeln!(out, "{name:<14}{:>10.2}{theirs:>12.1}", 100.0 * ours);
    }
    out
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let mut cfg = eval_config(&args.config, &ck)?;
    cfg.lowercase = ck.vocab.lowercase;
    let utts = load(&cfg, args.split)?;
    let report = evaluate(&ck.model, &ck.vocab, &utts).map_err(|e| CliError::Data(e.to_string()))?;

    let report_path = args.report.clone().unwrap_or_else(|| {
        let dir = args.checkpoint.parent().unwrap_or(Path::new("."));
        dir.join(format!("{}.report", args.split))
    });
    write_file(&report_path, &report.to_key_values())?;
    if let Some(path) = &args.dump_attention {
        let mut out = String::new();
        for u in &utts {
            dump_block(&mut out, &ck.model, &ck.vocab, &u.tokens)?;
        }
        write_file(path, &out)?;
    }
    println!("{} ({}): {}", args.split, args.checkpoint.display(), report.summary());
    if let Some(r) = args.reference {
        print!("{}", reference_table(&report, r));
    }
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let text = fs::read_to_string(&args.input)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.input.display())))?;
    let mut out = String::new();
    let mut dump = String::new();
    let mut skipped = 0;
    for line in text.lines() {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            skipped += 1;
            continue;
        }
        let p = ck
            .model
            .predict(&ck.vocab.encode_tokens(&tokens))
            .map_err(|e| CliError::Data(e.to_string()))?;
        let name = |t: &wheelgat::dataset::Table, id| t.name(id).unwrap_or("O").to_string();
        let tags: Vec<String> = p.slots.iter().map(|&s| name(&ck.vocab.slots, s)).collect();
        let _ = writeln!(out, "{}\t{}", name(&ck.vocab.intents, p.intent), tags.join(" "));
        if args.dump_attention.is_some() {
            dump_block(&mut dump, &ck.model, &ck.vocab, &tokens)?;
        }
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} empty line(s)");
    }
    match &args.output {
        Some(p) => write_file(p, &out)?,
        None => print!("{out}"),
    }
    if let Some(p) = &args.dump_attention {
        write_file(p, &dump)?;
    }
    Ok(())
}

pub const TINY_SIZES: Sizes = Sizes {
    vocab: 12,
    intents: 5,
    slots: 7,
};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        hidden_dim: 4,
        node_dim: 8,
        dropout: 0.0,
        ..Default::default()
    }
}

/// Gradient check of the full joint loss on a tiny model with random
/// (nonzero) biases, at sequence lengths 1, 2 and 5.
pub fn gradient_report(seed: u64, fault: Option<Primitive>) -> Result<GradCheckReport, CliError> {
    let mut model = WheelGat::init(tiny_config(), TINY_SIZES, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for (name, t) in model.named_params_mut() {
        if name.ends_with(".b") || name.contains(".b_") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let mut report = GradCheckReport::default();
    for len in [1usize, 2, 5] {
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..TINY_SIZES.vocab)).collect();
        let slots: Vec<usize> = (0..len).map(|_| rng.gen_range(0..TINY_SIZES.slots)).collect();
        let intent = rng.gen_range(0..TINY_SIZES.intents);
        let r = finite_diff_check(
            &mut model,
            |m, g| {
                if let Some(p) = fault {
                    g.corrupt_backward(p);
                }
                let fwd = m
                    .forward(g, &ids, &mut RunMode::Eval)
                    .map_err(|e| TensorError::Usage(e.to_string()))?;
                let l = joint_loss(g, &fwd, intent, &slots, LossConfig::default())
                    .map_err(|e| TensorError::Usage(e.to_string()))?;
                Ok(l.total)
            },
            GRADCHECK_EPSILON,
        )
        .map_err(|e| CliError::Check(format!("gradient check could not run: {e}")))?;
        report.merge(r);
    }
    Ok(report)
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let fault = match &args.inject_fault {
        Some(name) => {
            Some(Primitive::from_name(name).ok_or_else(|| CliError::Usage(format!("unknown primitive {name:?}")))?)
        }
        None => None,
    };
    let report = gradient_report(args.seed, fault)?;
    println!("{:<32}{:>12}{:>12}{:>8}", "group", "max_rel", "mean_rel", "n");
    for g in &report.groups {
        let flag = if g.max_rel < GRADCHECK_TOLERANCE { "" } else { "  FAIL" };
        println!(
            "{:<32}{:>12.3e}{:>12.3e}{:>8}{flag}",
            g.name, g.max_rel, g.mean_rel, g.count
        );
    }
    println!("worst {:.3e} (tolerance {GRADCHECK_TOLERANCE:e})", report.worst());
    if report.passes(GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(CliError::Check("gradient check failed".into()))
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub changed: Vec<String>,
}

pub fn render_ablation(dataset: &str, split: Split, seed: u64, rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# dataset={dataset} split={split} seed={seed}");
    let _ = writeln!(
        out,
        "{:<14}{:<22}{:>9}{:>9}{:>9}  changed",
        "variant", "model", "slot_f1", "intent", "overall"
    );
    for r in rows {
        let changed = if r.changed.is_empty() {
            "-".to_string()
        } else {
            r.changed.join(",")
        };
        let _ = writeln!(
            out,
            "{:<14}{:<22}{:>9.2}{:>9.2}{:>9.2}  {changed}",
            r.variant.name(),
            r.variant.label(),
            100.0 * r.report.slot_f1,
            100.0 * r.report.intent_accuracy,
            100.0 * r.report.sentence_accuracy,
        );
    }
    out
}

fn ablate_one(base: &RunConfig, v: Variant, split: Split, out_dir: &Path) -> Result<AblationRow, CliError> {
    let mut cfg = base.clone();
    cfg.apply_variant(v);
    let run = train_into(&cfg, &out_dir.join(v.name()), v.name())?;
    let utts = load(&cfg, split)?;
    let report = evaluate(&run.outcome.best, &run.vocab, &utts).map_err(|e| CliError::Data(e.to_string()))?;
    let changed = KEYS
        .iter()
        .filter(|k| cfg.get(k) != base.get(k))
        .map(|k| format!("{k}={}", cfg.get(k).unwrap_or_default()))
        .collect();
    Ok(AblationRow {
        variant: v,
        report,
        changed,
    })
}

pub fn ablate(args: &AblateArgs) -> Result<(), CliError> {
    let base = args.config.resolve()?;
    base.validate()?;
    let dir = data_dir(&base)?;
    load(&base, args.split)?;
    create_dir(&args.out_dir)?;
    write_file(&args.out_dir.join(CONFIG_ECHO_FILE), &base.render())?;

    let rows: Vec<AblationRow> = if args.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = Variant::ALL
                .iter()
                .map(|&v| {
                    let base = &base;
                    s.spawn(move || ablate_one(base, v, args.split, &args.out_dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect::<Result<_, _>>()
        })?
    } else {
        Variant::ALL
            .iter()
            .map(|&v| ablate_one(&base, v, args.split, &args.out_dir))
            .collect::<Result<_, _>>()?
    };
    let dataset = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    let table = render_ablation(&dataset, args.split, base.train.seed, &rows);
    write_file(&args.out_dir.join(ABLATION_REPORT_FILE), &table)?;
    print!("{table}");
    Ok(())
}
