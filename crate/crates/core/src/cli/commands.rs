use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{export, grad_check, worker_count, Checkpoint, RunConfig};
use crate::error::{Error, Result};
use crate::model::Tadformer;
use crate::mtl::{self, count_trainable_params, eval_sample, eval_set, EvalRecord, ParamCount, SynthSpec};
use crate::params::ParamGroup;
use crate::peft::TuningMode;

pub const CSV_HEADER: &str = "step,task,loss,metric,weighted_loss,seed";
pub(crate) const CHECKPOINT_FILE: &str = "checkpoint.tadf";
const METRICS_FILE: &str = "metrics.csv";
const CONFIG_FILE: &str = "config.json";

fn metric_name(spec: &mtl::TaskSpec) -> &'static str {
    if spec.lower_is_better() {
        "rmse"
    } else {
        "miou"
    }
}

fn print_eval(cfg: &RunConfig, eval: &EvalRecord, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "final weighted loss {:.6}", eval.weighted)?;
    for (i, spec) in cfg.tasks.iter().enumerate() {
        writeln!(
            out,
            "task {i} {:<16} loss {:.6}  {} {:.6}",
            spec.kind.name(),
            eval.losses[i],
            metric_name(spec),
            eval.metrics[i]
        )?;
    }
    Ok(())
}

/// Trains, streaming one CSV row per task per step, then writes the final
/// checkpoint and the canonical config next to it.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let workers = worker_count()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_canonical_json())?;
    let mut csv = BufWriter::new(File::create(cfg.out_dir.join(METRICS_FILE))?);
    writeln!(csv, "{CSV_HEADER}")?;
    let mut io_error: Option<std::io::Error> = None;
    let outcome = mtl::train(&cfg.model_config(), &cfg.tasks, cfg.mode, &cfg.train_config(workers), |rec| {
        if io_error.is_some() {
            return;
        }
        for (i, (loss, metric)) in rec.losses.iter().zip(&rec.metrics).enumerate() {
            if let Err(e) = writeln!(csv, "{},{i},{loss:.8e},{metric:.8e},{:.8e},{}", rec.step, rec.weighted, cfg.seed) {
                io_error = Some(e);
                return;
            }
        }
    });
    csv.flush()?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let outcome = outcome?;
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    Checkpoint::from_store(&outcome.store).write(&ckpt)?;
    writeln!(out, "mode {}  seed {}  steps {}", cfg.mode, cfg.seed, cfg.steps)?;
    print_eval(cfg, &outcome.eval, out)?;
    writeln!(out, "wrote {} and {}", cfg.out_dir.join(METRICS_FILE).display(), ckpt.display())?;
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Tadformer, crate::params::ParamStore<f32>)> {
    let (model, mut store) = Tadformer::new::<f32>(cfg.model_config(), cfg.seed)?;
    Checkpoint::read(checkpoint)?.load_into(&mut store)?;
    Ok((model, store))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, csv: bool, out: &mut dyn Write) -> Result<()> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let spec = SynthSpec::new(&cfg.backbone, &cfg.tasks);
    let samples = eval_set(cfg.seed, cfg.eval_samples, &spec, worker_count()?);
    let eval = mtl::evaluate(&model, &store, cfg.mode, &cfg.tasks, &samples, cfg.batch_size)?;
    if csv {
        writeln!(out, "task,kind,loss,metric,weighted_loss")?;
        for (i, spec) in cfg.tasks.iter().enumerate() {
            writeln!(out, "{i},{},{:.8e},{:.8e},{:.8e}", spec.kind.name(), eval.losses[i], eval.metrics[i], eval.weighted)?;
        }
        Ok(())
    } else {
        print_eval(cfg, &eval, out)
    }
}

/// Columns of the parameter table; the frozen-backbone groups are summed
/// into one `backbone` column.
const TABLE_GROUPS: [ParamGroup; 9] = [
    ParamGroup::TsLora,
    ParamGroup::TaLora,
    ParamGroup::Dtf,
    ParamGroup::Prompts,
    ParamGroup::Upsampler,
    ParamGroup::Gate,
    ParamGroup::Norm,
    ParamGroup::PosBias,
    ParamGroup::Head,
];

/// Trainable counts of every mode for the configured model.
pub fn param_table(cfg: &RunConfig) -> Result<Vec<ParamCount>> {
    let (_, store) = Tadformer::new::<f32>(cfg.model_config(), cfg.seed)?;
    Ok(TuningMode::ALL.iter().map(|&m| count_trainable_params(&store, m)).collect())
}

fn table_rows(counts: &[ParamCount]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["mode".to_string()];
    header.extend(TABLE_GROUPS.iter().map(|g| g.name().to_string()));
    header.push("backbone".into());
    header.push("total".into());
    let rows = counts
        .iter()
        .map(|c| {
            let mut row = vec![c.mode.name().to_string()];
            row.extend(TABLE_GROUPS.iter().map(|&g| c.group(g).to_string()));
            let backbone = c.group(ParamGroup::PatchEmbed) + c.group(ParamGroup::Linear) + c.group(ParamGroup::PatchMerge);
            row.push(backbone.to_string());
            row.push(c.total.to_string());
            row
        })
        .collect();
    (header, rows)
}

/// Right-aligned columns, mode names left-aligned.
pub fn render_param_table(counts: &[ParamCount]) -> String {
    let (header, rows) = table_rows(counts);
    let widths: Vec<usize> = (0..header.len())
        .map(|j| rows.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (j, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if j == 0 {
                s.push_str(&format!("{c:<w$}"));
            } else {
                s.push_str(&format!("  {c:>w$}"));
            }
        }
        s.push('\n');
        s
    };
    let mut s = line(&header);
    for r in &rows {
        s.push_str(&line(r));
    }
    s
}

pub fn render_param_csv(counts: &[ParamCount]) -> String {
    let (header, rows) = table_rows(counts);
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

pub fn cmd_count_params(cfg: &RunConfig, csv: bool, out: &mut dyn Write) -> Result<()> {
    let counts = param_table(cfg)?;
    let text = if csv { render_param_csv(&counts) } else { render_param_table(&counts) };
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn cmd_export_tam(cfg: &RunConfig, checkpoint: &Path, sample: u64, out: &mut dyn Write) -> Result<()> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let spec = SynthSpec::new(&cfg.backbone, &cfg.tasks);
    let maps = export::task_attention_maps(&model, &store, cfg.mode, &eval_sample(cfg.seed, sample, &spec))?;
    for path in export::export_tam(&maps, &cfg.out_dir)? {
        writeln!(out, "{}", path.display())?;
    }
    Ok(())
}

/// Prints the per-group audit; fails with a numerical error naming every
/// group above tolerance.
pub fn cmd_grad_check(cfg: &RunConfig, corrupt: Option<ParamGroup>, csv: bool, out: &mut dyn Write) -> Result<()> {
    let report = grad_check::grad_check(cfg, corrupt)?;
    if csv {
        writeln!(out, "group,tensors,elements,max_rel_error,pass")?;
        for g in &report.groups {
            writeln!(out, "{},{},{},{:.3e},{}", g.group, g.tensors, g.elements, g.max_rel_error, g.passed())?;
        }
    } else {
        writeln!(out, "{:<12} {:>7} {:>8} {:>13}", "group", "tensors", "elements", "max rel err")?;
        for g in &report.groups {
            let status = if g.passed() { "ok" } else { "FAIL" };
            writeln!(out, "{:<12} {:>7} {:>8} {:>13.3e}  {status}", g.group.name(), g.tensors, g.elements, g.max_rel_error)?;
        }
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<_> = report.failing().iter().map(|g| g.name()).collect();
        Err(Error::Numerical(format!(
            "gradient audit above {:e} in group(s): {}",
            grad_check::TOLERANCE,
            names.join(", ")
        )))
    }
}
