use std::fs;
use std::path::{Path, PathBuf};

use capsroute::analysis::io::{tile, write_csv, write_pgm};
use capsroute::analysis::{
    count_ops, default_deltas, misclassification_report, pca_equivariance, perturb_reconstruct, random_baseline,
    CapsuleView, EquivarianceResult, TransformFamily,
};
use capsroute::data::{epoch_stream, Dataset, Split};
use capsroute::gradcheck::{run_suite, GradCheckConfig};
use capsroute::model::ModelSpec;
use capsroute::train::fit::CONFIG_FILE as TRAIN_CONFIG_FILE;
use capsroute::train::{ensemble_predict, fit, score, Checkpoint, Scored, TrainConfig};
use serde::Serialize;

use crate::config::{read_entries, Entries, RunConfig};
use crate::CliError;

fn file_layer(path: Option<&Path>) -> Result<Entries, CliError> {
    path.map_or_else(|| Ok(Entries::new()), read_entries)
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset, CliError> {
    let dir = cfg.data_dir()?;
    Dataset::load(&dir, split).map_err(|e| CliError::Env(format!("cannot load dataset: {e}")))
}

fn load_test(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let test = load_split(cfg, Split::Test)?;
    Ok(cfg.train.test_limit.map_or(test.clone(), |n| test.head(n)))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Env(format!("cannot load checkpoint: {e}")))
}

/// Preset and test-set settings recorded by the run that wrote `checkpoint`.
fn checkpoint_layer(checkpoint: &Checkpoint, path: &Path) -> Entries {
    let mut e = Entries::new();
    e.insert("preset".into(), checkpoint.spec.name.clone());
    let sibling = path.parent().unwrap_or(Path::new(".")).join(TRAIN_CONFIG_FILE);
    let recorded = fs::read_to_string(sibling)
        .ok()
        .and_then(|text| serde_json::from_str::<(ModelSpec, TrainConfig)>(&text).ok());
    if let Some((_, t)) = recorded {
        if let Some(n) = t.test_limit {
            e.insert("test_limit".into(), n.to_string());
        }
        e.insert("test_per_digit".into(), t.test_per_digit.to_string());
        e.insert("test_seed".into(), t.test_seed.to_string());
    }
    e
}

fn lookup(key: &str, layers: &[&Entries]) -> Option<String> {
    layers.iter().rev().find_map(|l| l.get(key).cloned())
}

fn write_manifest(dir: &Path, command: &str, files: &[PathBuf]) -> Result<(), CliError> {
    let names: Vec<String> = files
        .iter()
        .map(|f| f.strip_prefix(dir).unwrap_or(f).display().to_string())
        .collect();
    let body = serde_json::json!({ "command": command, "files": names });
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&body).map_err(|e| CliError::Env(e.to_string()))?;
    fs::write(&path, text).map_err(|e| CliError::Env(format!("{}: {e}", path.display())))
}

pub fn train(config: Option<&Path>, flags: Entries) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(&[file_layer(config)?, flags])?;
    let spec = ModelSpec::by_name(&cfg.preset).map_err(|e| CliError::Usage(e.to_string()))?;
    let train_set = load_split(&cfg, Split::Train)?;
    let test_set = load_split(&cfg, Split::Test)?;
    let dir = cfg.run_dir("train");
    cfg.train.checkpoint_dir = dir.clone();
    let cfg_path = cfg.persist(&dir)?;
    println!("run directory {}", dir.display());
    let report = fit(&spec, &cfg.train, &train_set, &test_set)?;
    let last = report.log.last().map_or(f64::NAN, |r| r.test_error);
    println!(
        "best test error {:.4}% at epoch {}, final {:.4}%",
        100.0 * report.best_error,
        report.best_epoch,
        100.0 * last
    );
    write_manifest(
        &dir,
        "train",
        &[
            cfg_path,
            dir.join(TRAIN_CONFIG_FILE),
            report.log_path,
            report.best_path,
            report.final_path,
        ],
    )
}

pub fn eval(config: Option<&Path>, flags: Entries) -> Result<(), CliError> {
    let file = file_layer(config)?;
    let paths: Vec<PathBuf> = match (lookup("ensemble", &[&file, &flags]), lookup("checkpoint", &[&file, &flags])) {
        (Some(list), _) => list.split(',').filter(|s| !s.trim().is_empty()).map(|s| PathBuf::from(s.trim())).collect(),
        (None, Some(one)) => vec![PathBuf::from(one)],
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --ensemble".into())),
    };
    if paths.is_empty() {
        return Err(CliError::Usage("empty --ensemble list".into()));
    }
    let members: Vec<Checkpoint> = paths.iter().map(|p| load_checkpoint(p)).collect::<Result<_, _>>()?;
    if let Some(other) = members.iter().find(|m| m.spec != members[0].spec) {
        return Err(CliError::Usage(format!(
            "ensemble mixes models '{}' and '{}'",
            members[0].spec.name, other.spec.name
        )));
    }
    let cfg = RunConfig::resolve(&[checkpoint_layer(&members[0], &paths[0]), file, flags])?;
    let k = cfg.extra::<usize>("k")?.unwrap_or(cfg.task().k());
    let test = load_test(&cfg)?;
    let mode = cfg.train.test_mode();
    let scored: Vec<Scored> = members
        .iter()
        .map(|m| score(&m.spec, &m.params, &test, &mode, cfg.train.test_seed, 100, cfg.train.strict))
        .collect::<Result<_, _>>()?;

    if paths.len() == 1 && lookup("ensemble", &[&cfg.extra]).is_none() {
        let r = scored[0].report(k);
        println!("test error {:.4}% ({} of {}, top-{k})", 100.0 * r.error, r.wrong, r.total);
        return Ok(());
    }
    let threshold = cfg.extra::<f64>("threshold")?.unwrap_or(0.0);
    for (p, s) in paths.iter().zip(&scored) {
        println!("member {} test error {:.4}%", p.display(), 100.0 * s.report(k).error);
    }
    let r = ensemble_predict(&scored, threshold, k)?;
    println!(
        "ensemble of {} admitted (accuracy > {threshold}): test error {:.4}% ({} of {}, top-{k})",
        r.admitted.len(),
        100.0 * r.error,
        r.wrong,
        r.total
    );
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    family: &'static str,
    sweep: usize,
    components: usize,
    cumulative_variance: f64,
}

fn curve_rows(res: &EquivarianceResult, sweep: usize) -> Vec<CurveRow> {
    res.cumulative_variance
        .iter()
        .enumerate()
        .map(|(i, &c)| CurveRow {
            family: res.family.name(),
            sweep,
            components: i + 1,
            cumulative_variance: c,
        })
        .collect()
}

fn print_pca(res: &EquivarianceResult, sweep: usize) {
    let two = res.cumulative_variance.get(1).copied().unwrap_or(1.0);
    println!(
        "{} (K = {sweep}): r = {:.2}%, two components explain {:.2}%, {} samples, {} degenerate",
        res.family.name(),
        100.0 * res.r,
        100.0 * two,
        res.samples,
        res.degenerate
    );
}

#[derive(Serialize)]
struct ErrorRow {
    index: usize,
    labels: String,
    predicted: String,
    margin: f32,
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

pub fn analyze(action: &str, config: Option<&Path>, flags: Entries) -> Result<(), CliError> {
    let file = file_layer(config)?;
    let checkpoint = match lookup("checkpoint", &[&file, &flags]) {
        Some(p) => {
            let path = PathBuf::from(p);
            let c = load_checkpoint(&path)?;
            Some((checkpoint_layer(&c, &path), c))
        }
        None => None,
    };
    let base = checkpoint.as_ref().map(|(l, _)| l.clone()).unwrap_or_default();
    let cfg = RunConfig::resolve(&[base, file, flags])?;
    let spec = match &checkpoint {
        Some((_, c)) => c.spec.clone(),
        None => ModelSpec::by_name(&cfg.preset).map_err(|e| CliError::Usage(e.to_string()))?,
    };
    let need_model = || {
        checkpoint
            .as_ref()
            .map(|(_, c)| c)
            .ok_or_else(|| CliError::Usage(format!("analyze {action} needs --checkpoint")))
    };
    let command = format!("analyze-{action}");
    let mut files = Vec::new();

    match action {
        "ops" => {
            let r = count_ops(&spec)?;
            println!("{:<16} {:>14} {:>14}", "layer", "MACs", "OPs");
            for row in &r.rows {
                println!("{:<16} {:>14} {:>14}", row.layer, row.macs, row.ops());
            }
            println!("parameters {} (decoder {} more)", group(r.params), group(r.decoder_params));
            println!("total {:.4} G-OPs ({} MACs), decoder {} OPs more", r.giga_ops(), r.total_macs, r.decoder_ops);
            let dir = cfg.run_dir(&command);
            files.push(cfg.persist(&dir)?);
            let csv = dir.join("ops.csv");
            write_csv(&csv, &r.rows.iter().map(|x| (&x.layer, x.macs, x.elementwise, x.ops())).collect::<Vec<_>>())?;
            files.push(csv);
            write_manifest(&dir, &command, &files)?;
        }
        "perturb" => {
            let model = need_model()?;
            let test = load_test(&cfg)?;
            let stream = epoch_stream(&test, cfg.train.test_mode(), spec.num_classes(), cfg.train.test_seed, 0, 1, false)?;
            let index = cfg.extra::<usize>("index")?.unwrap_or(0);
            if index >= stream.len() {
                return Err(CliError::Usage(format!("index {index} out of range for {} test samples", stream.len())));
            }
            let image = stream.sample(index).image;
            let dims: Vec<usize> = match cfg.extra::<usize>("dim")? {
                Some(d) => vec![d],
                None => (0..spec.caps_dense.last().map_or(spec.primary.dim, |c| c.dim)).collect(),
            };
            let deltas = default_deltas();
            let mut decoded = Vec::new();
            let mut class = 0;
            for &d in &dims {
                let p = perturb_reconstruct(&spec, &model.params, &image, d, &deltas)?;
                class = p.class;
                decoded.push(p.images);
            }
            let [h, w, _] = spec.input_shape;
            let tiles: Vec<&[f32]> = decoded.iter().flat_map(|t| t.data().chunks(h * w)).collect();
            let (canvas, ch, cw) = tile(&tiles, h, w, deltas.len())?;
            let dir = cfg.run_dir(&command);
            files.push(cfg.persist(&dir)?);
            let pgm = dir.join("perturb.pgm");
            write_pgm(&pgm, &canvas, ch, cw)?;
            files.push(pgm.clone());
            write_manifest(&dir, &command, &files)?;
            println!(
                "sample {index}, capsule {class}: {} dimensions x {} steps written to {}",
                dims.len(),
                deltas.len(),
                pgm.display()
            );
        }
        "pca" => {
            let name = cfg.extra.get("family").cloned().unwrap_or_default();
            let family = TransformFamily::parse(&name).map_err(|e| CliError::Usage(e.to_string()))?;
            let mut rows = Vec::new();
            if family == TransformFamily::Random {
                let dim = spec.caps_dense.last().map_or(spec.primary.dim, |c| c.dim);
                let reps = cfg.extra::<usize>("repetitions")?.unwrap_or(1000);
                for sweep in [TransformFamily::TranslateX.steps().len(), TransformFamily::Rotate.steps().len()] {
                    let res = random_baseline(dim, sweep, reps, cfg.train.seed)?;
                    print_pca(&res, sweep);
                    rows.extend(curve_rows(&res, sweep));
                }
            } else {
                let model = need_model()?;
                let view = match cfg.extra.get("view").map(String::as_str) {
                    None | Some("correct_class") => CapsuleView::CorrectClass,
                    Some("concatenated") => CapsuleView::Concatenated,
                    Some(v) => return Err(CliError::Usage(format!("unknown view '{v}' (correct_class, concatenated)"))),
                };
                let images = cfg.extra::<usize>("images")?.unwrap_or(1000);
                let test = load_test(&cfg)?;
                let res = pca_equivariance(&spec, &model.params, &test, family, view, images, cfg.train.strict)?;
                let sweep = family.steps().len();
                print_pca(&res, sweep);
                rows.extend(curve_rows(&res, sweep));
            }
            let dir = cfg.run_dir(&command);
            files.push(cfg.persist(&dir)?);
            let csv = dir.join(format!("pca_{}.csv", family.name()));
            write_csv(&csv, &rows)?;
            files.push(csv);
            write_manifest(&dir, &command, &files)?;
        }
        "errors" => {
            let model = need_model()?;
            let k = cfg.extra::<usize>("k")?.unwrap_or(cfg.task().k());
            let test = load_test(&cfg)?;
            let mode = cfg.train.test_mode();
            let scored = score(&spec, &model.params, &test, &mode, cfg.train.test_seed, 100, cfg.train.strict)?;
            let wrong = misclassification_report(&scored, k);
            println!("{} of {} misclassified (top-{k})", wrong.len(), scored.len());
            for m in wrong.iter().take(10) {
                println!(
                    "  #{:<6} labels {:<6} predicted {:<6} margin {:.4}",
                    m.index,
                    join(&m.labels),
                    join(&m.predicted),
                    m.margin
                );
            }
            let dir = cfg.run_dir(&command);
            files.push(cfg.persist(&dir)?);
            let csv = dir.join("errors.csv");
            let rows: Vec<ErrorRow> = wrong
                .iter()
                .map(|m| ErrorRow {
                    index: m.index,
                    labels: join(&m.labels),
                    predicted: join(&m.predicted),
                    margin: m.margin,
                })
                .collect();
            write_csv(&csv, &rows)?;
            files.push(csv);
            let count = cfg.extra::<usize>("count")?.unwrap_or(64).min(wrong.len());
            if count > 0 {
                let stream = epoch_stream(&test, mode, spec.num_classes(), cfg.train.test_seed, 0, 1, false)?;
                let images: Vec<Vec<f32>> = wrong[..count].iter().map(|m| stream.sample(m.index).image).collect();
                let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
                let [h, w, _] = spec.input_shape;
                let (canvas, ch, cw) = tile(&refs, h, w, 8)?;
                let pgm = dir.join("errors.pgm");
                write_pgm(&pgm, &canvas, ch, cw)?;
                files.push(pgm);
            }
            write_manifest(&dir, &command, &files)?;
        }
        other => return Err(CliError::Usage(format!("unknown analysis '{other}'"))),
    }
    Ok(())
}

/// `161824` as `161,824`.
fn group(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn gradcheck(seed: u64, fault: Option<&str>) -> Result<(), CliError> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let reports = run_suite(&cfg, fault)?;
    for r in &reports {
        println!(
            "{:<28} max_rel_error {:.3e} over {:>4} probes  {}",
            r.op_name,
            r.max_rel_error,
            r.probe_count,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.3e})", r.op_name, r.max_rel_error))
        .collect();
    if failed.is_empty() {
        println!("all {} ops within {:e}", reports.len(), cfg.tolerance);
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "{} of {} ops exceed {:e}: {}",
            failed.len(),
            reports.len(),
            cfg.tolerance,
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_grouping() {
        assert_eq!(group(161_824), "161,824");
        assert_eq!(group(999), "999");
        assert_eq!(group(1_000_000), "1,000,000");
    }
}
