//! The subcommands. Each is a pure function of its configuration and input
//! files and writes its artifacts under the output directory.

use std::path::{Path, PathBuf};

use log::info;
use lvat_core::classifier::{self, ClassifierModel};
use lvat_core::data::Split;
use lvat_core::gradcheck::{self, CheckReport};
use lvat_core::io::{self, Checkpoint, CheckpointHeader};
use lvat_core::nets;
use lvat_core::regularizer::{self, RegularizerKind};
use lvat_core::rng;
use lvat_core::trainer;
use lvat_core::transformer::Transformer;
use lvat_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Samples processed per call of the perturbation routine in `gen-adv`.
const ADV_CHUNK: usize = 250;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    bytes.push(b'\n');
    Ok(io::write_bytes(path, &bytes)?)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Failed(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Failed(e.to_string()))?;
    Ok(io::write_bytes(path, &bytes)?)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for a single value.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn gradcheck(corrupt: Option<&str>) -> Result<Vec<CheckReport>> {
    Ok(gradcheck::run(corrupt)?)
}

/// Prints the per-case table and fails naming the worst offender.
pub fn report_gradcheck(reports: &[CheckReport]) -> Result<()> {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:>8}  {:>12}  status", "case", "elements", "max_rel_err");
    for r in reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!("{:<width$}  {:>8}  {:>12.3e}  {status}", r.name, r.elements, r.max_rel_err);
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} cases checked, {failed} failed, tolerance {:e}", reports.len(), gradcheck::TOLERANCE);
    match reports.iter().filter(|r| !r.passed).max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)) {
        Some(worst) => Err(CliError::Failed(format!(
            "gradient check failed; worst offender {} with relative error {:e}",
            worst.name, worst.max_rel_err
        ))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerSummary {
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub initial_held_out_loss: f64,
    pub final_held_out_loss: f64,
    /// Mean and maximum of `‖x − Dec(Enc(x))‖₂` over the test split.
    pub mean_reconstruction_distance: f64,
    pub max_reconstruction_distance: f64,
}

fn reconstruction_distances(t: &Transformer, x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.sub(&t.decode(&t.encode(x)?)?)?.row_norms())
}

pub fn train_transformer(cfg: &RunConfig, seed: Option<u64>) -> Result<TransformerSummary> {
    let data = cfg.data.prepare()?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let mut t = cfg.transformer.build(data.train.dim(), rng::derive(seed, "transformer-init"))?;
    let held_out = data.test.without_labels();
    let history = trainer::train_transformer(
        &mut t,
        &data.train,
        &held_out,
        &cfg.transformer.training,
        rng::derive(seed, "transformer-train"),
    )?;
    io::save_checkpoint(&cfg.transformer_checkpoint(), &Checkpoint::from_transformer(&t)?)?;
    io::write_bytes(&cfg.output_dir.join("transformer_history.csv"), &io::history_to_csv(&history)?)?;
    let rec = reconstruction_distances(&t, held_out.features())?;
    let summary = TransformerSummary {
        kind: t.kind().to_string(),
        seed,
        config_hash: cfg.hash()?,
        initial_held_out_loss: history.initial_held_out_loss,
        final_held_out_loss: history.epochs.last().map_or(history.initial_held_out_loss, |e| e.held_out_loss),
        mean_reconstruction_distance: mean(&rec),
        max_reconstruction_distance: rec.iter().copied().fold(0.0, f64::max),
    };
    write_json(&cfg.output_dir.join("transformer_summary.json"), &summary)?;
    Ok(summary)
}

fn load_transformer(path: &Path, kind: RegularizerKind) -> Result<Transformer> {
    let want = kind.transformer_kind().unwrap_or("none");
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "regularizer {} requires a {want} transformer checkpoint; {} does not exist",
            serde_json::to_string(&kind).unwrap_or_default().trim_matches('"'),
            path.display()
        )));
    }
    let t = io::load_checkpoint(path)?.to_transformer()?;
    if t.kind() != want {
        return Err(CliError::Usage(format!(
            "{}: expected a {want} checkpoint, found {}",
            path.display(),
            t.kind()
        )));
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_test_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    /// `baseline` when no unlabeled cost enters training, else `regularized`.
    pub mode: String,
    pub regularizer: RegularizerKind,
    pub epsilon: f64,
    pub alpha: f64,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedResult>,
    /// Mean over seeds.
    pub final_test_error: f64,
    pub std_test_error: f64,
}

pub fn classifier_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("classifier_seed{seed}.json"))
}

pub fn metrics_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("metrics_seed{seed}.csv"))
}

pub fn train_classifier(cfg: &RunConfig, seed: Option<u64>, transformer: Option<&Path>) -> Result<ClassifierSummary> {
    let data = cfg.data.prepare()?;
    let tc = cfg.train_config()?;
    let kind = cfg.regularizer.kind;
    let t = match kind.transformer_kind() {
        Some(_) => {
            let path = transformer.map_or_else(|| cfg.transformer_checkpoint(), Path::to_path_buf);
            Some(load_transformer(&path, kind)?)
        }
        None if transformer.is_some() => {
            return Err(CliError::Usage("--checkpoint names a transformer, which only lvat regularizers use".into()))
        }
        None => None,
    };
    let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let out = &cfg.output_dir;
    io::save_dataset(&out.join("test.csv"), &data.test)?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        let train = match cfg.data.n_labeled {
            Some(n) => lvat_core::data::subsample_labels(&data.train, n, rng::derive(s, "labels"))?,
            None => data.train.clone(),
        };
        let mut model = ClassifierModel::new(
            data.train.dim(),
            &cfg.classifier.hidden,
            data.train.num_classes(),
            rng::derive(s, "init"),
        )?;
        let rows = trainer::train_classifier(&mut model, &train, Some(&data.test), t.as_ref(), &tc, rng::derive(s, "train"))?;
        io::save_metrics(&metrics_path(out, s), &rows)?;
        io::save_checkpoint(&classifier_path(out, s), &Checkpoint::from_classifier(&model)?)?;
        let err = classifier::error_rate(&model, &data.test)?;
        info!("seed {s}: test error {err}");
        runs.push(SeedResult { seed: s, final_test_error: err });
    }
    let errors: Vec<f64> = runs.iter().map(|r| r.final_test_error).collect();
    let summary = ClassifierSummary {
        mode: if cfg.is_baseline() { "baseline" } else { "regularized" }.to_string(),
        regularizer: kind,
        epsilon: cfg.regularizer.epsilon,
        alpha: cfg.trainer.alpha,
        config_hash: cfg.hash()?,
        seeds,
        runs,
        final_test_error: mean(&errors),
        std_test_error: std_dev(&errors),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub const ADV_HEADER: [&str; 5] = [
    "sample_id",
    "input_space_distance",
    "latent_space_distance",
    "reconstruction_distance",
    "kl_cost",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AdvRow {
    pub sample_id: usize,
    pub input_space_distance: f64,
    pub latent_space_distance: Option<f64>,
    pub reconstruction_distance: Option<f64>,
    pub kl_cost: f64,
}

/// Equal-width bins over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &v in values {
        let k = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
        counts[k] += 1;
    }
    counts.into_iter().enumerate().map(|(k, c)| (lo + k as f64 * width, c)).collect()
}

/// Adversarial examples for `n` training inputs drawn with replacement.
pub fn gen_adv(
    cfg: &RunConfig,
    seed: Option<u64>,
    checkpoint: Option<&Path>,
    n: usize,
    bins: Option<usize>,
) -> Result<Vec<AdvRow>> {
    let kind = cfg.regularizer.kind;
    if !matches!(kind, RegularizerKind::Vat | RegularizerKind::LvatVae | RegularizerKind::LvatFlow) {
        return Err(CliError::Usage("gen-adv needs regularizer.kind vat, lvat-vae or lvat-flow".into()));
    }
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let path = checkpoint.map_or_else(|| classifier_path(&cfg.output_dir, seed), Path::to_path_buf);
    if !path.exists() {
        return Err(CliError::Usage(format!("classifier checkpoint {} does not exist", path.display())));
    }
    let model = io::load_checkpoint(&path)?.to_classifier()?;
    let t = match kind.transformer_kind() {
        Some(_) => Some(load_transformer(&cfg.transformer_checkpoint(), kind)?),
        None => None,
    };
    let pcfg = cfg.train_config()?.perturb()?;
    let data = cfg.data.prepare()?;
    let pool = data.train.len();
    let mut r = rng::rng(rng::derive(seed, "gen-adv-samples"));
    let picks: Vec<usize> = (0..n).map(|_| r.random_range(0..pool)).collect();
    let perturb_seed = rng::derive(seed, "gen-adv");
    let mut rows = Vec::with_capacity(n);
    for (c, chunk) in picks.chunks(ADV_CHUNK).enumerate() {
        let x = data.train.features().select_rows(chunk);
        let s = rng::derive_index(perturb_seed, c as u64);
        let p = match &t {
            Some(t) => regularizer::lvat_perturbation(&model, t, &x, &pcfg, s)?,
            None => regularizer::vat_perturbation(&model, &x, &pcfg, s)?,
        };
        let dist = p.distances(&x)?;
        let kl = nets::kl_rows(&p.target, &model.predict_logits(&p.x_adv)?)?;
        let (latent, recon) = match &t {
            Some(t) => (p.r.row_norms().into_iter().map(Some).collect(), reconstruction_distances(t, &x)?.into_iter().map(Some).collect()),
            None => (vec![None; x.rows()], vec![None; x.rows()]),
        };
        for i in 0..x.rows() {
            rows.push(AdvRow {
                sample_id: rows.len(),
                input_space_distance: dist[i],
                latent_space_distance: latent[i],
                reconstruction_distance: recon[i],
                kl_cost: kl[i],
            });
        }
    }
    let out = &cfg.output_dir;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.sample_id.to_string(),
                r.input_space_distance.to_string(),
                opt(r.latent_space_distance),
                opt(r.reconstruction_distance),
                r.kl_cost.to_string(),
            ]
        })
        .collect();
    write_csv(&out.join("gen_adv.csv"), &ADV_HEADER, &table)?;
    if let Some(b) = bins {
        if b == 0 {
            return Err(CliError::Usage("--bins must be at least 1".into()));
        }
        let d: Vec<f64> = rows.iter().map(|r| r.input_space_distance).collect();
        let hist: Vec<Vec<String>> = histogram(&d, b)
            .into_iter()
            .map(|(left, count)| vec![left.to_string(), count.to_string()])
            .collect();
        write_csv(&out.join("gen_adv_bins.csv"), &["bin_left", "count"], &hist)?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub errors: usize,
    pub error_rate: f64,
}

pub fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let ckpt = io::load_checkpoint(checkpoint)?;
    let CheckpointHeader::Classifier { num_classes, .. } = ckpt.header else {
        return Err(CliError::Usage(format!(
            "{}: expected a classifier checkpoint, found {}",
            checkpoint.display(),
            ckpt.kind()
        )));
    };
    let model = ckpt.to_classifier()?;
    let ds = io::load_dataset(data, Some(num_classes), Split::Test)?;
    let (errors, n, error_rate) = classifier::error_count(&model, &ds)?;
    let report = EvalReport { n, errors, error_rate };
    let dir = out.map_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf(), Path::to_path_buf);
    write_json(&dir.join("eval.json"), &report)?;
    Ok(report)
}
