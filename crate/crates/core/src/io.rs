//! Persistence: dataset CSV, checkpoint JSON and metrics CSV.
//!
//! Floats are written in Rust's shortest round-trip form, so every value
//! reloads bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::flow::{FlowLayout, FlowModel};
use crate::nets::{OutputActivation, ParamSet};
use crate::tensor::Tensor;
use crate::trainer::{MetricRow, TransformerHistory};
use crate::transformer::Transformer;
use crate::vae::VaeModel;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => io_err(path, io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        format_err(path, e.to_string())
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

/// Column names: `r{i}c{j}` for grid data, `x{i}` otherwise, then `label`.
pub fn dataset_header(ds: &Dataset) -> Vec<String> {
    let mut h: Vec<String> = match ds.grid() {
        Some((rows, cols)) => (0..rows)
            .flat_map(|i| (0..cols).map(move |j| format!("r{i}c{j}")))
            .collect(),
        None => (0..ds.dim()).map(|i| format!("x{i}")).collect(),
    };
    h.push("label".to_string());
    h
}

pub fn dataset_to_csv(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(dataset_header(ds)).map_err(fail)?;
    let mask = ds.labeled_mask();
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features().row(i).iter().map(|v| v.to_string()).collect();
        rec.push(match ds.labels() {
            Some(l) if mask[i] => l[i].to_string(),
            _ => String::new(),
        });
        w.write_record(&rec).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_bytes(path, &dataset_to_csv(ds)?)
}

fn parse_grid(header: &csv::StringRecord) -> Option<(usize, usize)> {
    let last = header.get(header.len().checked_sub(2)?)?;
    let (r, c) = last.strip_prefix('r')?.split_once('c')?;
    let (h, w) = (r.parse::<usize>().ok()? + 1, c.parse::<usize>().ok()? + 1);
    let expected = (0..h).flat_map(|i| (0..w).map(move |j| format!("r{i}c{j}")));
    let matches = header.iter().take(header.len() - 1).eq(expected.collect::<Vec<_>>().iter().map(String::as_str));
    matches.then_some((h, w))
}

/// Loads a dataset CSV. The class count is inferred from the labels when
/// `num_classes` is `None`.
pub fn load_dataset(path: &Path, num_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let bytes = read_bytes(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 2 || header.get(header.len() - 1) != Some("label") {
        return Err(format_err(path, "expected feature columns followed by a label column"));
    }
    let d = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = line + 2;
        for field in rec.iter().take(d) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("line {row}: bad number {field:?}")))?;
            data.push(v);
        }
        let label = rec.get(d).unwrap_or("").trim();
        labels.push(if label.is_empty() {
            None
        } else {
            Some(
                label
                    .parse::<usize>()
                    .map_err(|_| format_err(path, format!("line {row}: bad label {label:?}")))?,
            )
        });
    }
    if labels.is_empty() {
        return Err(format_err(path, "dataset has no rows"));
    }
    let n = labels.len();
    let k = num_classes.unwrap_or_else(|| labels.iter().flatten().max().map_or(2, |m| (m + 1).max(2)));
    let features = Tensor::new(vec![n, d], data)?;
    let ds = Dataset::partially_labeled(features, &labels, k, split).map_err(|e| format_err(path, e.to_string()))?;
    match parse_grid(&header) {
        Some((h, w)) => ds.with_grid(h, w),
        None => Ok(ds),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CheckpointHeader {
    Classifier {
        input_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
    },
    Vae {
        input_dim: usize,
        latent_dim: usize,
        hidden: Vec<usize>,
        output: OutputActivation,
    },
    Flow(FlowLayout),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    header: CheckpointHeader,
    params: BTreeMap<String, TensorRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn from_classifier(m: &ClassifierModel) -> Result<Self> {
        Ok(Checkpoint {
            header: CheckpointHeader::Classifier {
                input_dim: m.input_dim(),
                hidden: m.hidden(),
                num_classes: m.num_classes,
            },
            params: m.param_set()?,
        })
    }

    pub fn from_transformer(t: &Transformer) -> Result<Self> {
        Ok(match t {
            Transformer::Vae(v) => Checkpoint {
                header: CheckpointHeader::Vae {
                    input_dim: v.input_dim(),
                    latent_dim: v.latent_dim,
                    hidden: v.hidden(),
                    output: v.output(),
                },
                params: v.param_set()?,
            },
            Transformer::Flow(f) => Checkpoint {
                header: CheckpointHeader::Flow(f.layout()),
                params: f.param_set()?,
            },
        })
    }

    pub fn kind(&self) -> &'static str {
        match self.header {
            CheckpointHeader::Classifier { .. } => "classifier",
            CheckpointHeader::Vae { .. } => "vae",
            CheckpointHeader::Flow(_) => "flow",
        }
    }

    pub fn to_classifier(&self) -> Result<ClassifierModel> {
        match &self.header {
            CheckpointHeader::Classifier {
                input_dim,
                hidden,
                num_classes,
            } => {
                let m = ClassifierModel::from_param_set(&self.params)?;
                if m.input_dim() != *input_dim || m.hidden() != *hidden || m.num_classes != *num_classes {
                    return Err(Error::invalid("classifier header disagrees with its parameters"));
                }
                Ok(m)
            }
            _ => Err(Error::invalid(format!("expected a classifier checkpoint, got {}", self.kind()))),
        }
    }

    pub fn to_transformer(&self) -> Result<Transformer> {
        match &self.header {
            CheckpointHeader::Vae {
                input_dim,
                latent_dim,
                hidden,
                output,
            } => {
                let v = VaeModel::from_param_set(&self.params, *output)?;
                if v.input_dim() != *input_dim || v.latent_dim != *latent_dim || v.hidden() != *hidden {
                    return Err(Error::invalid("vae header disagrees with its parameters"));
                }
                Ok(Transformer::Vae(v))
            }
            CheckpointHeader::Flow(layout) => Ok(Transformer::Flow(FlowModel::from_layout(layout, &self.params)?)),
            CheckpointHeader::Classifier { .. } => {
                Err(Error::invalid("expected a transformer checkpoint, got classifier"))
            }
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let file = CheckpointFile {
            header: self.header.clone(),
            params: self
                .params
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        TensorRecord {
                            shape: t.shape().to_vec(),
                            values: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        if let Some((name, _)) = self.params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("checkpoint parameter {name}"),
            });
        }
        serde_json::to_vec(&file).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_json(bytes: &[u8], path: &Path) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_slice(bytes).map_err(|e| format_err(path, e.to_string()))?;
        let mut params = ParamSet::new();
        for (name, rec) in file.params {
            let t = Tensor::new(rec.shape, rec.values).map_err(|e| format_err(path, e.to_string()))?;
            params.insert(name, t)?;
        }
        Ok(Checkpoint {
            header: file.header,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path, &ckpt.to_json()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&read_bytes(path)?, path)
}

fn rows_to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::invalid(e.to_string());
    if rows.is_empty() {
        w.write_record(header).map_err(fail)?;
    }
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

pub const METRICS_HEADER: [&str; 6] = ["step", "lr", "loss_sl", "loss_usl", "loss_total", "test_error"];

/// Columns `step, lr, loss_sl, loss_usl, loss_total, test_error`; the last is
/// empty on steps without evaluation.
pub fn metrics_to_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    rows_to_csv(rows, &METRICS_HEADER)
}

pub fn save_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_bytes(path, &metrics_to_csv(rows)?)
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let bytes = read_bytes(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Columns `epoch, train_loss, held_out_loss`, preceded by an epoch-0 row
/// holding the held-out loss at initialization.
pub fn history_to_csv(h: &TransformerHistory) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(["epoch", "train_loss", "held_out_loss"]).map_err(fail)?;
    w.write_record(["0".to_string(), String::new(), h.initial_held_out_loss.to_string()])
        .map_err(fail)?;
    for e in &h.epochs {
        w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.held_out_loss.to_string()])
            .map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_grid_patterns, gen_two_moons, subsample_labels};

    #[test]
    fn dataset_csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("moons.csv");
        let ds = gen_two_moons(50, 0.1, 3).unwrap();
        save_dataset(&p, &ds).unwrap();
        let back = load_dataset(&p, Some(2), Split::Train).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn partial_labels_and_grids_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grid.csv");
        let ds = subsample_labels(&gen_grid_patterns(40, 6, 4, 0.05, 1).unwrap(), 8, 2).unwrap();
        save_dataset(&p, &ds).unwrap();
        let back = load_dataset(&p, Some(4), Split::Train).unwrap();
        assert_eq!(back.grid(), Some((6, 6)));
        assert_eq!(back.labeled_mask(), ds.labeled_mask());
        assert_eq!(back.features(), ds.features());
        let idx = ds.labeled_indices();
        assert_eq!(back.class_counts(&idx), ds.class_counts(&idx));
    }

    #[test]
    fn unlabeled_csv_has_empty_label_column() {
        let ds = gen_two_moons(4, 0.0, 0).unwrap().without_labels();
        let text = String::from_utf8(dataset_to_csv(&ds).unwrap()).unwrap();
        assert!(text.lines().next().unwrap().ends_with(",label"));
        assert!(text.lines().skip(1).all(|l| l.ends_with(',')));
    }

    #[test]
    fn load_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.csv");
        let e = load_dataset(&missing, None, Split::Test).unwrap_err();
        assert!(e.to_string().contains("nope.csv"));
        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "x0,label\nabc,1\n").unwrap();
        assert!(matches!(load_dataset(&bad, None, Split::Test), Err(Error::Format { .. })));
        fs::write(&bad, "x0,label\n").unwrap();
        assert!(load_dataset(&bad, None, Split::Test).is_err());
        fs::write(&bad, "x0,label\n1.0,5\n").unwrap();
        assert!(load_dataset(&bad, Some(2), Split::Test).is_err());
    }

    #[test]
    fn checkpoints_round_trip_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let models = [
            Checkpoint::from_classifier(&ClassifierModel::new(3, &[5, 4], 3, 1).unwrap()).unwrap(),
            Checkpoint::from_transformer(&Transformer::Vae(
                VaeModel::new(4, 2, &[6], OutputActivation::Sigmoid, 2).unwrap(),
            ))
            .unwrap(),
            Checkpoint::from_transformer(&Transformer::Flow(FlowModel::new(4, 4, &[6], 2.0, 3).unwrap()))
                .unwrap(),
        ];
        for c in &models {
            let p = dir.path().join(format!("{}.json", c.kind()));
            save_checkpoint(&p, c).unwrap();
            let back = load_checkpoint(&p).unwrap();
            assert_eq!(&back, c);
            assert_eq!(back.to_json().unwrap(), read_bytes(&p).unwrap());
        }
        assert_eq!(models[0].to_classifier().unwrap().param_set().unwrap(), models[0].params);
        assert!(models[0].to_transformer().is_err());
        assert!(models[1].to_classifier().is_err());
        let Transformer::Flow(f) = models[2].to_transformer().unwrap() else { panic!() };
        assert_eq!(f.layout(), FlowModel::new(4, 4, &[6], 2.0, 3).unwrap().layout());
    }

    #[test]
    fn unknown_checkpoint_fields_are_rejected() {
        let c = Checkpoint::from_classifier(&ClassifierModel::new(2, &[3], 2, 1).unwrap()).unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(&c.to_json().unwrap()).unwrap();
        v["extra"] = serde_json::json!(1);
        let bytes = serde_json::to_vec(&v).unwrap();
        assert!(Checkpoint::from_json(&bytes, Path::new("x.json")).is_err());
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![
            MetricRow {
                step: 1,
                lr: 1e-3,
                loss_sl: 0.612_345_678_901_234_5,
                loss_usl: 0.1,
                loss_total: 0.712_345_678_901_234_5,
                test_error: None,
            },
            MetricRow {
                step: 2,
                lr: 5e-4,
                loss_sl: 0.5,
                loss_usl: 0.0,
                loss_total: 0.5,
                test_error: Some(0.25),
            },
        ];
        save_metrics(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
        assert!(text.lines().nth(1).unwrap().ends_with(','));
        assert_eq!(load_metrics(&p).unwrap(), rows);
        let empty = String::from_utf8(metrics_to_csv(&[]).unwrap()).unwrap();
        assert_eq!(empty.trim(), METRICS_HEADER.join(","));
    }
}
