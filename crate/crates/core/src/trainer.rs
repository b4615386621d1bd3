//! Transformer pre-training and classifier training under the supervised
//! loss plus an α-weighted consistency cost.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierModel};
use crate::data::{self, AugmentConfig, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::nets::{self, Parameterized};
use crate::optim::{self, AdamState};
use crate::regularizer::{self, PerturbConfig, PiConfig, RegularizerKind};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::transformer::Transformer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the consistency cost.
    pub alpha: f64,
    pub lr0: f64,
    pub total_updates: usize,
    /// Length of the final segment with linear decay and β₁ = 0.5.
    pub decay_updates: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub regularizer: RegularizerKind,
    pub epsilon: f64,
    pub xi: f64,
    pub power_iters: usize,
    pub pi: PiConfig,
    pub augment: AugmentConfig,
    /// Test error is recorded every this many updates and after the last one.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            lr0: optim::DEFAULT_LR,
            total_updates: 5000,
            decay_updates: 1600,
            batch_labeled: 32,
            batch_unlabeled: 128,
            regularizer: RegularizerKind::Vat,
            epsilon: 1.0,
            xi: regularizer::DEFAULT_XI,
            power_iters: regularizer::DEFAULT_POWER_ITERS,
            pi: PiConfig::default(),
            augment: AugmentConfig::default(),
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::invalid("batch sizes must be >= 1"));
        }
        if self.decay_updates > self.total_updates {
            return Err(Error::invalid("decay_updates exceeds total_updates"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::invalid("lr0 must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        if matches!(
            self.regularizer,
            RegularizerKind::Vat | RegularizerKind::LvatVae | RegularizerKind::LvatFlow
        ) {
            self.perturb()?;
        }
        Ok(())
    }

    pub fn perturb(&self) -> Result<PerturbConfig> {
        let cfg = PerturbConfig {
            epsilon: self.epsilon,
            xi: self.xi,
            power_iters: self.power_iters,
            space: self.regularizer.space(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the classifier metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss_sl: f64,
    pub loss_usl: f64,
    pub loss_total: f64,
    pub test_error: Option<f64>,
}

fn diverged(step: usize, loss: f64) -> Error {
    Error::Divergence { step, loss }
}

/// Trains `model` in place and returns the per-update metrics history.
///
/// Each update draws a labeled batch for cross-entropy and an independent
/// batch from all training inputs, labels ignored, for the consistency
/// cost. The transformer is only read.
pub fn train_classifier(
    model: &mut ClassifierModel,
    train: &Dataset,
    test: Option<&Dataset>,
    transformer: Option<&Transformer>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    match (cfg.regularizer.transformer_kind(), transformer) {
        (Some(kind), None) => return Err(Error::MissingTransformer(kind.to_string())),
        (Some(kind), Some(t)) if t.kind() != kind => {
            return Err(Error::MissingTransformer(format!(
                "{kind} (got a {} checkpoint)",
                t.kind()
            )))
        }
        (None, Some(_)) => {
            return Err(Error::invalid(format!(
                "regularizer {:?} does not use a transformer",
                cfg.regularizer
            )))
        }
        _ => {}
    }
    if model.input_dim() != train.dim() || model.num_classes != train.num_classes() {
        return Err(Error::invalid(format!(
            "classifier is {}→{}, dataset is {}-dimensional with {} classes",
            model.input_dim(),
            model.num_classes,
            train.dim(),
            train.num_classes()
        )));
    }
    let labels = train.labels().ok_or(Error::Unlabeled)?;
    if train.labeled_indices().is_empty() {
        return Err(Error::invalid("no labeled training examples"));
    }
    let mut labeled = BatchStream::new(train, cfg.batch_labeled, rng::derive(seed, "labeled"), true)?;
    let mut unlabeled =
        BatchStream::new(train, cfg.batch_unlabeled, rng::derive(seed, "unlabeled"), false)?;
    let aug_seed = rng::derive(seed, "augment");
    let adv_seed = rng::derive(seed, "perturb");
    let use_usl = cfg.alpha > 0.0 && cfg.regularizer != RegularizerKind::None;
    let mut adam = AdamState::new(&model.params(), cfg.lr0);
    let mut history = Vec::with_capacity(cfg.total_updates);

    for step in 0..cfg.total_updates {
        let (lr, beta1) = optim::lr_schedule(step, cfg.total_updates, cfg.decay_updates, cfg.lr0)?;
        adam.lr = lr;
        adam.beta1 = beta1;
        let step_seed = rng::derive_index(aug_seed, step as u64);

        let idx = labeled.next_batch();
        let xl = data::augment(
            &train.features().select_rows(&idx),
            train.grid(),
            &cfg.augment,
            rng::derive(step_seed, "labeled"),
        )?;
        let yl: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();

        let tape = Tape::new();
        let net = model.bind(&tape, true);
        let loss_sl = nets::cross_entropy(net.forward(tape.constant(xl))?, &yl)?;
        let loss_usl: Option<Var> = if use_usl {
            let xu = data::augment(
                &train.features().select_rows(&unlabeled.next_batch()),
                train.grid(),
                &cfg.augment,
                rng::derive(step_seed, "unlabeled"),
            )?;
            let s = rng::derive_index(adv_seed, step as u64);
            Some(match cfg.regularizer {
                RegularizerKind::Vat => {
                    regularizer::vat_perturbation(model, &xu, &cfg.perturb()?, s)?.cost_on(&net, &tape)?
                }
                RegularizerKind::LvatVae | RegularizerKind::LvatFlow => {
                    let t = transformer.expect("checked above");
                    regularizer::lvat_perturbation(model, t, &xu, &cfg.perturb()?, s)?.cost_on(&net, &tape)?
                }
                RegularizerKind::Pi => regularizer::pi_cost_on(&net, &tape, &xu, train.grid(), &cfg.pi, s)?,
                RegularizerKind::None => unreachable!("use_usl excludes none"),
            })
        } else {
            None
        };
        let total = match loss_usl {
            Some(u) => loss_sl.add(u.scale(cfg.alpha))?,
            None => loss_sl,
        };
        let total_value = total.value().item();
        if !total_value.is_finite() {
            return Err(diverged(step + 1, total_value));
        }
        let grads = net.grads(&tape.backward(total)?);
        adam.step(model.params_mut(), &grads)?;

        let done = step + 1;
        let test_error = match test {
            Some(t) if done % cfg.eval_every == 0 || done == cfg.total_updates => {
                Some(classifier::error_rate(model, t)?)
            }
            _ => None,
        };
        let row = MetricRow {
            step: done,
            lr,
            loss_sl: loss_sl.value().item(),
            loss_usl: loss_usl.map_or(0.0, |u| u.value().item()),
            loss_total: total_value,
            test_error,
        };
        if let Some(e) = test_error {
            info!("step {done}: loss {total_value:.5}, test error {e:.4}");
        } else {
            debug!("step {done}: loss {total_value:.5}");
        }
        history.push(row);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Fraction of all updates, at the end, spent in linear decay.
    pub decay_fraction: f64,
}

impl Default for TransformerTrainConfig {
    fn default() -> Self {
        TransformerTrainConfig {
            epochs: 100,
            batch_size: 128,
            lr0: optim::DEFAULT_LR,
            decay_fraction: 0.32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub held_out_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerHistory {
    pub initial_held_out_loss: f64,
    pub epochs: Vec<EpochLoss>,
}

/// The transformer's training objective on a tape and its parameter handles:
/// the negative ELBO for the VAE, the negative log-likelihood for the flow.
fn transformer_loss<'t>(
    t: &Transformer,
    tape: &'t Tape,
    x: &Tensor,
    noise_seed: u64,
    trainable: bool,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let xv = tape.constant(x.clone());
    match t {
        Transformer::Vae(v) => {
            let b = v.bind(tape, trainable);
            let noise = rng::normal_tensor(vec![x.rows(), v.latent_dim], &mut rng::rng(noise_seed));
            Ok((b.elbo_on(xv, &noise)?, b.vars()))
        }
        Transformer::Flow(f) => {
            let b = f.bind(tape, trainable);
            Ok((b.log_likelihood_on(xv)?.neg(), b.vars()))
        }
    }
}

/// Loss on a whole dataset with fixed sampling noise.
pub fn transformer_loss_on(t: &Transformer, x: &Tensor, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    Ok(transformer_loss(t, &tape, x, seed, false)?.0.value().item())
}

/// Fits the transformer to the training inputs; labels are ignored.
pub fn train_transformer(
    transformer: &mut Transformer,
    train: &Dataset,
    held_out: &Dataset,
    cfg: &TransformerTrainConfig,
    seed: u64,
) -> Result<TransformerHistory> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("epochs and batch_size must be >= 1"));
    }
    if !(0.0..=1.0).contains(&cfg.decay_fraction) {
        return Err(Error::invalid("decay_fraction must lie in [0, 1]"));
    }
    transformer.check_input(train.features())?;
    transformer.check_input(held_out.features())?;
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::invalid("transformer training needs non-empty train and held-out sets"));
    }
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let decay = ((total as f64) * cfg.decay_fraction).round() as usize;
    let eval_seed = rng::derive(seed, "held-out");
    let initial = transformer_loss_on(transformer, held_out.features(), eval_seed)?;
    if !initial.is_finite() {
        return Err(diverged(0, initial));
    }
    info!("{} initial held-out loss {initial:.5}", transformer.kind());
    let mut adam = AdamState::new(&transformer.params(), cfg.lr0);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = data::batches(train, cfg.batch_size, rng::derive_index(rng::derive(seed, "epochs"), epoch as u64), false)?;
        let mut sum = 0.0;
        for idx in &order {
            let (lr, beta1) = optim::lr_schedule(step, total, decay, cfg.lr0)?;
            adam.lr = lr;
            adam.beta1 = beta1;
            let x = train.features().select_rows(idx);
            let tape = Tape::new();
            let noise_seed = rng::derive_index(rng::derive(seed, "noise"), step as u64);
            let (loss, vars) = transformer_loss(transformer, &tape, &x, noise_seed, true)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(diverged(step + 1, value));
            }
            let g = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.into_iter().map(|v| g.get(v)).collect();
            adam.step(transformer.params_mut(), &grads)?;
            sum += value * idx.len() as f64;
            step += 1;
        }
        let held_out_loss = transformer_loss_on(transformer, held_out.features(), eval_seed)?;
        if !held_out_loss.is_finite() {
            return Err(diverged(step, held_out_loss));
        }
        let train_loss = sum / train.len() as f64;
        debug!("epoch {}: train {train_loss:.5}, held-out {held_out_loss:.5}", epoch + 1);
        history.push(EpochLoss {
            epoch: epoch + 1,
            train_loss,
            held_out_loss,
        });
    }
    Ok(TransformerHistory {
        initial_held_out_loss: initial,
        epochs: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_two_moons, subsample_labels, Split};
    use crate::flow::FlowModel;

    fn moons(n: usize, seed: u64) -> Dataset {
        gen_two_moons(n, 0.1, seed).unwrap()
    }

    fn quick(kind: RegularizerKind) -> TrainConfig {
        TrainConfig {
            total_updates: 30,
            decay_updates: 10,
            batch_labeled: 8,
            batch_unlabeled: 16,
            regularizer: kind,
            epsilon: 0.3,
            eval_every: 10,
            ..Default::default()
        }
    }

    #[test]
    fn config_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            decay_updates: 10,
            total_updates: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_labeled: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn metrics_shape_and_loss_decomposition() {
        let train = subsample_labels(&moons(200, 1), 10, 2).unwrap();
        let test = moons(100, 3);
        let mut m = ClassifierModel::new(2, &[16], 2, 4).unwrap();
        let cfg = quick(RegularizerKind::Vat);
        let h = train_classifier(&mut m, &train, Some(&test), None, &cfg, 5).unwrap();
        assert_eq!(h.len(), 30);
        assert_eq!(h.iter().filter(|r| r.test_error.is_some()).count(), 3);
        for r in &h {
            assert!((r.loss_total - (r.loss_sl + cfg.alpha * r.loss_usl)).abs() < 1e-12);
            assert!(r.loss_usl >= 0.0);
        }
        assert_eq!(h.last().unwrap().lr, optim::lr_schedule(29, 30, 10, cfg.lr0).unwrap().0);
    }

    #[test]
    fn alpha_zero_matches_supervised_only() {
        let train = subsample_labels(&moons(200, 1), 10, 2).unwrap();
        let run = |cfg: TrainConfig| {
            let mut m = ClassifierModel::new(2, &[16], 2, 4).unwrap();
            let h = train_classifier(&mut m, &train, None, None, &cfg, 5).unwrap();
            (m, h)
        };
        let (ma, ha) = run(TrainConfig {
            alpha: 0.0,
            ..quick(RegularizerKind::Vat)
        });
        let (mb, hb) = run(quick(RegularizerKind::None));
        for (a, b) in ha.iter().zip(&hb) {
            assert!((a.loss_total - b.loss_total).abs() < 1e-12);
        }
        assert_eq!(ma, mb);
    }

    #[test]
    fn same_seed_same_history() {
        let train = subsample_labels(&moons(100, 1), 6, 2).unwrap();
        let run = || {
            let mut m = ClassifierModel::new(2, &[8], 2, 4).unwrap();
            train_classifier(&mut m, &train, None, None, &quick(RegularizerKind::Pi), 9).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn transformer_requirements() {
        let train = subsample_labels(&moons(100, 1), 6, 2).unwrap();
        let mut m = ClassifierModel::new(2, &[8], 2, 4).unwrap();
        let cfg = quick(RegularizerKind::LvatFlow);
        assert!(matches!(
            train_classifier(&mut m, &train, None, None, &cfg, 0),
            Err(Error::MissingTransformer(_))
        ));
        let flow = Transformer::Flow(FlowModel::identity(2, 2, &[4]).unwrap());
        let vae_cfg = quick(RegularizerKind::LvatVae);
        assert!(train_classifier(&mut m, &train, None, Some(&flow), &vae_cfg, 0).is_err());
        assert!(train_classifier(&mut m, &train, None, Some(&flow), &quick(RegularizerKind::Vat), 0).is_err());
    }

    #[test]
    fn lvat_leaves_transformer_untouched() {
        let train = subsample_labels(&moons(100, 1), 6, 2).unwrap();
        let flow = Transformer::Flow(FlowModel::new(2, 4, &[8], 2.0, 3).unwrap());
        let before = flow.clone();
        let mut m = ClassifierModel::new(2, &[8], 2, 4).unwrap();
        train_classifier(&mut m, &train, None, Some(&flow), &quick(RegularizerKind::LvatFlow), 1).unwrap();
        assert_eq!(flow, before);
    }

    #[test]
    fn unlabeled_training_set_is_rejected() {
        let train = moons(50, 1).without_labels();
        let mut m = ClassifierModel::new(2, &[8], 2, 4).unwrap();
        let r = train_classifier(&mut m, &train, None, None, &quick(RegularizerKind::None), 0);
        assert!(matches!(r, Err(Error::Unlabeled)));
    }

    #[test]
    fn flow_training_history_and_determinism() {
        let train = moons(256, 1);
        let held = Dataset::new(moons(128, 2).features().clone(), None, 2, Split::Test).unwrap();
        let cfg = TransformerTrainConfig {
            epochs: 3,
            batch_size: 64,
            ..Default::default()
        };
        let run = || {
            let mut t = Transformer::Flow(FlowModel::new(2, 4, &[16], 2.0, 0).unwrap());
            let h = train_transformer(&mut t, &train, &held, &cfg, 7).unwrap();
            (t, h)
        };
        let (ta, ha) = run();
        let (tb, hb) = run();
        assert_eq!(ha.epochs.len(), 3);
        assert_eq!(ha, hb);
        assert_eq!(ta, tb);
        assert!(ha.epochs.last().unwrap().held_out_loss < ha.initial_held_out_loss);
    }
}
