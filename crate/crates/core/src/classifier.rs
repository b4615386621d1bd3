//! The K-class classifier being regularized.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{BoundMlp, Mlp, OutputActivation, ParamSet, Parameterized};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub net: Mlp,
    pub num_classes: usize,
}

impl ClassifierModel {
    pub fn new(input_dim: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        Ok(ClassifierModel {
            net: Mlp::new(&dims, OutputActivation::None, seed)?,
            num_classes,
        })
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        let num_classes = net.out_dim();
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        Ok(ClassifierModel { net, num_classes })
    }

    pub fn input_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn hidden(&self) -> Vec<usize> {
        let d = self.net.dims();
        d[1..d.len() - 1].to_vec()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        self.net.bind(tape, trainable)
    }

    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x)
    }

    pub fn predict_label(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_logits(x)?))
    }

    pub fn param_set(&self) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        self.net.write_params("", &mut ps)?;
        Ok(ps)
    }

    pub fn from_param_set(ps: &ParamSet) -> Result<Self> {
        Self::from_net(Mlp::from_params("", ps, OutputActivation::None)?)
    }
}

impl Parameterized for ClassifierModel {
    fn params(&self) -> Vec<&Tensor> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}

/// Classifier logits on a tape.
pub fn logits_on<'t>(net: &BoundMlp<'t>, x: Var<'t>) -> Result<Var<'t>> {
    net.forward(x)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Number of mispredicted labeled rows, the number of labeled rows and the
/// error fraction.
pub fn error_count(model: &ClassifierModel, dataset: &Dataset) -> Result<(usize, usize, f64)> {
    if dataset.is_empty() {
        return Err(Error::invalid("error rate of an empty dataset"));
    }
    let labels = dataset.labels().ok_or(Error::Unlabeled)?;
    let idx = dataset.labeled_indices();
    if idx.is_empty() {
        return Err(Error::Unlabeled);
    }
    let pred = model.predict_label(&dataset.features().select_rows(&idx))?;
    let wrong = pred.iter().zip(&idx).filter(|(p, &i)| **p != labels[i]).count();
    Ok((wrong, idx.len(), wrong as f64 / idx.len() as f64))
}

pub fn error_rate(model: &ClassifierModel, dataset: &Dataset) -> Result<f64> {
    error_count(model, dataset).map(|(_, _, r)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nets::Parameterized;
    use crate::rng;

    fn zero_model(d: usize, k: usize) -> ClassifierModel {
        let mut m = ClassifierModel::new(d, &[4], k, 0).unwrap();
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        m
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = zero_model(3, 2);
        let x = rng::normal_tensor(vec![5, 3], &mut rng::rng(1));
        let l = m.predict_logits(&x).unwrap();
        assert_eq!(l.shape(), &[5, 2]);
        assert!(l.data().iter().all(|&v| v == 0.0));
        assert!(m.predict_logits(&Tensor::zeros(vec![5, 4])).is_err());
    }

    #[test]
    fn row_permutation_commutes() {
        let m = ClassifierModel::new(3, &[8], 3, 4).unwrap();
        let x = rng::normal_tensor(vec![6, 3], &mut rng::rng(2));
        let perm = [4, 2, 0, 5, 1, 3];
        let a = m.predict_logits(&x.select_rows(&perm)).unwrap();
        let b = m.predict_logits(&x).unwrap().select_rows(&perm);
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_and_ties() {
        let l = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.5, 0.5]]).unwrap();
        assert_eq!(argmax_rows(&l), vec![1, 0]);
        let shifted = l.map(|v| 3.0 * v + 7.0);
        assert_eq!(argmax_rows(&shifted), vec![1, 0]);
    }

    #[test]
    fn error_rate_extremes() {
        let m = zero_model(2, 2);
        let x = Tensor::zeros(vec![4, 2]);
        let all0 = Dataset::new(x.clone(), Some(vec![0; 4]), 2, Split::Test).unwrap();
        let all1 = Dataset::new(x.clone(), Some(vec![1; 4]), 2, Split::Test).unwrap();
        assert_eq!(error_rate(&m, &all0).unwrap(), 0.0);
        assert_eq!(error_rate(&m, &all1).unwrap(), 1.0);
        let unl = Dataset::new(x, None, 2, Split::Test).unwrap();
        assert!(matches!(error_rate(&m, &unl), Err(Error::Unlabeled)));
    }

    #[test]
    fn untrained_symmetric_model_is_at_chance() {
        use rand::Rng;
        let m = zero_model(2, 2);
        let mut r = rng::rng(11);
        let n = 20_000;
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let ds = Dataset::new(rng::normal_tensor(vec![n, 2], &mut r), Some(labels), 2, Split::Test)
            .unwrap();
        let e = error_rate(&m, &ds).unwrap();
        assert!((e - 0.5).abs() < 0.02, "{e}");
    }
}
