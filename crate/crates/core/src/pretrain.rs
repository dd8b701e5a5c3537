//! Cross-entropy pretext pretraining of the embedding network, followed by
//! removal of the classification head.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{AdamWConfig, EmbeddingModel, Gradients, LrSchedule, OptimizerState};
use crate::rng::{epoch_batches, rng_from};
use crate::types::{ClassId, LabeledDataset, Split};

/// Linear classification layer on top of the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Param(format!("head needs at least 2 classes, got {classes}")));
        }
        if dim == 0 {
            return Err(Error::Param("head input width must be positive".into()));
        }
        if weights.len() != classes * dim {
            return Err(Error::dim(classes * dim, weights.len()));
        }
        if bias.len() != classes {
            return Err(Error::dim(classes, bias.len()));
        }
        if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(Error::Numeric("head parameters".into()));
        }
        Ok(Self {
            classes,
            dim,
            weights,
            bias,
        })
    }

    pub fn init(classes: usize, dim: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = rng_from(seed, &[0x6865_6164]);
        let bound = 1.0 / (dim as f64).sqrt();
        let weights = (0..classes * dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..classes).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            classes,
            dim,
            weights,
            bias,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn logits(&self, emb: &[f64]) -> Result<Vec<f64>> {
        if emb.len() != self.dim {
            return Err(Error::dim(self.dim, emb.len()));
        }
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(emb).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }
}

/// `−log softmax(logits)[label]` and its gradient `softmax − onehot`.
pub fn cross_entropy(logits: &[f64], label: ClassId) -> Result<(f64, Vec<f64>)> {
    let k = label.index();
    if label.is_unknown() || k >= logits.len() {
        return Err(Error::Label(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[k];
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[k] -= 1.0;
    Ok((loss, grad))
}

/// Per-sample loss, hit flag, body gradients, head weight and bias gradients.
type SampleGrads = (f64, bool, Gradients, Vec<f64>, Vec<f64>);

/// Embedding network with a classification head attached.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextNet {
    pub body: EmbeddingModel,
    pub head: ClassifierHead,
}

impl PretextNet {
    pub fn new(body: EmbeddingModel, head: ClassifierHead) -> Result<Self> {
        if head.dim() != body.output_dim() {
            return Err(Error::dim(body.output_dim(), head.dim()));
        }
        Ok(Self { body, head })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.head.logits(&self.body.embed(x)?)
    }

    /// The activation feeding the head.
    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.body.embed(x)?.into_inner())
    }

    pub fn strip_head(self) -> EmbeddingModel {
        self.body
    }

    fn param_shapes(&self) -> Vec<usize> {
        let mut s = self.body.param_shapes();
        s.push(self.head.weights.len());
        s.push(self.head.bias.len());
        s
    }

    /// Loss, correctness, and gradients (body tensors, then head weights and bias).
    fn sample_grads(&self, x: &[f64], label: ClassId) -> Result<SampleGrads> {
        let trace = self.body.forward(x)?;
        let emb = trace.output();
        let logits = self.head.logits(emb)?;
        let (loss, dlogits) = cross_entropy(&logits, label)?;
        let predicted = argmax(&logits);
        let dim = self.head.dim;
        let mut gw = vec![0.0; self.head.weights.len()];
        let mut demb = vec![0.0; dim];
        for (c, &g) in dlogits.iter().enumerate() {
            let row = &self.head.weights[c * dim..(c + 1) * dim];
            for j in 0..dim {
                gw[c * dim + j] = g * emb[j];
                demb[j] += g * row[j];
            }
        }
        let body = self.body.backward(&trace, &demb)?;
        Ok((loss, predicted == label.index(), body, gw, dlogits))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub schedule: LrSchedule,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl PretrainConfig {
    /// Base 0.001 decayed by 0.65 every 3 epochs, 30 epochs, batches of 32.
    pub fn protocol(seed: u64) -> Self {
        Self {
            schedule: LrSchedule::new(0.001, 0.65, 3).expect("valid schedule"),
            epochs: 30,
            batch_size: 32,
            seed,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub net: PretextNet,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochLog>,
}

/// Mini-batch AdamW training of body and head on the train split.
///
/// Batch gradients are the mean of per-sample gradients, reduced in batch
/// order so results do not depend on thread scheduling.
pub fn pretrain(mut net: PretextNet, data: &LabeledDataset, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let samples: Vec<(&[f64], ClassId)> = data
        .split(Split::Train)
        .map(|s| (&s.features[..], s.label))
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no pretext train samples".into()));
    }
    if data.dim() != net.body.input_dim() {
        return Err(Error::dim(net.body.input_dim(), data.dim()));
    }
    if let Some((_, bad)) = samples.iter().find(|(_, l)| l.index() >= net.head.classes()) {
        return Err(Error::Label(format!(
            "label {bad} out of range for {} pretext classes",
            net.head.classes()
        )));
    }
    let mut opt = OptimizerState::new(cfg.optimizer, &net.param_shapes());
    let mut log = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch) {
            let per_sample = batch
                .par_iter()
                .map(|&i| net.sample_grads(samples[i].0, samples[i].1))
                .collect::<Result<Vec<_>>>()?;
            let mut body = Gradients::zeros_like(&net.body);
            let mut gw = vec![0.0; net.head.weights.len()];
            let mut gb = vec![0.0; net.head.bias.len()];
            for (loss, ok, b, w, bias) in &per_sample {
                loss_sum += loss;
                correct += usize::from(*ok);
                body.add_assign(b);
                gw.iter_mut().zip(w).for_each(|(a, v)| *a += v);
                gb.iter_mut().zip(bias).for_each(|(a, v)| *a += v);
            }
            let inv = 1.0 / batch.len() as f64;
            body.scale(inv);
            gw.iter_mut().chain(gb.iter_mut()).for_each(|v| *v *= inv);
            let mut grads = body.param_slices();
            grads.push(&gw);
            grads.push(&gb);
            let PretextNet { body: model, head } = &mut net;
            let mut params = model.params_mut();
            params.push(&mut head.weights);
            params.push(&mut head.bias);
            opt.step(&mut params, &grads, lr)?;
        }
        let loss = loss_sum / samples.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss at epoch {epoch}")));
        }
        log.push(EpochLog {
            epoch,
            lr,
            loss,
            accuracy: correct as f64 / samples.len() as f64,
        });
    }
    Ok(PretrainOutcome {
        net,
        optimizer: opt,
        log,
    })
}

/// Fraction of train-split samples whose arg-max logit equals the label.
pub fn accuracy(net: &PretextNet, data: &LabeledDataset) -> Result<f64> {
    let mut n = 0usize;
    let mut ok = 0usize;
    for s in data.split(Split::Train) {
        n += 1;
        ok += usize::from(argmax(&net.logits(&s.features)?) == s.label.index());
    }
    if n == 0 {
        return Err(Error::EmptyDataset("no train samples".into()));
    }
    Ok(ok as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Checkpoint;
    use crate::types::{FeatureVector, LabeledSample};
    use rand::Rng;
    use std::collections::BTreeMap;

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let (loss, grad) = cross_entropy(&[0.7; 10], ClassId(3)).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((grad[3] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_loss_vanishes() {
        let mut z = vec![-30.0; 5];
        z[1] = 30.0;
        let (loss, _) = cross_entropy(&z, ClassId(1)).unwrap();
        assert!((0.0..1e-12).contains(&loss));
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(cross_entropy(&[0.0, 1.0], ClassId(2)), Err(Error::Label(_))));
        assert!(matches!(cross_entropy(&[0.0, 1.0], ClassId::UNKNOWN), Err(Error::Label(_))));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = rng_from(3, &[]);
        for _ in 0..20 {
            let z: Vec<f64> = (0..7).map(|_| rng.random_range(-4.0..4.0)).collect();
            let label = ClassId(rng.random_range(0..7));
            let (_, g) = cross_entropy(&z, label).unwrap();
            assert!(g.iter().sum::<f64>().abs() < 1e-12);
            for j in 0..7 {
                let h = 1e-6;
                let mut zp = z.clone();
                zp[j] += h;
                let mut zm = z.clone();
                zm[j] -= h;
                let fd = (cross_entropy(&zp, label).unwrap().0 - cross_entropy(&zm, label).unwrap().0) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1e-3));
            }
        }
    }

    fn two_blobs(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = rng_from(seed, &[]);
        let samples = (0..n)
            .map(|i| {
                let c = (i % 2) as u32;
                let center = if c == 0 { -2.0 } else { 2.0 };
                let v = vec![
                    center + rng.random_range(-0.5..0.5),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                LabeledSample {
                    features: FeatureVector::new(v).unwrap(),
                    label: ClassId(c),
                    split: Split::Train,
                    seen: true,
                }
            })
            .collect();
        let table: BTreeMap<_, _> = (0..2).map(|c| (ClassId(c), format!("cam{c}"))).collect();
        LabeledDataset::new(samples, table).unwrap()
    }

    fn net(seed: u64) -> PretextNet {
        PretextNet::new(
            EmbeddingModel::init(3, &[16], 8, seed).unwrap(),
            ClassifierHead::init(2, 8, seed),
        )
        .unwrap()
    }

    #[test]
    fn separable_classes_reach_full_accuracy() {
        let data = two_blobs(200, 1);
        let cfg = PretrainConfig::protocol(5);
        let out = pretrain(net(2), &data, &cfg).unwrap();
        assert_eq!(out.log.len(), 30);
        assert!(out.log.iter().all(|e| e.loss.is_finite() && e.loss >= 0.0));
        assert_eq!(accuracy(&out.net, &data).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let data = two_blobs(20, 1);
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::protocol(0)
        };
        let start = net(4);
        let out = pretrain(start.clone(), &data, &cfg).unwrap();
        assert_eq!(out.net, start);
        assert!(out.log.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let data = two_blobs(64, 9);
        let cfg = PretrainConfig {
            epochs: 3,
            ..PretrainConfig::protocol(11)
        };
        let a = pretrain(net(1), &data, &cfg).unwrap();
        let b = pretrain(net(1), &data, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        let bits = |n: &PretextNet| -> Vec<u64> {
            n.body.layers().iter().flat_map(|l| l.weights().iter().map(|w| w.to_bits())).collect()
        };
        assert_eq!(bits(&a.net), bits(&b.net));
    }

    #[test]
    fn empty_train_split_rejected() {
        let mut data = two_blobs(4, 1).samples().to_vec();
        data.iter_mut().for_each(|s| s.split = Split::Test);
        let table = (0..2).map(|c| (ClassId(c), String::new())).collect();
        let d = LabeledDataset::new(data, table).unwrap();
        assert!(matches!(
            pretrain(net(0), &d, &PretrainConfig::protocol(0)),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn strip_head_exposes_penultimate() {
        let n = net(8);
        let x = [0.3, -0.1, 0.8];
        let pen = n.penultimate(&x).unwrap();
        let stripped = n.clone().strip_head();
        assert_eq!(stripped.output_dim(), 8);
        assert_eq!(stripped.embed(&x).unwrap().into_inner(), pen);

        let ck = Checkpoint {
            head: Some(n.head.clone()),
            ..Checkpoint::new(n.body.clone())
        };
        let loaded = Checkpoint::from_bytes(&ck.to_bytes()).unwrap().strip_head().unwrap();
        assert_eq!(loaded.embed(&x).unwrap().into_inner(), pen);
    }
}
