//! ProxyNCA++ metric learning: the proxy loss with analytic gradients and the
//! fine-tuning loop that trains the embedding network jointly with the proxies.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{AdamWConfig, EmbeddingModel, Gradients, LrSchedule, OptimizerState, NORM_EPS};
use crate::pretrain::EpochLog;
use crate::rng::{epoch_batches, rng_from};
use crate::types::{ClassId, LabeledDataset, Split};

/// One learnable proxy per seen class, ordered by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxySet {
    classes: Vec<ClassId>,
    proxies: Vec<Vec<f64>>,
    dim: usize,
}

impl ProxySet {
    pub fn new(mut entries: Vec<(ClassId, Vec<f64>)>) -> Result<Self> {
        entries.sort_by_key(|(c, _)| *c);
        let dim = entries
            .first()
            .map(|(_, p)| p.len())
            .ok_or_else(|| Error::Param("proxy set is empty".into()))?;
        if dim == 0 {
            return Err(Error::Param("proxy width must be positive".into()));
        }
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Label(format!("duplicate proxy for class {}", w[0].0)));
            }
        }
        for (c, p) in &entries {
            if c.is_unknown() {
                return Err(Error::Label("proxy for the unknown class".into()));
            }
            if p.len() != dim {
                return Err(Error::dim(dim, p.len()));
            }
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("proxy for class {c}")));
            }
        }
        let (classes, proxies) = entries.into_iter().unzip();
        Ok(Self {
            classes,
            proxies,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn position(&self, class: ClassId) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    pub fn get(&self, class: ClassId) -> Option<&[f64]> {
        self.position(class).map(|i| self.proxies[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &[f64])> {
        self.classes
            .iter()
            .copied()
            .zip(self.proxies.iter().map(Vec::as_slice))
    }

    pub fn translated(&self, shift: &[f64]) -> ProxySet {
        let proxies = self
            .proxies
            .iter()
            .map(|p| p.iter().zip(shift).map(|(a, b)| a + b).collect())
            .collect();
        ProxySet {
            classes: self.classes.clone(),
            proxies,
            dim: self.dim,
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.proxies.iter_mut().map(Vec::as_mut_slice)
    }
}

/// Entries drawn i.i.d. from a Gaussian with mean 0 and standard deviation
/// `1/√dim`, from a stream keyed by `seed` and the class id.
pub fn init_proxies(classes: &[ClassId], dim: usize, seed: u64) -> Result<ProxySet> {
    if dim == 0 {
        return Err(Error::Param("proxy width must be positive".into()));
    }
    let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
    let entries = classes
        .iter()
        .map(|&c| {
            let mut rng = rng_from(seed, &[0x7072_6f78, u64::from(c.0)]);
            (c, (0..dim).map(|_| normal.sample(&mut rng)).collect())
        })
        .collect();
    ProxySet::new(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    /// Plain Euclidean distance.
    #[default]
    L2,
    /// Squared Euclidean distance.
    SquaredL2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    pub distance: DistanceKind,
    /// Distances are divided by this before the softmax; 1 disables it.
    pub temperature: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            distance: DistanceKind::L2,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyLoss {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    /// One gradient per proxy, in [`ProxySet::classes`] order.
    pub grad_proxies: Vec<Vec<f64>>,
}

/// `d(emb, p_label)/T + log Σ_a exp(−d(emb, p_a)/T)`, i.e. the negative log of
/// the softmax probability of the true proxy, with gradients.
///
/// The plain-L2 gradient divides by `‖emb − p‖ + 1e-12`, so coincident points
/// yield a zero direction instead of NaN.
pub fn proxynca_loss(emb: &[f64], label: ClassId, proxies: &ProxySet, opts: &MetricOptions) -> Result<ProxyLoss> {
    if emb.len() != proxies.dim() {
        return Err(Error::dim(proxies.dim(), emb.len()));
    }
    let target = proxies
        .position(label)
        .ok_or_else(|| Error::Label(format!("class {label} has no proxy")))?;
    if !(opts.temperature > 0.0 && opts.temperature.is_finite()) {
        return Err(Error::Param(format!("temperature must be positive, got {}", opts.temperature)));
    }
    let t = opts.temperature;
    let diffs: Vec<Vec<f64>> = proxies
        .proxies
        .iter()
        .map(|p| emb.iter().zip(p).map(|(e, q)| e - q).collect())
        .collect();
    let norms: Vec<f64> = diffs.iter().map(|u| crate::net::norm(u)).collect();
    let dists: Vec<f64> = match opts.distance {
        DistanceKind::L2 => norms.clone(),
        DistanceKind::SquaredL2 => norms.iter().map(|n| n * n).collect(),
    };
    let neg: Vec<f64> = dists.iter().map(|d| -d / t).collect();
    let max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = neg.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = dists[target] / t + lse;

    let mut grad_embedding = vec![0.0; emb.len()];
    let mut grad_proxies = Vec::with_capacity(proxies.len());
    for (a, u) in diffs.iter().enumerate() {
        let prob = (neg[a] - lse).exp();
        let indicator = if a == target { 1.0 } else { 0.0 };
        let dl_dd = (indicator - prob) / t;
        let scale = match opts.distance {
            DistanceKind::L2 => dl_dd / (norms[a] + NORM_EPS),
            DistanceKind::SquaredL2 => 2.0 * dl_dd,
        };
        let gp: Vec<f64> = u.iter().map(|ui| -scale * ui).collect();
        grad_embedding
            .iter_mut()
            .zip(u)
            .for_each(|(g, ui)| *g += scale * ui);
        grad_proxies.push(gp);
    }
    Ok(ProxyLoss {
        loss,
        grad_embedding,
        grad_proxies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub schedule: LrSchedule,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub metric: MetricOptions,
}

impl FinetuneConfig {
    /// Fine-tuning from a pretrained initialization: base 1e-4, ×0.6 every
    /// 2 epochs, 30 epochs.
    pub fn pretrained(seed: u64) -> Self {
        Self {
            schedule: LrSchedule::new(1e-4, 0.6, 2).expect("valid schedule"),
            epochs: 30,
            batch_size: 32,
            seed,
            optimizer: AdamWConfig::default(),
            metric: MetricOptions::default(),
        }
    }

    /// Training from random weights: base 7e-4, ×0.6 every 2 epochs, 30 epochs.
    pub fn scratch(seed: u64) -> Self {
        Self {
            schedule: LrSchedule::new(7e-4, 0.6, 2).expect("valid schedule"),
            ..Self::pretrained(seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: EmbeddingModel,
    pub proxies: ProxySet,
    pub optimizer: OptimizerState,
    /// Per-epoch mean loss; `accuracy` is the nearest-proxy hit rate.
    pub log: Vec<EpochLog>,
}

struct SampleGrads {
    loss: f64,
    hit: bool,
    body: Gradients,
    proxies: Vec<Vec<f64>>,
}

fn sample_grads(
    model: &EmbeddingModel,
    proxies: &ProxySet,
    x: &[f64],
    label: ClassId,
    opts: &MetricOptions,
) -> Result<SampleGrads> {
    let trace = model.forward(x)?;
    let pl = proxynca_loss(trace.output(), label, proxies, opts)?;
    let nearest = proxies
        .proxies
        .iter()
        .enumerate()
        .map(|(i, p)| (crate::types::squared_l2_distance(trace.output(), p).unwrap_or(f64::INFINITY), i))
        .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
        .1;
    let body = model.backward(&trace, &pl.grad_embedding)?;
    Ok(SampleGrads {
        loss: pl.loss,
        hit: proxies.classes[nearest] == label,
        body,
        proxies: pl.grad_proxies,
    })
}

/// Joint AdamW training of the embedding network and the proxies on the
/// seen-class train split. Every train label must have a proxy.
pub fn finetune(
    mut model: EmbeddingModel,
    mut proxies: ProxySet,
    data: &LabeledDataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if proxies.dim() != model.output_dim() {
        return Err(Error::dim(model.output_dim(), proxies.dim()));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::dim(model.input_dim(), data.dim()));
    }
    let samples: Vec<(&[f64], ClassId)> = data
        .split(Split::Train)
        .map(|s| {
            if !s.seen || proxies.position(s.label).is_none() {
                Err(Error::Label(format!("train sample of class {} has no proxy", s.label)))
            } else {
                Ok((&s.features[..], s.label))
            }
        })
        .collect::<Result<_>>()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no train samples for fine-tuning".into()));
    }
    let mut shapes = model.param_shapes();
    shapes.extend(std::iter::repeat_n(proxies.dim(), proxies.len()));
    let mut opt = OptimizerState::new(cfg.optimizer, &shapes);
    let mut log = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for batch in epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch) {
            let per_sample = batch
                .par_iter()
                .map(|&i| sample_grads(&model, &proxies, samples[i].0, samples[i].1, &cfg.metric))
                .collect::<Result<Vec<_>>>()?;
            let mut body = Gradients::zeros_like(&model);
            let mut gp = vec![vec![0.0; proxies.dim()]; proxies.len()];
            for s in &per_sample {
                loss_sum += s.loss;
                hits += usize::from(s.hit);
                body.add_assign(&s.body);
                for (acc, g) in gp.iter_mut().zip(&s.proxies) {
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            body.scale(inv);
            gp.iter_mut().flatten().for_each(|v| *v *= inv);
            let mut grads = body.param_slices();
            grads.extend(gp.iter().map(Vec::as_slice));
            let mut params = model.params_mut();
            params.extend(proxies.params_mut());
            opt.step(&mut params, &grads, lr)?;
        }
        let loss = loss_sum / samples.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("fine-tuning loss at epoch {epoch}")));
        }
        log.push(EpochLog {
            epoch,
            lr,
            loss,
            accuracy: hits as f64 / samples.len() as f64,
        });
    }
    Ok(FinetuneOutcome {
        model,
        proxies,
        optimizer: opt,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{l2_distance, FeatureVector, LabeledSample};
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn set(points: &[&[f64]]) -> ProxySet {
        ProxySet::new(
            points
                .iter()
                .enumerate()
                .map(|(i, p)| (ClassId(i as u32), p.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn equidistant_two_proxies_loss_is_ln2() {
        let p = set(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let l = proxynca_loss(&[0.0, 3.0], ClassId(0), &p, &MetricOptions::default()).unwrap();
        assert!((l.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn coincident_embedding_loss() {
        let p = set(&[&[0.0, 0.0], &[3.0, 0.0]]);
        let l = proxynca_loss(&[0.0, 0.0], ClassId(0), &p, &MetricOptions::default()).unwrap();
        assert!((l.loss - (1.0 + (-3f64).exp()).ln()).abs() < 1e-12);
        assert!(l.grad_embedding.iter().all(|g| g.is_finite()));
        assert!((l.loss - 0.048587).abs() < 1e-6);
    }

    #[test]
    fn unknown_label_and_dim_errors() {
        let p = set(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let o = MetricOptions::default();
        assert!(matches!(proxynca_loss(&[0.0, 0.0], ClassId(5), &p, &o), Err(Error::Label(_))));
        assert!(matches!(proxynca_loss(&[0.0], ClassId(0), &p, &o), Err(Error::Dim { .. })));
    }

    fn fd_check(opts: MetricOptions, seed: u64) {
        let mut rng = rng_from(seed, &[]);
        let dim = 6;
        let mut emb: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let entries: Vec<(ClassId, Vec<f64>)> = (0..5)
            .map(|c| (ClassId(c), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let label = ClassId(rng.random_range(0..5));
        let p = ProxySet::new(entries.clone()).unwrap();
        let l = proxynca_loss(&emb, label, &p, &opts).unwrap();
        let h = 1e-5;
        let close = |a: f64, b: f64| {
            if a.abs() < 1e-8 && b.abs() < 1e-8 {
                (a - b).abs() <= 1e-7
            } else {
                (a - b).abs() <= 1e-4 * a.abs().max(b.abs())
            }
        };
        for j in 0..dim {
            let orig = emb[j];
            emb[j] = orig + h;
            let lp = proxynca_loss(&emb, label, &p, &opts).unwrap().loss;
            emb[j] = orig - h;
            let lm = proxynca_loss(&emb, label, &p, &opts).unwrap().loss;
            emb[j] = orig;
            assert!(close(l.grad_embedding[j], (lp - lm) / (2.0 * h)));
        }
        for a in 0..5 {
            for j in 0..dim {
                let mut e = entries.clone();
                e[a].1[j] += h;
                let lp = proxynca_loss(&emb, label, &ProxySet::new(e).unwrap(), &opts).unwrap().loss;
                let mut e = entries.clone();
                e[a].1[j] -= h;
                let lm = proxynca_loss(&emb, label, &ProxySet::new(e).unwrap(), &opts).unwrap().loss;
                assert!(close(l.grad_proxies[a][j], (lp - lm) / (2.0 * h)));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            fd_check(MetricOptions::default(), seed);
            fd_check(
                MetricOptions {
                    distance: DistanceKind::SquaredL2,
                    temperature: 0.5,
                },
                seed + 50,
            );
        }
    }

    #[test]
    fn stable_for_huge_distances() {
        let p = set(&[&[1e6, 0.0], &[-1e6, 0.0], &[0.0, 1e6]]);
        let l = proxynca_loss(&[0.0, 0.0], ClassId(2), &p, &MetricOptions::default()).unwrap();
        assert!(l.loss.is_finite());
        let l = proxynca_loss(&[1e6, 0.0], ClassId(1), &p, &MetricOptions::default()).unwrap();
        assert!(l.loss.is_finite() && l.loss > 1e6);
    }

    #[test]
    fn proxy_init_shape_and_determinism() {
        let classes: Vec<ClassId> = (0..5).map(ClassId).collect();
        let a = init_proxies(&classes, 64, 3).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|(_, p)| p.len() == 64));
        assert_eq!(a, init_proxies(&classes, 64, 3).unwrap());
        for (i, (_, p)) in a.iter().enumerate() {
            for (_, q) in a.iter().skip(i + 1) {
                assert!(l2_distance(p, q).unwrap() > 0.0);
            }
        }
        assert!(init_proxies(&classes, 0, 3).is_err());
    }

    proptest! {
        #[test]
        fn loss_positive_translation_invariant_and_descends(
            seed in any::<u64>(),
            shift in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let mut rng = rng_from(seed, &[]);
            let emb: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let entries: Vec<(ClassId, Vec<f64>)> = (0..3)
                .map(|c| (ClassId(c), (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()))
                .collect();
            let p = ProxySet::new(entries).unwrap();
            let o = MetricOptions::default();
            let l = proxynca_loss(&emb, ClassId(1), &p, &o).unwrap();
            prop_assert!(l.loss > 0.0);

            let moved: Vec<f64> = emb.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let lt = proxynca_loss(&moved, ClassId(1), &p.translated(&shift), &o).unwrap();
            prop_assert!((lt.loss - l.loss).abs() <= 1e-10 * l.loss);

            let step = 1e-4;
            let down: Vec<f64> = emb.iter().zip(&l.grad_embedding).map(|(e, g)| e - step * g).collect();
            let ld = proxynca_loss(&down, ClassId(1), &p, &o).unwrap();
            prop_assert!(ld.loss <= l.loss);
        }
    }

    fn blobs(per_class: usize, seed: u64) -> LabeledDataset {
        let mut rng = rng_from(seed, &[]);
        let centers = [[4.0, 0.0, 0.0, 0.0], [0.0, 4.0, 0.0, 0.0], [0.0, 0.0, 4.0, 0.0]];
        let mut samples = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                let v = center.iter().map(|m| m + rng.random_range(-1.0..1.0)).collect();
                samples.push(LabeledSample {
                    features: FeatureVector::new(v).unwrap(),
                    label: ClassId(c as u32),
                    split: Split::Train,
                    seen: true,
                });
            }
        }
        let table: BTreeMap<_, _> = (0..3).map(|c| (ClassId(c), format!("g{c}"))).collect();
        LabeledDataset::new(samples, table).unwrap()
    }

    fn mean_distances(model: &EmbeddingModel, data: &LabeledDataset) -> (f64, f64) {
        let embs: Vec<(ClassId, Vec<f64>)> = data
            .samples()
            .iter()
            .map(|s| (s.label, model.embed(&s.features).unwrap().into_inner()))
            .collect();
        let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0, 0.0, 0);
        for (i, (a, x)) in embs.iter().enumerate() {
            for (b, y) in &embs[i + 1..] {
                let d = l2_distance(x, y).unwrap();
                if a == b {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    ne += 1;
                }
            }
        }
        (intra / ni as f64, inter / ne as f64)
    }

    #[test]
    fn finetune_clusters_classes() {
        let data = blobs(40, 1);
        let model = EmbeddingModel::init(4, &[16], 8, 2).unwrap();
        let classes = data.seen_classes();
        let proxies = init_proxies(&classes, 8, 3).unwrap();
        let cfg = FinetuneConfig {
            epochs: 10,
            ..FinetuneConfig::scratch(4)
        };
        let out = finetune(model, proxies, &data, &cfg).unwrap();
        let (intra, inter) = mean_distances(&out.model, &data);
        assert!(intra < inter, "intra {intra} inter {inter}");
        assert!(out.log.last().unwrap().loss < out.log[0].loss);

        let again = finetune(
            EmbeddingModel::init(4, &[16], 8, 2).unwrap(),
            init_proxies(&classes, 8, 3).unwrap(),
            &data,
            &cfg,
        )
        .unwrap();
        assert_eq!(again.model, out.model);
        assert_eq!(again.proxies, out.proxies);
    }

    #[test]
    fn finetune_rejects_label_without_proxy() {
        let data = blobs(3, 1);
        let model = EmbeddingModel::init(4, &[], 8, 2).unwrap();
        let proxies = init_proxies(&[ClassId(0), ClassId(1)], 8, 3).unwrap();
        assert!(matches!(
            finetune(model, proxies, &data, &FinetuneConfig::scratch(0)),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn protocol_defaults() {
        let p = FinetuneConfig::pretrained(0);
        assert_eq!(p.schedule.base_lr(), 0.0001);
        assert_eq!(p.schedule.decay_factor(), 0.6);
        assert_eq!(p.schedule.decay_interval_epochs(), 2);
        assert_eq!(p.epochs, 30);
        let s = FinetuneConfig::scratch(0);
        assert_eq!(s.schedule.base_lr(), 7e-4);
        assert_eq!(s.schedule.decay_factor(), 0.6);
        assert_eq!(s.epochs, 30);
    }
}
