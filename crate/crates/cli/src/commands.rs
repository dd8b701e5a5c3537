use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ossa_core::eval::{
    af1, auc, confusion, crr, curve_csv, histogram, histogram_csv, sweep, ScoredSample, TradeoffCurve,
    TradeoffPoint,
};
use ossa_core::metric::{finetune, init_proxies};
use ossa_core::openset::references_from_dataset;
use ossa_core::pretrain::{pretrain, ClassifierHead, EpochLog, PretextNet};
use ossa_core::rng::derive_seed;
use ossa_core::synthdata::{build_dataset, build_pretext_dataset, synth_patch, ImagePatch};
use ossa_core::types::{read_features, stratified_undersample, write_features, FEATURE_MAGIC};
use ossa_core::{
    Checkpoint, ClassId, EmbeddingModel, Error, FeatureVector, LabeledDataset, ReferenceSet, Split,
};
use sha2::{Digest, Sha256};

use crate::config::{
    ExperimentConfig, STREAM_DATASET, STREAM_MODEL, STREAM_PATCHES, STREAM_PRETEXT, STREAM_PROXIES,
};
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.feat";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const REFERENCES_FILE: &str = "references.refs";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const CURVE_FILE: &str = "curve.csv";
pub const HIST_FILE: &str = "hist.csv";
pub const COMPARE_FILE: &str = "compare.txt";

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    fs::write(path, bytes).map_err(Error::from)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))).into()
    })
}

/// A dataset together with the digest of its canonical feature-file form.
pub struct LoadedDataset {
    pub data: LabeledDataset,
    pub digest: String,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LoadedDataset, CliError> {
    let data = match (&cfg.dataset.features, &cfg.dataset.synth) {
        (Some(path), _) => read_features(BufReader::new(read_file(path)?.as_slice()))?,
        (None, Some(s)) => build_dataset(&s.spec(), derive_seed(cfg.seed, &[STREAM_DATASET]))?,
        (None, None) => unreachable!("validated config has a dataset source"),
    };
    let mut bytes = Vec::new();
    write_features(&data, &mut bytes)?;
    Ok(LoadedDataset {
        digest: digest(&bytes),
        data,
    })
}

fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,loss,acc\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.lr, e.loss, e.accuracy);
    }
    s
}

pub struct SynthSummary {
    pub features: PathBuf,
    pub digest: String,
    pub samples: usize,
}

/// Builds the configured dataset, writes it as a feature file, and
/// optionally dumps `patches` example PGM patches per class.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path, patches: usize) -> Result<SynthSummary, CliError> {
    let loaded = load_dataset(cfg)?;
    let mut bytes = Vec::new();
    write_features(&loaded.data, &mut bytes)?;
    let features = out.join(DATASET_FILE);
    write_file(&features, &bytes)?;
    if patches > 0 {
        let synth = cfg.dataset.synth.as_ref().ok_or_else(|| CliError::Config {
            field: "dataset.synth".into(),
            msg: "patch export needs a synthetic dataset".into(),
        })?;
        let spec = synth.spec();
        for (c, profile) in spec.seen.iter().chain(&spec.unseen).enumerate() {
            for i in 0..patches {
                let seed = derive_seed(cfg.seed, &[STREAM_PATCHES, c as u64, i as u64]);
                let patch = synth_patch(profile, spec.patch_size, seed)?;
                write_file(&out.join("patches").join(format!("class{c}_{i:03}.pgm")), &patch.to_pgm())?;
            }
        }
    }
    Ok(SynthSummary {
        features,
        digest: loaded.digest,
        samples: loaded.data.len(),
    })
}

pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub digest: String,
    pub final_accuracy: f64,
}

/// Pretext pretraining on synthetic many-class data. Input width matches the
/// synthetic feature extractor.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainSummary, CliError> {
    let p = &cfg.pretrain;
    if !p.enabled {
        return Err(CliError::Config {
            field: "pretrain.enabled".into(),
            msg: "pretraining is disabled".into(),
        });
    }
    let data = build_pretext_dataset(
        p.classes,
        p.per_class,
        p.patch_size,
        p.crop_size,
        derive_seed(cfg.seed, &[STREAM_PRETEXT]),
    )?;
    let init_seed = derive_seed(cfg.seed, &[STREAM_MODEL, 0]);
    let body = EmbeddingModel::init(data.dim(), &cfg.model.hidden, cfg.model.embedding_dim, init_seed)?;
    let head = ClassifierHead::init(p.classes, cfg.model.embedding_dim, derive_seed(init_seed, &[1]));
    let outcome = pretrain(PretextNet::new(body, head)?, &data, &cfg.pretrain_config())?;
    let final_accuracy = outcome.log.last().map_or(0.0, |e| e.accuracy);
    let ckpt = Checkpoint {
        model: outcome.net.body,
        head: Some(outcome.net.head),
        proxies: None,
        optimizer: Some(outcome.optimizer),
    }
    .to_bytes();
    let checkpoint = out.join(PRETRAINED_FILE);
    write_file(&checkpoint, &ckpt)?;
    write_file(&out.join(PRETRAIN_LOG_FILE), log_csv(&outcome.log).as_bytes())?;
    Ok(PretrainSummary {
        checkpoint,
        digest: digest(&ckpt),
        final_accuracy,
    })
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub references: PathBuf,
    pub checkpoint_digest: String,
    pub references_digest: String,
    pub dataset_digest: String,
    pub base_lr: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig, init: Option<&Path>, out: &Path) -> Result<TrainSummary, CliError> {
    let loaded = load_dataset(cfg)?;
    train_on(cfg, &loaded, init, out)
}

fn train_on(
    cfg: &ExperimentConfig,
    loaded: &LoadedDataset,
    init: Option<&Path>,
    out: &Path,
) -> Result<TrainSummary, CliError> {
    let data = stratified_undersample(&loaded.data, derive_seed(cfg.seed, &[STREAM_DATASET, 1]))?;
    let model = match init {
        Some(path) => {
            let ckpt = Checkpoint::from_bytes(&read_file(path)?)?;
            let model = match ckpt.head {
                Some(_) => ckpt.strip_head()?,
                None => ckpt.model,
            };
            if model.input_dim() != data.dim() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint expects {}-dimensional features, dataset has {}",
                    model.input_dim(),
                    data.dim()
                ))
                .into());
            }
            model.with_normalize(cfg.model.normalize)
        }
        None => EmbeddingModel::init(
            data.dim(),
            &cfg.model.hidden,
            cfg.model.embedding_dim,
            derive_seed(cfg.seed, &[STREAM_MODEL, 1]),
        )?
        .with_normalize(cfg.model.normalize),
    };
    let ft_cfg = cfg.finetune_config(init.is_some());
    let proxies = init_proxies(
        &data.seen_classes(),
        model.output_dim(),
        derive_seed(cfg.seed, &[STREAM_PROXIES]),
    )?;
    let outcome = finetune(model, proxies, &data, &ft_cfg)?;
    let mut refs = references_from_dataset(&outcome.model, &data)?;
    if let Some(tau) = cfg.eval.tau {
        refs.set_tau(tau)?;
    }
    let ckpt = Checkpoint {
        model: outcome.model,
        head: None,
        proxies: Some(outcome.proxies),
        optimizer: Some(outcome.optimizer),
    }
    .to_bytes();
    let refs = refs.to_bytes();
    let checkpoint = out.join(MODEL_FILE);
    let references = out.join(REFERENCES_FILE);
    write_file(&checkpoint, &ckpt)?;
    write_file(&references, &refs)?;
    write_file(&out.join(TRAIN_LOG_FILE), log_csv(&outcome.log).as_bytes())?;
    Ok(TrainSummary {
        checkpoint,
        references,
        checkpoint_digest: digest(&ckpt),
        references_digest: digest(&refs),
        dataset_digest: loaded.digest.clone(),
        base_lr: ft_cfg.schedule.base_lr(),
    })
}

pub struct EvalSummary {
    pub report: PathBuf,
    pub report_digest: String,
    pub closed_set_af1: f64,
    pub auc: f64,
    pub best: TradeoffPoint,
    pub operating: TradeoffPoint,
    pub curve: TradeoffCurve,
}

fn load_model(path: &Path) -> Result<(EmbeddingModel, Vec<u8>), CliError> {
    let bytes = read_file(path)?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let model = match ckpt.head {
        Some(_) => ckpt.strip_head()?,
        None => ckpt.model,
    };
    Ok((model, bytes))
}

fn load_references(path: &Path) -> Result<(ReferenceSet, Vec<u8>), CliError> {
    let bytes = read_file(path)?;
    Ok((ReferenceSet::from_bytes(&bytes)?, bytes))
}

fn check_compatible(model: &EmbeddingModel, refs: &ReferenceSet) -> Result<(), CliError> {
    if model.output_dim() != refs.dim() {
        return Err(Error::Dim {
            expected: refs.dim(),
            got: model.output_dim(),
        }
        .into());
    }
    Ok(())
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    references: &Path,
    out: &Path,
) -> Result<EvalSummary, CliError> {
    let loaded = load_dataset(cfg)?;
    eval_on(cfg, &loaded, checkpoint, references, out)
}

fn operating_point(scored: &[ScoredSample], classes: &[ClassId], tau: f64) -> Result<TradeoffPoint, CliError> {
    let outcomes: Vec<_> = scored.iter().map(|s| s.outcome(tau)).collect();
    Ok(TradeoffPoint {
        tau,
        af1: af1(&confusion(&outcomes, classes))?,
        crr: crr(&outcomes)?,
    })
}

fn eval_on(
    cfg: &ExperimentConfig,
    loaded: &LoadedDataset,
    checkpoint: &Path,
    references: &Path,
    out: &Path,
) -> Result<EvalSummary, CliError> {
    let (model, ckpt_bytes) = load_model(checkpoint)?;
    let (refs, refs_bytes) = load_references(references)?;
    check_compatible(&model, &refs)?;
    let data = &loaded.data;
    if data.dim() != model.input_dim() {
        return Err(Error::Dim {
            expected: model.input_dim(),
            got: data.dim(),
        }
        .into());
    }
    let classes = refs.classes();
    let mut scored = Vec::new();
    let mut test_seen = Vec::new();
    let mut test_unseen = Vec::new();
    for s in data.split(Split::Test) {
        let (candidate, score) = refs.score(&model.embed(&s.features)?)?;
        scored.push(ScoredSample {
            label: s.label,
            seen: s.seen,
            candidate,
            score,
        });
        if s.seen {
            test_seen.push((s.label, score));
        } else {
            test_unseen.push((s.label, score));
        }
    }
    let mut train = Vec::new();
    for s in data.split(Split::Train).filter(|s| s.seen) {
        if let Some(r) = refs.get(s.label) {
            train.push((s.label, r.normalized_distance(&model.embed(&s.features)?)?));
        }
    }
    let grid = cfg.tau_grid()?;
    let curve = sweep(&scored, &classes, &grid)?;
    let area = auc(&curve)?;
    let best = curve
        .best_point()
        .ok_or_else(|| Error::Curve("empty tau grid".into()))?;
    let operating = match cfg.eval.tau.or(refs.tau()) {
        Some(t) => operating_point(&scored, &classes, t)?,
        None => best,
    };

    let width = cfg.eval.hist_width;
    let hist_train = histogram(&train, width)?;
    let hist_seen = histogram(&test_seen, width)?;
    let hist_unseen = histogram(&test_unseen, width)?;
    let hist = histogram_csv(
        &[
            ("train", &hist_train),
            ("test-seen", &hist_seen),
            ("test-unseen", &hist_unseen),
        ],
        width,
    );
    let curve_text = curve_csv(&curve);

    let mut r = String::new();
    let _ = writeln!(r, "open-set attribution report");
    let _ = writeln!(r, "seed = {}", cfg.seed);
    let _ = writeln!(r, "dataset_digest = {}", loaded.digest);
    let _ = writeln!(r, "checkpoint_digest = {}", digest(&ckpt_bytes));
    let _ = writeln!(r, "references_digest = {}", digest(&refs_bytes));
    let _ = writeln!(r, "seen_classes = {}", classes.len());
    let _ = writeln!(r, "test_seen = {}", test_seen.len());
    let _ = writeln!(r, "test_unseen = {}", test_unseen.len());
    let _ = writeln!(r, "closed_set_af1 = {}", curve.closed_set_af1());
    let _ = writeln!(r, "auc = {area}");
    let _ = writeln!(r, "best_tau = {}", best.tau);
    let _ = writeln!(r, "best_af1 = {}", best.af1);
    let _ = writeln!(r, "best_crr = {}", best.crr);
    let _ = writeln!(r, "operating_tau = {}", operating.tau);
    let _ = writeln!(r, "operating_af1 = {}", operating.af1);
    let _ = writeln!(r, "operating_crr = {}", operating.crr);
    let _ = writeln!(r, "curve_digest = {}", digest(curve_text.as_bytes()));
    let _ = writeln!(r, "hist_digest = {}", digest(hist.as_bytes()));
    let _ = writeln!(r, "curve_rows = {}", curve.points().len());
    let _ = writeln!(r);
    r.push_str(&curve_text);

    let report = out.join(REPORT_FILE);
    write_file(&report, r.as_bytes())?;
    write_file(&out.join(CURVE_FILE), curve_text.as_bytes())?;
    write_file(&out.join(HIST_FILE), hist.as_bytes())?;
    Ok(EvalSummary {
        report,
        report_digest: digest(r.as_bytes()),
        closed_set_af1: curve.closed_set_af1(),
        auc: area,
        best,
        operating,
        curve,
    })
}

pub struct CompareSummary {
    pub auc_scratch: f64,
    pub auc_pretrained: f64,
    pub dataset_digest_scratch: String,
    pub dataset_digest_pretrained: String,
    pub report: PathBuf,
}

/// Runs both protocols on one dataset: random initialization, and pretext
/// pretraining followed by fine-tuning.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<CompareSummary, CliError> {
    let loaded = load_dataset(cfg)?;
    let pre = cmd_pretrain(cfg, &out.join("pretrain"))?;

    let scratch_dir = out.join("scratch");
    let scratch = train_on(cfg, &loaded, None, &scratch_dir)?;
    let scratch_eval = eval_on(cfg, &loaded, &scratch.checkpoint, &scratch.references, &scratch_dir)?;

    let pre_dir = out.join("pretrained");
    let pretrained = train_on(cfg, &loaded, Some(&pre.checkpoint), &pre_dir)?;
    let pre_eval = eval_on(cfg, &loaded, &pretrained.checkpoint, &pretrained.references, &pre_dir)?;

    if scratch.dataset_digest != pretrained.dataset_digest {
        return Err(Error::State("protocols saw different datasets".into()).into());
    }
    let mut r = String::new();
    let _ = writeln!(r, "protocol comparison");
    let _ = writeln!(r, "seed = {}", cfg.seed);
    let _ = writeln!(r, "dataset_digest_scratch = {}", scratch.dataset_digest);
    let _ = writeln!(r, "dataset_digest_pretrained = {}", pretrained.dataset_digest);
    let _ = writeln!(r, "pretrain_checkpoint_digest = {}", pre.digest);
    let _ = writeln!(r, "auc_scratch = {}", scratch_eval.auc);
    let _ = writeln!(r, "auc_pretrained = {}", pre_eval.auc);
    let _ = writeln!(r, "report_digest_scratch = {}", scratch_eval.report_digest);
    let _ = writeln!(r, "report_digest_pretrained = {}", pre_eval.report_digest);
    let report = out.join(COMPARE_FILE);
    write_file(&report, r.as_bytes())?;
    Ok(CompareSummary {
        auc_scratch: scratch_eval.auc,
        auc_pretrained: pre_eval.auc,
        dataset_digest_scratch: scratch.dataset_digest,
        dataset_digest_pretrained: pretrained.dataset_digest,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributionRow {
    pub index: usize,
    pub candidate: ClassId,
    pub normalized_distance: f64,
    pub accepted: bool,
}

impl AttributionRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.index,
            self.candidate,
            self.normalized_distance,
            if self.accepted { "ACCEPT" } else { "UNKNOWN" }
        )
    }
}

pub const ATTRIBUTION_HEADER: &str = "index,candidate,normalized_distance,decision";

/// Decisions for every sample in a feature file, or for a single PGM patch.
pub fn cmd_attribute(
    checkpoint: &Path,
    references: &Path,
    input: &Path,
    tau: Option<f64>,
) -> Result<Vec<AttributionRow>, CliError> {
    let (model, _) = load_model(checkpoint)?;
    let (refs, _) = load_references(references)?;
    check_compatible(&model, &refs)?;
    let tau = tau
        .or(refs.tau())
        .ok_or_else(|| Error::State("no threshold: pass --tau or store one in the references".into()))?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Param(format!("tau must be positive, got {tau}")).into());
    }
    let bytes = read_file(input)?;
    let features: Vec<FeatureVector> = if bytes.starts_with(b"P5") {
        vec![ossa_core::synthdata::extract_features(&ImagePatch::from_pgm(bytes.as_slice())?)?]
    } else if bytes.starts_with(FEATURE_MAGIC.as_bytes()) {
        read_features(bytes.as_slice())?
            .samples()
            .iter()
            .map(|s| s.features.clone())
            .collect()
    } else {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{}: neither a feature file nor a P5 patch", input.display()),
        }
        .into());
    };
    features
        .iter()
        .enumerate()
        .map(|(index, f)| {
            let d = refs.decide_with_tau(&model.embed(f)?, tau)?;
            Ok(AttributionRow {
                index,
                candidate: d.candidate,
                normalized_distance: d.normalized_distance,
                accepted: d.accepted,
            })
        })
        .collect()
}
