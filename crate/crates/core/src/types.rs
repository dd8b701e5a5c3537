//! Domain types and the vector math shared by every stage of the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Deref;
use std::str::FromStr;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::rng_from;

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::dim(1, 0));
    }
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

/// Raw per-sample feature vector (the network input).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "feature vector")?;
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A learned representation h(x).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "embedding")?;
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn scaled(&self, c: f64) -> Embedding {
        Embedding(self.0.iter().map(|v| v * c).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Source-class identifier. Known classes are dense from zero;
/// [`ClassId::UNKNOWN`] marks a rejected attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub u32);

impl ClassId {
    pub const UNKNOWN: ClassId = ClassId(u32::MAX);

    pub fn is_unknown(self) -> bool {
        self == Self::UNKNOWN
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_unknown() {
            f.write_str("UNKNOWN")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: FeatureVector,
    pub label: ClassId,
    pub split: Split,
    pub seen: bool,
}

/// A validated collection of samples sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<LabeledSample>,
    class_table: BTreeMap<ClassId, String>,
    dim: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<LabeledSample>, class_table: BTreeMap<ClassId, String>) -> Result<Self> {
        let dim = samples
            .first()
            .map(|s| s.features.dim())
            .ok_or_else(|| Error::EmptyDataset("no samples".into()))?;
        for s in &samples {
            if s.features.dim() != dim {
                return Err(Error::dim(dim, s.features.dim()));
            }
            if !class_table.contains_key(&s.label) {
                return Err(Error::Label(format!("{} missing from class table", s.label)));
            }
            if !s.seen && s.split == Split::Train {
                return Err(Error::Label(format!(
                    "unseen class {} carries a train sample",
                    s.label
                )));
            }
        }
        Ok(Self {
            samples,
            class_table,
            dim,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn class_table(&self) -> &BTreeMap<ClassId, String> {
        &self.class_table
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Classes with at least one sample marked as seen, ascending.
    pub fn seen_classes(&self) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self
            .samples
            .iter()
            .filter(|s| s.seen)
            .map(|s| s.label)
            .collect();
        set.into_iter().collect()
    }

    /// Subset by sample index, keeping the class table.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(samples, self.class_table.clone())
    }
}

/// Euclidean distance between two equal-length vectors.
pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    squared_l2_distance(a, b).map(f64::sqrt)
}

pub fn squared_l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Indices (ascending) kept by [`stratified_undersample`].
///
/// Every seen class keeps exactly as many train samples as the smallest seen
/// class, drawn without replacement from a stream keyed by `seed` and the
/// class id. Validation, test and unseen samples are always kept.
pub fn stratified_undersample_indices(data: &LabeledDataset, seed: u64) -> Result<Vec<usize>> {
    let seen = data.seen_classes();
    if seen.is_empty() {
        return Err(Error::EmptyDataset("no seen classes".into()));
    }
    let mut per_class: BTreeMap<ClassId, Vec<usize>> =
        seen.iter().map(|&c| (c, Vec::new())).collect();
    let mut kept = Vec::new();
    for (i, s) in data.samples().iter().enumerate() {
        match per_class.get_mut(&s.label) {
            Some(v) if s.split == Split::Train && s.seen => v.push(i),
            _ => kept.push(i),
        }
    }
    let target = per_class.values().map(Vec::len).min().unwrap_or(0);
    if target == 0 {
        let (empty, _) = per_class.iter().find(|(_, v)| v.is_empty()).unwrap();
        return Err(Error::EmptyClass(empty.0));
    }
    for (class, members) in &per_class {
        if members.len() == target {
            kept.extend_from_slice(members);
        } else {
            let mut rng = rng_from(seed, &[0x756e_6465, u64::from(class.0)]);
            kept.extend(
                index::sample(&mut rng, members.len(), target)
                    .into_iter()
                    .map(|j| members[j]),
            );
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Balances the seen-class train split by under-sampling to the smallest class.
pub fn stratified_undersample(data: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let kept = stratified_undersample_indices(data, seed)?;
    data.select(&kept)
}

pub const FEATURE_MAGIC: &str = "OSSA-FEAT";

/// Writes the `OSSA-FEAT v1` text format. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_features<W: Write>(data: &LabeledDataset, mut out: W) -> Result<()> {
    let classes = data
        .class_table()
        .keys()
        .map(|c| c.0 as usize + 1)
        .max()
        .unwrap_or(0);
    writeln!(out, "{FEATURE_MAGIC} v1 dim={} classes={classes}", data.dim())?;
    let mut line = String::new();
    for s in data.samples() {
        line.clear();
        use std::fmt::Write as _;
        let _ = write!(
            line,
            "{} {} {}",
            s.label.0,
            s.split.as_str(),
            u8::from(s.seen)
        );
        for v in s.features.iter() {
            let _ = write!(line, " {v}");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn parse_header(line: &str) -> std::result::Result<(usize, usize), String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(FEATURE_MAGIC) {
        return Err(format!("expected {FEATURE_MAGIC} header"));
    }
    match parts.next() {
        Some("v1") => {}
        Some(v) => return Err(format!("unsupported version {v}")),
        None => return Err("missing version".into()),
    }
    let mut field = |key: &str| -> std::result::Result<usize, String> {
        let tok = parts.next().ok_or_else(|| format!("missing {key}="))?;
        tok.strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .ok_or_else(|| format!("expected {key}=<n>, got {tok:?}"))?
            .parse::<usize>()
            .map_err(|e| format!("{key}: {e}"))
    };
    let dim = field("dim")?;
    let classes = field("classes")?;
    if parts.next().is_some() {
        return Err("trailing tokens in header".into());
    }
    if dim == 0 {
        return Err("dim must be positive".into());
    }
    Ok((dim, classes))
}

fn parse_sample(
    line: &str,
    dim: usize,
    classes: usize,
) -> std::result::Result<LabeledSample, String> {
    let mut parts = line.split_whitespace();
    let id: u32 = parts
        .next()
        .ok_or("missing class id")?
        .parse()
        .map_err(|e| format!("class id: {e}"))?;
    if id as usize >= classes {
        return Err(format!("class id {id} out of range for classes={classes}"));
    }
    let split: Split = parts.next().ok_or("missing split")?.parse()?;
    let seen = match parts.next() {
        Some("0") => false,
        Some("1") => true,
        Some(t) => return Err(format!("seen flag must be 0 or 1, got {t:?}")),
        None => return Err("missing seen flag".into()),
    };
    if !seen && split == Split::Train {
        return Err("unseen sample cannot be in the train split".into());
    }
    let values = parts
        .map(|t| t.parse::<f64>().map_err(|e| format!("value {t:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if values.len() != dim {
        return Err(format!("expected {dim} values, got {}", values.len()));
    }
    let features = FeatureVector::new(values).map_err(|e| e.to_string())?;
    Ok(LabeledSample {
        features,
        label: ClassId(id),
        split,
        seen,
    })
}

/// Parses the `OSSA-FEAT v1` format. Errors carry 1-based line numbers.
pub fn read_features<R: BufRead>(input: R) -> Result<LabeledDataset> {
    let mut lines = input.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty input".into(),
    })??;
    let (dim, classes) = parse_header(&header).map_err(|msg| Error::Parse { line: 1, msg })?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample =
            parse_sample(&line, dim, classes).map_err(|msg| Error::Parse { line: i + 2, msg })?;
        samples.push(sample);
    }
    let class_table = (0..classes as u32)
        .map(|c| (ClassId(c), format!("class{c}")))
        .collect();
    LabeledDataset::new(samples, class_table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(label: u32, split: Split, seen: bool, v: f64) -> LabeledSample {
        LabeledSample {
            features: FeatureVector::new(vec![v, -v]).unwrap(),
            label: ClassId(label),
            split,
            seen,
        }
    }

    fn table(n: u32) -> BTreeMap<ClassId, String> {
        (0..n).map(|c| (ClassId(c), format!("c{c}"))).collect()
    }

    fn sized(sizes: &[usize]) -> LabeledDataset {
        let mut samples = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                samples.push(sample(c as u32, Split::Train, true, i as f64));
            }
            samples.push(sample(c as u32, Split::Test, true, 0.5));
        }
        LabeledDataset::new(samples, table(sizes.len() as u32)).unwrap()
    }

    fn train_sizes(d: &LabeledDataset) -> Vec<usize> {
        let mut m = BTreeMap::new();
        for s in d.split(Split::Train) {
            *m.entry(s.label).or_insert(0) += 1;
        }
        m.into_values().collect()
    }

    #[test]
    fn distance_basics() {
        assert_eq!(l2_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(squared_l2_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert!(matches!(
            l2_distance(&[0.0], &[1.0, 2.0]),
            Err(Error::Dim { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn distance_matches_scalar_loop() {
        let mut rng = rng_from(42, &[]);
        let a: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut acc = 0.0;
        for i in 0..8 {
            let d = a[i] - b[i];
            acc += d * d;
        }
        let oracle = acc.sqrt();
        let got = l2_distance(&a, &b).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle);
        let sq = squared_l2_distance(&a, &b).unwrap();
        assert!((sq - got * got).abs() <= 1e-12 * sq);
    }

    #[test]
    fn non_finite_vectors_rejected() {
        assert!(matches!(
            FeatureVector::new(vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(Embedding::new(vec![]).is_err());
    }

    #[test]
    fn undersample_balanced_is_identity() {
        let d = sized(&[10, 10, 10]);
        let u = stratified_undersample(&d, 3).unwrap();
        assert_eq!(u, d);
    }

    #[test]
    fn undersample_forces_min() {
        let d = sized(&[10, 4, 7]);
        let u = stratified_undersample(&d, 3).unwrap();
        assert_eq!(train_sizes(&u), vec![4, 4, 4]);
        assert_eq!(u.split(Split::Test).count(), 3);
    }

    #[test]
    fn undersample_is_seed_deterministic() {
        let d = sized(&[30, 9, 17]);
        let a = stratified_undersample_indices(&d, 11).unwrap();
        let b = stratified_undersample_indices(&d, 11).unwrap();
        assert_eq!(a, b);
        let c = stratified_undersample_indices(&d, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn undersample_empty_class() {
        let samples = vec![
            sample(0, Split::Train, true, 1.0),
            sample(1, Split::Test, true, 1.0),
        ];
        let d = LabeledDataset::new(samples, table(2)).unwrap();
        assert!(matches!(
            stratified_undersample(&d, 0),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn unseen_train_sample_rejected() {
        let samples = vec![sample(0, Split::Train, false, 1.0)];
        assert!(LabeledDataset::new(samples, table(1)).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let mut d = sized(&[3, 2]);
        let mut samples = d.samples().to_vec();
        samples.push(LabeledSample {
            features: FeatureVector::new(vec![0.1 + 0.2, 1e-300]).unwrap(),
            label: ClassId(2),
            split: Split::Test,
            seen: false,
        });
        d = LabeledDataset::new(samples, table(3)).unwrap();
        let mut buf = Vec::new();
        write_features(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("OSSA-FEAT v1 dim=2 classes=3\n"));
        let back = read_features(buf.as_slice()).unwrap();
        assert_eq!(back.samples(), d.samples());
    }

    #[test]
    fn feature_file_errors_carry_line_numbers() {
        let cases = [
            ("", 1),
            ("OSSA-FEAT v2 dim=2 classes=1\n", 1),
            ("OSSA-FEAT v1 dim=2 classes=1\n0 train 1 1 2\n0 train 1 1\n", 3),
            ("OSSA-FEAT v1 dim=1 classes=1\n1 train 1 1\n", 2),
            ("OSSA-FEAT v1 dim=1 classes=1\n0 fit 1 1\n", 2),
            ("OSSA-FEAT v1 dim=1 classes=1\n0 train 0 1\n", 2),
            ("OSSA-FEAT v1 dim=1 classes=1\n0 test 2 1\n", 2),
            ("OSSA-FEAT v1 dim=1 classes=1\n0 test 1 abc\n", 2),
            ("OSSA-FEAT v1 dim=1 classes=1\n0 test 1 inf\n", 2),
        ];
        for (text, want) in cases {
            match read_features(text.as_bytes()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: expected parse error, got {other:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn triangle_inequality(
            a in prop::collection::vec(-100.0f64..100.0, 6),
            b in prop::collection::vec(-100.0f64..100.0, 6),
            c in prop::collection::vec(-100.0f64..100.0, 6),
        ) {
            let ab = l2_distance(&a, &b).unwrap();
            let bc = l2_distance(&b, &c).unwrap();
            let ac = l2_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert_eq!(ab, l2_distance(&b, &a).unwrap());
        }

        #[test]
        fn squared_is_square(
            a in prop::collection::vec(-100.0f64..100.0, 1..16),
            shift in -50.0f64..50.0,
        ) {
            let b: Vec<f64> = a.iter().map(|v| v + shift * 0.37).collect();
            let d = l2_distance(&a, &b).unwrap();
            let sq = squared_l2_distance(&a, &b).unwrap();
            prop_assert!((sq - d * d).abs() <= 1e-12 * sq.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn undersample_idempotent(
            sizes in prop::collection::vec(1usize..20, 1..5),
            seed in any::<u64>(),
        ) {
            let d = sized(&sizes);
            let once = stratified_undersample(&d, seed).unwrap();
            let twice = stratified_undersample(&once, seed).unwrap();
            prop_assert_eq!(&once, &twice);
            let min = *sizes.iter().min().unwrap();
            prop_assert!(train_sizes(&once).iter().all(|&n| n == min));
        }
    }
}
