//! Class references and the open-set decision: attribute a query to its
//! nearest class centroid, then accept or reject by normalized distance.

use crate::error::{Error, Result};
use crate::net::EmbeddingModel;
use crate::types::{l2_distance, squared_l2_distance, ClassId, Embedding, LabeledDataset, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReference {
    pub class: ClassId,
    /// Centroid of the class's training embeddings.
    pub center: Embedding,
    /// `sqrt(Σ‖h − center‖² / (n − 1))`.
    pub sigma: f64,
    pub count: u64,
}

impl ClassReference {
    /// `‖emb − center‖ / sigma`.
    pub fn normalized_distance(&self, emb: &[f64]) -> Result<f64> {
        Ok(l2_distance(emb, &self.center)? / self.sigma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionDecision {
    pub candidate: ClassId,
    pub normalized_distance: f64,
    pub accepted: bool,
    /// The candidate when accepted, otherwise [`ClassId::UNKNOWN`].
    pub final_class: ClassId,
}

/// References for every seen class, sorted by class id, plus the global
/// acceptance threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    references: Vec<ClassReference>,
    tau: Option<f64>,
}

/// Centroid and deviation for each group of embeddings. Groups need at least
/// two embeddings that are not all identical.
pub fn compute_references(groups: &[(ClassId, Vec<Embedding>)]) -> Result<ReferenceSet> {
    let mut references = Vec::with_capacity(groups.len());
    for (class, embs) in groups {
        let n = embs.len();
        if n < 2 {
            return Err(Error::InsufficientClass {
                class: class.0,
                count: n,
            });
        }
        let dim = embs[0].dim();
        let mut center = vec![0.0; dim];
        for e in embs {
            if e.dim() != dim {
                return Err(Error::dim(dim, e.dim()));
            }
            center.iter_mut().zip(e.iter()).for_each(|(c, v)| *c += v);
        }
        center.iter_mut().for_each(|c| *c /= n as f64);
        let mut ss = 0.0;
        for e in embs {
            ss += squared_l2_distance(e, &center)?;
        }
        let sigma = (ss / (n - 1) as f64).sqrt();
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InsufficientClass {
                class: class.0,
                count: n,
            });
        }
        references.push(ClassReference {
            class: *class,
            center: Embedding::new(center)?,
            sigma,
            count: n as u64,
        });
    }
    ReferenceSet::new(references, None)
}

/// Embeds the seen-class train split and computes one reference per class.
pub fn references_from_dataset(model: &EmbeddingModel, data: &LabeledDataset) -> Result<ReferenceSet> {
    let mut groups: Vec<(ClassId, Vec<Embedding>)> =
        data.seen_classes().into_iter().map(|c| (c, Vec::new())).collect();
    for s in data.split(Split::Train).filter(|s| s.seen) {
        let i = groups
            .binary_search_by_key(&s.label, |(c, _)| *c)
            .expect("seen class present");
        groups[i].1.push(model.embed(&s.features)?);
    }
    compute_references(&groups)
}

impl ReferenceSet {
    pub fn new(mut references: Vec<ClassReference>, tau: Option<f64>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::References("no class references".into()));
        }
        references.sort_by_key(|r| r.class);
        let dim = references[0].center.dim();
        for w in references.windows(2) {
            if w[0].class == w[1].class {
                return Err(Error::References(format!("duplicate class {}", w[0].class)));
            }
        }
        for r in &references {
            if r.class.is_unknown() {
                return Err(Error::References("reference for the unknown class".into()));
            }
            if r.center.dim() != dim {
                return Err(Error::dim(dim, r.center.dim()));
            }
            if !(r.sigma > 0.0 && r.sigma.is_finite()) {
                return Err(Error::References(format!("class {} has sigma {}", r.class, r.sigma)));
            }
            if r.count < 2 {
                return Err(Error::References(format!("class {} has count {}", r.class, r.count)));
            }
        }
        let mut set = Self {
            references,
            tau: None,
        };
        if let Some(t) = tau {
            set.set_tau(t)?;
        }
        Ok(set)
    }

    pub fn references(&self) -> &[ClassReference] {
        &self.references
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.references.iter().map(|r| r.class).collect()
    }

    pub fn dim(&self) -> usize {
        self.references[0].center.dim()
    }

    pub fn get(&self, class: ClassId) -> Option<&ClassReference> {
        self.references
            .binary_search_by_key(&class, |r| r.class)
            .ok()
            .map(|i| &self.references[i])
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::Param(format!("tau must be positive, got {tau}")));
        }
        self.tau = Some(tau);
        Ok(())
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        self.set_tau(tau)?;
        Ok(self)
    }

    fn nearest(&self, emb: &[f64]) -> Result<&ClassReference> {
        if emb.len() != self.dim() {
            return Err(Error::dim(self.dim(), emb.len()));
        }
        let mut best = &self.references[0];
        let mut best_d = f64::INFINITY;
        for r in &self.references {
            let d = l2_distance(emb, &r.center)?;
            if d < best_d {
                best = r;
                best_d = d;
            }
        }
        Ok(best)
    }

    /// Nearest reference by Euclidean distance; ties go to the lowest class id.
    pub fn identify(&self, emb: &[f64]) -> Result<ClassId> {
        self.nearest(emb).map(|r| r.class)
    }

    /// Candidate class and its normalized distance, computed once per query
    /// so thresholds can be swept cheaply.
    pub fn score(&self, emb: &[f64]) -> Result<(ClassId, f64)> {
        let r = self.nearest(emb)?;
        Ok((r.class, r.normalized_distance(emb)?))
    }

    /// Accepts iff the normalized distance is strictly below `tau`.
    pub fn decide_with_tau(&self, emb: &[f64], tau: f64) -> Result<AttributionDecision> {
        let (candidate, s) = self.score(emb)?;
        Ok(decision(candidate, s, tau))
    }

    pub fn decide(&self, emb: &[f64]) -> Result<AttributionDecision> {
        let tau = self
            .tau
            .ok_or_else(|| Error::State("acceptance threshold is not set".into()))?;
        self.decide_with_tau(emb, tau)
    }

    /// Same references with every centroid and deviation multiplied by `c`.
    pub fn scaled(&self, c: f64) -> ReferenceSet {
        ReferenceSet {
            references: self
                .references
                .iter()
                .map(|r| ClassReference {
                    center: r.center.scaled(c),
                    sigma: r.sigma * c,
                    ..r.clone()
                })
                .collect(),
            tau: self.tau,
        }
    }
}

/// The accept/reject rule on a precomputed `(candidate, s)` pair.
pub fn decision(candidate: ClassId, normalized_distance: f64, tau: f64) -> AttributionDecision {
    let accepted = normalized_distance < tau;
    AttributionDecision {
        candidate,
        normalized_distance,
        accepted,
        final_class: if accepted { candidate } else { ClassId::UNKNOWN },
    }
}

pub const REFERENCES_MAGIC: &[u8; 9] = b"OSSA-REFS";
pub const REFERENCES_VERSION: u8 = 1;

impl ReferenceSet {
    /// ```text
    /// "OSSA-REFS" version:u8 classes:u32 dim:u32
    /// { class:u32 count:u64 sigma:f64 center:f64[dim] }*
    /// tau:f64   (0 when unset)
    /// ```
    /// Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(REFERENCES_MAGIC);
        out.push(REFERENCES_VERSION);
        out.extend_from_slice(&(self.references.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for r in &self.references {
            out.extend_from_slice(&r.class.0.to_le_bytes());
            out.extend_from_slice(&r.count.to_le_bytes());
            out.extend_from_slice(&r.sigma.to_le_bytes());
            for v in r.center.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.tau.unwrap_or(0.0).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::References(format!("truncated at byte {pos}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(REFERENCES_MAGIC.len())? != REFERENCES_MAGIC {
            return Err(Error::References("bad magic".into()));
        }
        let version = take(1)?[0];
        if version != REFERENCES_VERSION {
            return Err(Error::References(format!("unsupported version {version}")));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
        let count = u32_at(take(4)?) as usize;
        let dim = u32_at(take(4)?) as usize;
        let mut references = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let class = ClassId(u32_at(take(4)?));
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let sigma = f64_at(take(8)?);
            let raw = take(dim.checked_mul(8).ok_or_else(|| Error::References("size overflow".into()))?)?;
            let center = raw.chunks_exact(8).map(f64_at).collect();
            references.push(ClassReference {
                class,
                center: Embedding::new(center).map_err(|e| Error::References(e.to_string()))?,
                sigma,
                count: n,
            });
        }
        let tau = f64_at(take(8)?);
        if pos != bytes.len() {
            return Err(Error::References("trailing bytes".into()));
        }
        let tau = if tau == 0.0 { None } else { Some(tau) };
        ReferenceSet::new(references, tau).map_err(|e| match e {
            Error::References(_) => e,
            other => Error::References(other.to_string()),
        })
    }
}
