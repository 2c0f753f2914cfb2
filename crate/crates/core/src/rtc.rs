//! Retrieval-then-classify: a cheap retriever narrows C candidate classes
//! down to a few, then the matcher runs on the reduced episode.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::basic_tokenize;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{read_checkpoint, ParamSet};
use crate::tensor::{self, Tensor};

pub const INDEX_MANIFEST: &str = "rtc_index.json";
pub const INDEX_VECTORS: &str = "rtc_vectors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    MeanVector,
    Bm25,
}

impl FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-vector" | "mean" => Ok(Self::MeanVector),
            "bm25" => Ok(Self::Bm25),
            other => Err(Error::Config(format!("unknown retrieval mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RtcConfig {
    pub mode: RetrievalMode,
    pub retrieve_n: usize,
    pub shots_k: usize,
    pub k1: f64,
    pub b: f64,
}

impl Default for RtcConfig {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::MeanVector,
            retrieve_n: 10,
            shots_k: 5,
            k1: 1.2,
            b: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Stats {
    pub k1: f64,
    pub b: f64,
    /// Term counts per class document.
    pub tf: Vec<BTreeMap<String, usize>>,
    pub doc_len: Vec<usize>,
    pub avg_len: f64,
    /// Number of class documents containing each term.
    pub df: BTreeMap<String, usize>,
}

impl Bm25Stats {
    pub fn build(docs: &[Vec<String>], k1: f64, b: f64) -> Self {
        let mut tf = Vec::with_capacity(docs.len());
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for doc in docs {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for t in doc {
                *counts.entry(t.clone()).or_default() += 1;
            }
            for t in counts.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            doc_len.push(doc.len());
            tf.push(counts);
        }
        let total: usize = doc_len.iter().sum();
        let avg_len = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        Self {
            k1,
            b,
            tf,
            doc_len,
            avg_len,
            df,
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.tf.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Okapi BM25 of every document against the distinct query terms.
    pub fn scores(&self, query_terms: &[String]) -> Vec<f64> {
        let distinct: BTreeSet<&str> = query_terms.iter().map(String::as_str).collect();
        let avg = self.avg_len.max(f64::MIN_POSITIVE);
        (0..self.tf.len())
            .map(|d| {
                let norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[d] as f64 / avg);
                distinct
                    .iter()
                    .filter_map(|t| self.tf[d].get(*t).map(|&f| (t, f as f64)))
                    .map(|(t, f)| self.idf(t) * f * (self.k1 + 1.0) / (f + norm))
                    .sum()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub mode: RetrievalMode,
    /// Dataset class ids, one entry per indexed class.
    pub class_ids: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
    pub bm25: Option<Bm25Stats>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    mode: RetrievalMode,
    class_ids: Vec<usize>,
    bm25: Option<Bm25Stats>,
}

fn mean_pool(t: &Tensor) -> Vec<f64> {
    let (rows, cols) = (t.rows(), t.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    out
}

/// Indices of the top `n` scores, ties broken by position.
fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order.truncate(n);
    order
}

impl RetrievalIndex {
    /// Mean-vector index from encoded supports (`supports[c][k]` is `l×D`).
    pub fn from_encodings(class_ids: &[usize], supports: &[Vec<Tensor>]) -> Result<Self> {
        check_classes(class_ids, supports.len())?;
        let mut vectors = Vec::with_capacity(supports.len());
        for (c, class) in supports.iter().enumerate() {
            let Some(first) = class.first() else {
                return Err(Error::Data(format!("class {} has no supports to index", class_ids[c])));
            };
            let mut v = vec![0.0; first.cols()];
            for s in class {
                for (o, x) in v.iter_mut().zip(mean_pool(s)) {
                    *o += x;
                }
            }
            v.iter_mut().for_each(|o| *o /= class.len() as f64);
            vectors.push(v);
        }
        Ok(Self {
            mode: RetrievalMode::MeanVector,
            class_ids: class_ids.to_vec(),
            vectors,
            bm25: None,
        })
    }

    /// BM25 index where each class document is its support texts joined.
    pub fn from_texts(class_ids: &[usize], supports: &[Vec<&str>], k1: f64, b: f64) -> Result<Self> {
        check_classes(class_ids, supports.len())?;
        let mut docs = Vec::with_capacity(supports.len());
        for (c, class) in supports.iter().enumerate() {
            if class.is_empty() {
                return Err(Error::Data(format!("class {} has no supports to index", class_ids[c])));
            }
            docs.push(class.iter().flat_map(|t| basic_tokenize(t)).collect::<Vec<_>>());
        }
        Ok(Self {
            mode: RetrievalMode::Bm25,
            class_ids: class_ids.to_vec(),
            vectors: Vec::new(),
            bm25: Some(Bm25Stats::build(&docs, k1, b)),
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Scores in index order.
    pub fn scores(&self, query_text: &str, query_enc: Option<&Tensor>) -> Result<Vec<f64>> {
        match self.mode {
            RetrievalMode::MeanVector => {
                let q = query_enc.ok_or_else(|| Error::State("mean-vector retrieval needs an encoded query".into()))?;
                let qv = mean_pool(q);
                let qn = tensor::norm(&qv);
                Ok(self
                    .vectors
                    .iter()
                    .map(|v| {
                        let d = qn * tensor::norm(v);
                        if d == 0.0 {
                            0.0
                        } else {
                            tensor::dot(&qv, v) / d
                        }
                    })
                    .collect())
            }
            RetrievalMode::Bm25 => {
                let stats = self.bm25.as_ref().ok_or_else(|| Error::State("bm25 index without statistics".into()))?;
                Ok(stats.scores(&basic_tokenize(query_text)))
            }
        }
    }

    /// Top `n` dataset class ids by score, ties by ascending class id.
    pub fn retrieve(&self, query_text: &str, query_enc: Option<&Tensor>, n: usize) -> Result<Vec<usize>> {
        let n = if n > self.len() {
            log::warn!("retrieve_n {n} exceeds {} indexed classes; clamping", self.len());
            self.len()
        } else {
            n
        };
        let scores = self.scores(query_text, query_enc)?;
        // class ids are stored ascending, so position order is id order
        Ok(top_n(&scores, n).into_iter().map(|i| self.class_ids[i]).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            mode: self.mode,
            class_ids: self.class_ids.clone(),
            bm25: self.bm25.clone(),
        };
        let path = dir.join(INDEX_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::State(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        if self.mode == RetrievalMode::MeanVector {
            let mut ps = ParamSet::new();
            for (id, v) in self.class_ids.iter().zip(&self.vectors) {
                ps.insert(format!("class.{id:06}"), Tensor::row_vector(v.clone())?)?;
            }
            ps.save(&dir.join(INDEX_VECTORS))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let mut vectors = Vec::new();
        if m.mode == RetrievalMode::MeanVector {
            let tensors = read_checkpoint(&dir.join(INDEX_VECTORS))?;
            for id in &m.class_ids {
                let name = format!("class.{id:06}");
                let t = tensors
                    .get(&name)
                    .ok_or_else(|| Error::Load(format!("index vectors missing {name}")))?;
                vectors.push(t.data().to_vec());
            }
        }
        Ok(Self {
            mode: m.mode,
            class_ids: m.class_ids,
            vectors,
            bm25: m.bm25,
        })
    }
}

fn check_classes(class_ids: &[usize], n: usize) -> Result<()> {
    if class_ids.is_empty() || class_ids.len() != n {
        return Err(Error::Data(format!("{} class ids for {n} support groups", class_ids.len())));
    }
    if class_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Data("index class ids must be strictly ascending".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RtcOutcome {
    pub predicted: usize,
    pub retrieved: Vec<usize>,
}

/// Retrieved class ids and their positions among the candidates, with
/// positions ascending so the reduced episode keeps the candidate order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reduction {
    pub retrieved: Vec<usize>,
    pub positions: Vec<usize>,
}

pub fn reduce(
    index: &RetrievalIndex,
    cfg: &RtcConfig,
    class_ids: &[usize],
    query_text: &str,
    query_enc: &Tensor,
) -> Result<Reduction> {
    if cfg.retrieve_n == 0 {
        return Err(Error::Config("retrieve_n must be at least 1".into()));
    }
    let retrieved = index.retrieve(query_text, Some(query_enc), cfg.retrieve_n)?;
    let mut positions = retrieved
        .iter()
        .map(|id| {
            class_ids
                .iter()
                .position(|c| c == id)
                .ok_or_else(|| Error::Data(format!("retrieved class {id} is not a candidate")))
        })
        .collect::<Result<Vec<_>>>()?;
    positions.sort_unstable();
    Ok(Reduction { retrieved, positions })
}

/// Classifies one query against the candidate classes `class_ids` whose
/// encoded supports are `supports`. Retrieving every class reproduces the
/// full classification.
#[allow(clippy::too_many_arguments)]
pub fn rtc_classify(
    model: &ModelConfig,
    params: &ParamSet,
    index: &RetrievalIndex,
    cfg: &RtcConfig,
    class_ids: &[usize],
    supports: &[Vec<Tensor>],
    query_text: &str,
    query_enc: &Tensor,
) -> Result<RtcOutcome> {
    let Reduction { retrieved, positions } = reduce(index, cfg, class_ids, query_text, query_enc)?;
    if retrieved.len() == 1 {
        return Ok(RtcOutcome {
            predicted: retrieved[0],
            retrieved,
        });
    }
    let sub: Vec<Vec<&Tensor>> = positions
        .iter()
        .map(|&p| supports[p].iter().take(cfg.shots_k).collect())
        .collect();
    let local = model.classify_encoded(params, &sub, &[query_enc])?[0];
    Ok(RtcOutcome {
        predicted: class_ids[positions[local]],
        retrieved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn bm25_hand_counts() {
        let idx = RetrievalIndex::from_texts(&[0, 1], &[vec!["a b", "a c"], vec!["b d", "d d"]], 1.2, 0.75).unwrap();
        let s = idx.bm25.as_ref().unwrap();
        assert_eq!(s.df["a"], 1);
        assert_eq!(s.df["b"], 2);
        assert_eq!(s.df["d"], 1);
        assert_eq!(s.tf[1]["d"], 3);
        assert_eq!(s.doc_len, vec![4, 4]);
        // a unique token puts its class first
        assert_eq!(idx.retrieve("c", None, 2).unwrap(), vec![0, 1]);
        assert_eq!(idx.retrieve("d", None, 2).unwrap(), vec![1, 0]);
    }

    #[test]
    fn bm25_zero_scores_rank_by_id() {
        let idx = RetrievalIndex::from_texts(&[2, 5, 9], &[vec!["x"], vec!["y"], vec!["z"]], 1.2, 0.75).unwrap();
        assert_eq!(idx.scores("nothing here", None).unwrap(), vec![0.0; 3]);
        assert_eq!(idx.retrieve("nothing", None, 3).unwrap(), vec![2, 5, 9]);
    }

    #[test]
    fn bm25_formula_single_term() {
        let stats = Bm25Stats::build(&[words("a a b"), words("c")], 1.2, 0.75);
        let idf = ((2.0 - 1.0 + 0.5) / 1.5 + 1.0f64).ln();
        let norm = 1.2 * (1.0 - 0.75 + 0.75 * 3.0 / 2.0);
        let expect = idf * 2.0 * 2.2 / (2.0 + norm);
        let got = stats.scores(&words("a a"));
        assert!((got[0] - expect).abs() < 1e-12);
        assert_eq!(got[1], 0.0);
    }

    #[test]
    fn mean_vector_identical_instances() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let other = Tensor::from_rows(&[vec![-1.0, 0.5]]).unwrap();
        let idx = RetrievalIndex::from_encodings(&[0, 1], &[vec![t.clone(), t.clone()], vec![other]]).unwrap();
        assert_eq!(idx.vectors[0], vec![2.0, 3.0]);
        assert_eq!(idx.retrieve("", Some(&t), 1).unwrap(), vec![0]);
        // clamped to C
        assert_eq!(idx.retrieve("", Some(&t), 9).unwrap().len(), 2);
    }

    #[test]
    fn empty_class_rejected() {
        assert!(matches!(RetrievalIndex::from_encodings(&[0, 1], &[vec![], vec![]]), Err(Error::Data(_))));
        assert!(matches!(RetrievalIndex::from_texts(&[0], &[vec![]], 1.2, 0.75), Err(Error::Data(_))));
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_rows(&[vec![0.25, -2.0]]).unwrap();
        let idx = RetrievalIndex::from_encodings(&[3, 4], &[vec![t.clone()], vec![t]]).unwrap();
        idx.save(dir.path()).unwrap();
        assert_eq!(RetrievalIndex::load(dir.path()).unwrap(), idx);
        let b = RetrievalIndex::from_texts(&[0, 1], &[vec!["a"], vec!["b"]], 1.2, 0.75).unwrap();
        let sub = dir.path().join("bm25");
        b.save(&sub).unwrap();
        assert_eq!(RetrievalIndex::load(&sub).unwrap(), b);
    }
}
