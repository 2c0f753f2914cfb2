//! Datasets, class splits, and episode sampling.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub texts: Vec<String>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Instance indices per class id.
    pub classes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    text: String,
    label: String,
}

impl Dataset {
    /// Builds a dataset from `(text, label)` pairs; labels get contiguous ids
    /// in first-appearance order.
    pub fn from_pairs<I, T, L>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (T, L)>,
        T: Into<String>,
        L: AsRef<str>,
    {
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut ds = Dataset {
            texts: Vec::new(),
            labels: Vec::new(),
            class_names: Vec::new(),
            classes: Vec::new(),
        };
        for (text, label) in pairs {
            let label = label.as_ref();
            let id = *ids.entry(label.to_string()).or_insert_with(|| {
                ds.class_names.push(label.to_string());
                ds.classes.push(Vec::new());
                ds.class_names.len() - 1
            });
            ds.classes[id].push(ds.texts.len());
            ds.texts.push(text.into());
            ds.labels.push(id);
        }
        ds
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Rejects classes with fewer than `min_per_class` instances, listing them.
    pub fn require_min_per_class(&self, min_per_class: usize) -> Result<()> {
        let small: Vec<String> = self
            .classes
            .iter()
            .enumerate()
            .filter(|(_, members)| members.len() < min_per_class)
            .map(|(c, members)| format!("{} ({})", self.class_names[c], members.len()))
            .collect();
        if small.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "classes with fewer than {min_per_class} instances: {}",
                small.join(", ")
            )))
        }
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (text, &label) in self.texts.iter().zip(&self.labels) {
            let rec = Record {
                text: text.clone(),
                label: self.class_names[label].clone(),
            };
            out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::State(e.to_string()))?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads `{"text": ..., "label": ...}` lines. Blank lines are skipped.
pub fn load_dataset(path: &Path, min_per_class: usize) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        pairs.push((rec.text, rec.label));
    }
    let ds = Dataset::from_pairs(pairs);
    if ds.is_empty() {
        return Err(Error::Data(format!("{}: no instances", path.display())));
    }
    ds.require_min_per_class(min_per_class)?;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots < 1 || self.queries < 1 {
            return Err(Error::Config(format!(
                "episode needs N ≥ 2, K ≥ 1, R ≥ 1; got N={}, K={}, R={}",
                self.ways, self.shots, self.queries
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Instance indices, `support[n][k]`.
    pub support: Vec<Vec<usize>>,
    /// `(instance index, episode-local label)`.
    pub query: Vec<(usize, usize)>,
    /// Episode-local label → dataset class id.
    pub class_map: Vec<usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_map.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, y)| y).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplit {
    /// Classes seen during generalised training.
    pub fn seen(&self) -> &[usize] {
        &self.train
    }

    pub fn unseen(&self) -> Vec<usize> {
        let mut u: Vec<usize> = self.val.iter().chain(&self.test).copied().collect();
        u.sort_unstable();
        u
    }

    pub fn all(&self) -> Vec<usize> {
        let mut a: Vec<usize> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        a.sort_unstable();
        a
    }

    /// JSON listing class names per partition.
    pub fn manifest(&self, ds: &Dataset) -> serde_json::Value {
        let names = |ids: &[usize]| ids.iter().map(|&c| ds.class_names[c].clone()).collect::<Vec<_>>();
        serde_json::json!({
            "train": names(&self.train),
            "val": names(&self.val),
            "test": names(&self.test),
            "seen": names(self.seen()),
            "unseen": names(&self.unseen()),
        })
    }
}

/// Shuffles class ids with `seed` and cuts them 1:1:1. A single leftover
/// class goes to train; a second one goes to test.
pub fn split_classes(num_classes: usize, seed: u64) -> Result<ClassSplit> {
    if num_classes < 3 {
        return Err(Error::Config(format!("need at least 3 classes to split, got {num_classes}")));
    }
    let mut ids: Vec<usize> = (0..num_classes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = num_classes / 3;
    let rem = num_classes % 3;
    let n_train = base + usize::from(rem >= 1);
    let n_val = base;
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(ClassSplit { train, val, test })
}

fn sample_over<R: rand::Rng + ?Sized>(
    ds: &Dataset,
    classes: Vec<usize>,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    let mut support = Vec::with_capacity(classes.len());
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (label, &c) in classes.iter().enumerate() {
        let members = ds
            .classes
            .get(c)
            .ok_or_else(|| Error::Sampling(format!("class id {c} not in dataset")))?;
        if members.len() < shots + 1 {
            return Err(Error::Sampling(format!(
                "class {} has {} instances, need at least {}",
                ds.class_names[c],
                members.len(),
                shots + 1
            )));
        }
        let mut shuffled = members.clone();
        shuffled.shuffle(rng);
        support.push(shuffled[..shots].to_vec());
        pool.extend(shuffled[shots..].iter().map(|&i| (i, label)));
    }
    if pool.len() < queries {
        return Err(Error::Sampling(format!(
            "{} query candidates for {queries} queries",
            pool.len()
        )));
    }
    let query = pool.choose_multiple(rng, queries).copied().collect();
    Ok(Episode {
        support,
        query,
        class_map: classes,
    })
}

/// N classes drawn without replacement from `allowed`, K supports each, and R
/// queries drawn jointly from the remaining instances of those classes.
pub fn sample_episode<R: rand::Rng + ?Sized>(
    ds: &Dataset,
    allowed: &[usize],
    spec: EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    spec.validate().map_err(|e| Error::Sampling(e.to_string()))?;
    if allowed.len() < spec.ways {
        return Err(Error::Sampling(format!(
            "{} allowed classes for a {}-way episode",
            allowed.len(),
            spec.ways
        )));
    }
    let classes: Vec<usize> = allowed.choose_multiple(rng, spec.ways).copied().collect();
    sample_over(ds, classes, spec.shots, spec.queries, rng)
}

/// An episode over every class of the split, in class-id order.
pub fn sample_gfsl_episode<R: rand::Rng + ?Sized>(
    ds: &Dataset,
    split: &ClassSplit,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if shots < 1 || queries < 1 {
        return Err(Error::Sampling("generalised episode needs K ≥ 1 and R ≥ 1".into()));
    }
    sample_over(ds, split.all(), shots, queries, rng)
}
