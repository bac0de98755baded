use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{contract, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const BOS_WORD: &str = "<bos>";
pub const EOS_WORD: &str = "<eos>";

/// Append-only word registry with per-task Words-of-Interest and label
/// token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    woi: BTreeMap<usize, BTreeSet<usize>>,
    labels: BTreeMap<usize, Vec<Vec<usize>>>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
            woi: BTreeMap::new(),
            labels: BTreeMap::new(),
        };
        v.intern(BOS_WORD);
        v.intern(EOS_WORD);
        v
    }

    fn intern(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_special(id: usize) -> bool {
        id == BOS || id == EOS
    }

    /// Registers the label word sequences of a task. Known words keep their
    /// ids; novel words are appended. Returns the number of words added.
    pub fn register_task(&mut self, task: usize, labels: &[Vec<String>]) -> Result<usize> {
        if self.woi.contains_key(&task) {
            return contract(format!("task {task} already has a vocabulary entry"));
        }
        for label in labels {
            if label.is_empty() {
                return contract(format!("task {task} has an empty class label"));
            }
            if let Some(w) = label.iter().find(|w| *w == BOS_WORD || *w == EOS_WORD) {
                return contract(format!("label word {w} is reserved"));
            }
        }
        let before = self.len();
        let mut woi = BTreeSet::new();
        let mut seqs = Vec::with_capacity(labels.len());
        for label in labels {
            let ids: Vec<usize> = label.iter().map(|w| self.intern(w)).collect();
            woi.extend(ids.iter().copied());
            seqs.push(ids);
        }
        self.woi.insert(task, woi);
        self.labels.insert(task, seqs);
        Ok(self.len() - before)
    }

    /// Rebuilds a vocabulary from stored parts, validating the invariants.
    pub fn from_parts(
        words: Vec<String>,
        woi: BTreeMap<usize, BTreeSet<usize>>,
        labels: BTreeMap<usize, Vec<Vec<usize>>>,
    ) -> Result<Self> {
        if words.len() < 2 || words[BOS] != BOS_WORD || words[EOS] != EOS_WORD {
            return contract("vocabulary must start with the special tokens");
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return contract(format!("duplicate vocabulary word {w}"));
            }
        }
        let n = words.len();
        let valid = |id: &usize| *id < n && !Self::is_special(*id);
        if !woi.values().all(|s| s.iter().all(valid))
            || !labels
                .values()
                .all(|c| c.iter().all(|l| !l.is_empty() && l.iter().all(valid)))
        {
            return contract("vocabulary task data references unknown ids");
        }
        Ok(Self {
            words,
            index,
            woi,
            labels,
        })
    }

    pub fn woi(&self, task: usize) -> Option<&BTreeSet<usize>> {
        self.woi.get(&task)
    }

    pub fn woi_sets(&self) -> &BTreeMap<usize, BTreeSet<usize>> {
        &self.woi
    }

    pub fn label(&self, task: usize, class: usize) -> Option<&[usize]> {
        self.labels.get(&task)?.get(class).map(Vec::as_slice)
    }

    pub fn labels(&self) -> &BTreeMap<usize, Vec<Vec<usize>>> {
        &self.labels
    }

    pub fn task_count(&self) -> usize {
        self.woi.len()
    }

    /// Space-joined words for a token sequence.
    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
