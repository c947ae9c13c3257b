use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BOS, EOS};

pub const BOS_WORD: &str = "<BOS>";
pub const EOS_WORD: &str = "<EOS>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryDef {
    pub name: String,
    pub term: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDef {
    pub name: String,
    pub categories: Vec<CategoryDef>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaskSpec {
    tasks: Vec<TaskDef>,
}

/// Word ↔ id table. Ids 0 and 1 are BOS and EOS; content words follow in
/// order of first appearance across the task spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn new() -> Self {
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        v.add(BOS_WORD);
        v.add(EOS_WORD);
        v
    }

    fn add(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            self.index.insert(word.to_string(), self.words.len());
            self.words.push(word.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words.get(id).map(String::as_str).ok_or(Error::UnknownToken {
            id,
            size: self.words.len(),
        })
    }

    /// Whitespace-separated words to ids.
    pub fn tokenize(&self, term: &str) -> Result<Vec<usize>> {
        term.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        Ok(ids
            .iter()
            .map(|&id| self.word(id))
            .collect::<Result<Vec<_>>>()?
            .join(" "))
    }
}

/// Validated set of tasks, their categories and the derived vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTaskSpec", into = "RawTaskSpec")]
pub struct TaskSpec {
    tasks: Vec<TaskDef>,
    vocab: Vocabulary,
    offsets: Vec<usize>,
}

impl From<TaskSpec> for RawTaskSpec {
    fn from(s: TaskSpec) -> Self {
        RawTaskSpec { tasks: s.tasks }
    }
}

impl TryFrom<RawTaskSpec> for TaskSpec {
    type Error = Error;

    fn try_from(raw: RawTaskSpec) -> Result<Self> {
        TaskSpec::new(raw.tasks)
    }
}

impl TaskSpec {
    pub fn new(tasks: Vec<TaskDef>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("task spec has no tasks".into()));
        }
        let mut vocab = Vocabulary::new();
        let mut offsets = Vec::with_capacity(tasks.len());
        let mut total = 0;
        for (i, task) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|t| t.name == task.name) {
                return Err(Error::Config(format!("duplicate task name {:?}", task.name)));
            }
            if task.categories.is_empty() {
                return Err(Error::Config(format!("task {:?} has no categories", task.name)));
            }
            let mut seqs: Vec<Vec<&str>> = Vec::new();
            for cat in &task.categories {
                let words: Vec<&str> = cat.term.split_whitespace().collect();
                if words.is_empty() {
                    return Err(Error::Config(format!(
                        "category {:?} of task {:?} has an empty term",
                        cat.name, task.name
                    )));
                }
                if let Some(w) = words.iter().find(|w| **w == BOS_WORD || **w == EOS_WORD) {
                    return Err(Error::Config(format!("term {:?} uses reserved word {w}", cat.term)));
                }
                for other in &seqs {
                    let (short, long) = if other.len() <= words.len() {
                        (other, &words)
                    } else {
                        (&words, other)
                    };
                    if long.starts_with(short) {
                        return Err(Error::Config(format!(
                            "in task {:?}, term {:?} is a prefix of {:?}",
                            task.name,
                            short.join(" "),
                            long.join(" ")
                        )));
                    }
                }
                words.iter().for_each(|w| vocab.add(w));
                seqs.push(words);
            }
            offsets.push(total);
            total += task.categories.len();
        }
        Ok(TaskSpec {
            tasks,
            vocab,
            offsets,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task spec serialises")
    }

    /// Five tasks and eleven categories whose terms use sixteen distinct
    /// words, for an eighteen-entry vocabulary.
    pub fn default_five_task() -> Self {
        let task = |name: &str, cats: &[(&str, &str)]| TaskDef {
            name: name.to_string(),
            categories: cats
                .iter()
                .map(|(n, t)| CategoryDef {
                    name: n.to_string(),
                    term: t.to_string(),
                })
                .collect(),
        };
        TaskSpec::new(vec![
            task("camelyon16", &[("normal", "normal tissue"), ("tumor", "metastatic tumor")]),
            task("brca", &[("idc", "invasive ductal carcinoma"), ("ilc", "invasive lobular carcinoma")]),
            task("esca", &[("ad", "adenocarcinoma"), ("sc", "squamous cell carcinoma")]),
            task("nsclc", &[("luad", "lung adenocarcinoma"), ("lusc", "lung squamous cell carcinoma")]),
            task(
                "rcc",
                &[
                    ("ccrcc", "clear cell renal cell carcinoma"),
                    ("prcc", "papillary renal cell carcinoma"),
                    ("chrcc", "chromophobe renal cell carcinoma"),
                ],
            ),
        ])
        .expect("built-in spec is valid")
    }

    pub fn tasks(&self) -> &[TaskDef] {
        &self.tasks
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, id: usize) -> Result<&TaskDef> {
        self.tasks.get(id).ok_or_else(|| {
            Error::Config(format!("task {id} out of range for {} tasks", self.tasks.len()))
        })
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("unknown task {name:?}")))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn total_categories(&self) -> usize {
        self.tasks.iter().map(|t| t.categories.len()).sum()
    }

    /// Position of `(task, category)` in the flattened category list.
    pub fn global_category(&self, task: usize, category: usize) -> usize {
        self.offsets[task] + category
    }

    /// Inverse of [`global_category`](Self::global_category).
    pub fn split_global(&self, global: usize) -> Option<(usize, usize)> {
        let task = self.offsets.iter().rposition(|&o| o <= global)?;
        let cat = global - self.offsets[task];
        (cat < self.tasks[task].categories.len()).then_some((task, cat))
    }

    /// Category of `task` whose term is exactly `term`.
    pub fn resolve(&self, task: usize, term: &str) -> Option<usize> {
        self.tasks
            .get(task)?
            .categories
            .iter()
            .position(|c| c.term == term)
    }

    pub fn tokenize(&self, term: &str) -> Result<Vec<usize>> {
        self.vocab.tokenize(term)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        self.vocab.detokenize(ids)
    }

    /// `BOS w₁ … w_k EOS` for a label term.
    pub fn target_tokens(&self, term: &str) -> Result<Vec<usize>> {
        let mut ids = self.tokenize(term)?;
        if ids.is_empty() {
            return Err(Error::Contract("label terms must not be empty".into()));
        }
        ids.insert(0, BOS);
        ids.push(EOS);
        Ok(ids)
    }
}
