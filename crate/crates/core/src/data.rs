//! Interaction logs to padded training and evaluation examples.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Users with fewer interactions than this are discarded.
pub const MIN_SEQUENCE_LEN: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    pub delimiter: char,
    pub has_header: bool,
    /// Ingestion fails when more than this fraction of rows is malformed.
    pub max_malformed_fraction: f64,
    /// Field positions of user, item and timestamp; other fields are ignored.
    pub columns: [usize; 3],
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            delimiter: ',',
            has_header: false,
            max_malformed_fraction: 0.01,
            columns: [0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub interactions: Vec<Interaction>,
    /// 1-based line numbers of skipped rows.
    pub malformed_lines: Vec<u64>,
}

/// Parses delimited `user, item, timestamp` rows (positions set by
/// `opts.columns`).
///
/// Rows with too few fields (or extra fields under the default 3-column
/// layout), an empty id, or a non-integer timestamp are skipped and
/// reported; too many of them is an error.
pub fn ingest_interactions<R: Read>(source: R, opts: &IngestOptions) -> Result<Ingested> {
    if !opts.delimiter.is_ascii() {
        return Err(Error::Config(format!("delimiter {:?} is not ASCII", opts.delimiter)));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter as u8)
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut interactions = Vec::new();
    let mut malformed_lines = Vec::new();
    let mut total = 0usize;
    for (i, rec) in reader.records().enumerate() {
        total += 1;
        let line = |rec: Option<&csv::StringRecord>| {
            rec.and_then(|r| r.position()).map_or(i as u64 + 1 + u64::from(opts.has_header), |p| p.line())
        };
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                if let csv::ErrorKind::Io(io) = e.kind() {
                    return Err(Error::Data(format!("unreadable source: {io}")));
                }
                malformed_lines.push(e.position().map_or(line(None), |p| p.line()));
                continue;
            }
        };
        let [cu, ci, ct] = opts.columns;
        let width_ok = if opts.columns == [0, 1, 2] {
            rec.len() == 3
        } else {
            rec.len() > cu.max(ci).max(ct)
        };
        let parsed = width_ok
            .then(|| (&rec[cu], &rec[ci], rec[ct].parse::<i64>()))
            .filter(|(u, it, _)| !u.is_empty() && !it.is_empty());
        match parsed {
            Some((user, item, Ok(timestamp))) => interactions.push(Interaction {
                user: user.to_string(),
                item: item.to_string(),
                timestamp,
            }),
            _ => malformed_lines.push(line(Some(&rec))),
        }
    }
    if total > 0 && malformed_lines.len() as f64 > opts.max_malformed_fraction * total as f64 {
        let shown: Vec<String> = malformed_lines.iter().take(20).map(u64::to_string).collect();
        return Err(Error::Data(format!(
            "{} of {total} rows are malformed (limit {:.2}%), lines {}",
            malformed_lines.len(),
            opts.max_malformed_fraction * 100.0,
            shown.join(", ")
        )));
    }
    Ok(Ingested {
        interactions,
        malformed_lines,
    })
}

pub fn ingest_file(path: &Path, opts: &IngestOptions) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_interactions(file, opts)
}

/// Column set of the dataset statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub interactions: usize,
    pub users: usize,
    pub items: usize,
    /// Mean interactions per user.
    pub avg_user_len: f64,
    /// Mean interactions per item.
    pub avg_item_len: f64,
    /// `1 − interactions / (users · items)`, as a fraction.
    pub sparsity: f64,
}

impl DatasetStats {
    pub const CSV_HEADER: &'static str = "interactions,users,items,avg_user_len,avg_item_len,sparsity";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.6}",
            self.interactions, self.users, self.items, self.avg_user_len, self.avg_item_len, self.sparsity
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Original user id for each dense user index.
    pub user_ids: Vec<String>,
    /// Original item id for dense item `i + 1`.
    pub item_ids: Vec<String>,
    /// Per user, dense item ids in chronological order.
    pub sequences: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn stats(&self) -> DatasetStats {
        let interactions: usize = self.sequences.iter().map(Vec::len).sum();
        let (users, items) = (self.num_users(), self.num_items());
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        DatasetStats {
            interactions,
            users,
            items,
            avg_user_len: ratio(interactions, users),
            avg_item_len: ratio(interactions, items),
            sparsity: 1.0 - ratio(interactions, users * items),
        }
    }
}

/// Groups interactions per user, orders each user's items by timestamp
/// (ties keep input order), drops users with fewer than
/// [`MIN_SEQUENCE_LEN`] interactions, then numbers the remaining items
/// `1..` in order of first appearance.
pub fn build_sequences(interactions: &[Interaction]) -> Result<Dataset> {
    if interactions.is_empty() {
        return Err(Error::Data("no interactions".into()));
    }
    let mut user_slot: HashMap<&str, usize> = HashMap::new();
    let mut grouped: Vec<(&str, Vec<&Interaction>)> = Vec::new();
    for it in interactions {
        let slot = *user_slot.entry(it.user.as_str()).or_insert_with(|| {
            grouped.push((it.user.as_str(), Vec::new()));
            grouped.len() - 1
        });
        grouped[slot].1.push(it);
    }
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut item_ids = Vec::new();
    let mut user_ids = Vec::new();
    let mut sequences = Vec::new();
    for (user, mut events) in grouped {
        if events.len() < MIN_SEQUENCE_LEN {
            continue;
        }
        events.sort_by_key(|e| e.timestamp);
        let seq = events
            .iter()
            .map(|e| {
                *item_index.entry(e.item.as_str()).or_insert_with(|| {
                    item_ids.push(e.item.clone());
                    item_ids.len()
                })
            })
            .collect();
        user_ids.push(user.to_string());
        sequences.push(seq);
    }
    if sequences.is_empty() {
        return Err(Error::Data(format!(
            "no user has at least {MIN_SEQUENCE_LEN} interactions"
        )));
    }
    Ok(Dataset {
        user_ids,
        item_ids,
        sequences,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitExample {
    pub user: usize,
    pub input: Vec<usize>,
    pub target: usize,
    pub role: Role,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<SplitExample>,
    pub valid: Vec<SplitExample>,
    pub test: Vec<SplitExample>,
}

/// Leave-one-out split: the last item is the test target, the one before
/// it the validation target, and the one before that the training target.
///
/// With `sliding_window`, every earlier position also becomes a training
/// target (inputs of at least one item).
pub fn split_leave_one_out(dataset: &Dataset, sliding_window: bool) -> Splits {
    let mut out = Splits::default();
    for (user, seq) in dataset.sequences.iter().enumerate() {
        let n = seq.len();
        debug_assert!(n >= 3, "sequences shorter than 3 cannot be split");
        let example = |end: usize, role| SplitExample {
            user,
            input: seq[..end].to_vec(),
            target: seq[end],
            role,
        };
        out.test.push(example(n - 1, Role::Test));
        out.valid.push(example(n - 2, Role::Valid));
        let first = if sliding_window { 1 } else { n - 3 };
        for end in first..=n - 3 {
            out.train.push(example(end, Role::Train));
        }
    }
    out
}

/// Keeps the last `max_len` items and left-pads with `0`.
pub fn pad_truncate(prefix: &[usize], max_len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if prefix.is_empty() {
        return Err(Error::Data("cannot pad an empty sequence".into()));
    }
    let kept = &prefix[prefix.len().saturating_sub(max_len)..];
    let mut items = vec![0; max_len - kept.len()];
    items.extend_from_slice(kept);
    let mask = items.iter().map(|&id| id != 0).collect();
    Ok((items, mask))
}

/// Draws `count` distinct items uniformly from `1..=num_items` excluding
/// `history` and `target`.
pub fn sample_negatives(
    history: &HashSet<usize>,
    target: usize,
    num_items: usize,
    count: usize,
    rng: &mut RngState,
) -> Result<Vec<usize>> {
    let excluded = |id: usize| id == target || history.contains(&id);
    let blocked = history.iter().filter(|&&id| (1..=num_items).contains(&id)).count()
        + usize::from((1..=num_items).contains(&target) && !history.contains(&target));
    let eligible = num_items - blocked;
    if eligible < count {
        return Err(Error::Data(format!(
            "only {eligible} items are eligible as negatives but {count} were requested; use a smaller count"
        )));
    }
    if eligible >= 2 * count {
        let mut chosen = Vec::with_capacity(count);
        let mut seen = HashSet::with_capacity(count);
        while chosen.len() < count {
            let id = rng.random_range(1..=num_items);
            if !excluded(id) && seen.insert(id) {
                chosen.push(id);
            }
        }
        Ok(chosen)
    } else {
        let mut pool: Vec<usize> = (1..=num_items).filter(|&id| !excluded(id)).collect();
        let (picked, _) = pool.partial_shuffle(rng, count);
        Ok(picked.to_vec())
    }
}

/// Index batches over `n` examples; the last batch may be partial.
pub fn make_batches(n: usize, batch_size: usize, shuffle: bool, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Left-padded examples ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B` rows of `N` ids.
    pub items: Vec<Vec<usize>>,
    pub valid_mask: Vec<Vec<bool>>,
    pub targets: Vec<usize>,
    pub users: Vec<usize>,
    pub negatives: Option<Vec<Vec<usize>>>,
}

impl Batch {
    pub fn assemble(examples: &[&SplitExample], max_len: usize) -> Result<Self> {
        let mut batch = Batch {
            items: Vec::with_capacity(examples.len()),
            valid_mask: Vec::with_capacity(examples.len()),
            targets: Vec::with_capacity(examples.len()),
            users: Vec::with_capacity(examples.len()),
            negatives: None,
        };
        for ex in examples {
            if ex.target == 0 {
                return Err(Error::Data(format!("user {} has a padding target", ex.user)));
            }
            let (items, mask) = pad_truncate(&ex.input, max_len)?;
            batch.items.push(items);
            batch.valid_mask.push(mask);
            batch.targets.push(ex.target);
            batch.users.push(ex.user);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Consecutive items modulo the catalog size from a random start.
    #[default]
    Cyclic,
    /// First-order chain over a supplied transition table.
    Markov,
    /// Independent uniform draws.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub pattern: Pattern,
    /// `num_items × num_items` row-stochastic table for [`Pattern::Markov`];
    /// row `i` is the distribution of the item after item `i + 1`.
    pub transition: Option<Vec<Vec<f64>>>,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 50,
            pattern: Pattern::Cyclic,
            transition: None,
            min_len: 8,
            max_len: 20,
        }
    }
}

/// Item following `item` in the cyclic pattern over `1..=num_items`.
pub fn cyclic_next(item: usize, num_items: usize) -> usize {
    item % num_items + 1
}

pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut RngState) -> Result<Dataset> {
    let v = spec.num_items;
    if v < 5 {
        return Err(Error::Config(format!("synthetic catalog needs at least 5 items, got {v}")));
    }
    if spec.num_users == 0 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "synthetic data needs users > 0 and 1 ≤ min_len ≤ max_len, got {} users, lengths {}..={}",
            spec.num_users, spec.min_len, spec.max_len
        )));
    }
    let cumulative: Option<Vec<Vec<f64>>> = match (spec.pattern, &spec.transition) {
        (Pattern::Markov, None) => return Err(Error::Config("markov pattern needs a transition table".into())),
        (Pattern::Markov, Some(table)) => {
            if table.len() != v || table.iter().any(|r| r.len() != v) {
                return Err(Error::Config(format!("transition table must be {v}×{v}")));
            }
            for (i, row) in table.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "transition row {} is not a probability distribution (sum {sum})",
                        i + 1
                    )));
                }
            }
            Some(
                table
                    .iter()
                    .map(|r| {
                        r.iter()
                            .scan(0.0, |acc, &p| {
                                *acc += p;
                                Some(*acc)
                            })
                            .collect()
                    })
                    .collect(),
            )
        }
        _ => None,
    };
    let sequences = (0..spec.num_users)
        .map(|_| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let mut seq = Vec::with_capacity(len);
            let mut cur = rng.random_range(1..=v);
            seq.push(cur);
            while seq.len() < len {
                cur = match spec.pattern {
                    Pattern::Cyclic => cyclic_next(cur, v),
                    Pattern::Uniform => rng.random_range(1..=v),
                    Pattern::Markov => {
                        let row = &cumulative.as_ref().expect("validated")[cur - 1];
                        let u = rng.uniform();
                        row.iter().position(|&c| u < c).unwrap_or(v - 1) + 1
                    }
                };
                seq.push(cur);
            }
            seq
        })
        .collect();
    Ok(Dataset {
        user_ids: (0..spec.num_users).map(|u| format!("u{u}")).collect(),
        item_ids: (1..=v).map(|i| i.to_string()).collect(),
        sequences,
    })
}
