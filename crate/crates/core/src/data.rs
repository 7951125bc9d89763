//! Interaction ingestion, dense id spaces, per-user splitting and popularity statistics.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const NUM_POPULARITY_GROUPS: usize = 10;

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALID_FILE: &str = "valid.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const IDMAP_FILE: &str = "idmap.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delimiter {
    /// Any run of whitespace.
    #[default]
    Whitespace,
    Char(char),
}

impl Delimiter {
    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Whitespace => line.split_whitespace().collect(),
            Delimiter::Char(c) => line.split(*c).map(str::trim).collect(),
        }
    }
}

/// Interaction log with tokens mapped to dense indices in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct RawInteractions {
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    /// `(user index, item index)` in file order, duplicates included.
    pub pairs: Vec<(u32, u32)>,
}

impl RawInteractions {
    pub fn num_users(&self) -> usize {
        self.user_tokens.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_tokens.len()
    }

    /// Builds an interaction list from already-dense indices; tokens are the decimal indices.
    pub fn from_indices(num_users: usize, num_items: usize, pairs: Vec<(u32, u32)>) -> Self {
        Self {
            user_tokens: (0..num_users).map(|u| u.to_string()).collect(),
            item_tokens: (0..num_items).map(|i| i.to_string()).collect(),
            pairs,
        }
    }
}

pub fn load_interactions(path: &Path, delimiter: Delimiter) -> Result<RawInteractions> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(file, path, delimiter)
}

pub fn parse_interactions<R: Read>(
    reader: R,
    path: &Path,
    delimiter: Delimiter,
) -> Result<RawInteractions> {
    let mut users: HashMap<String, u32> = HashMap::new();
    let mut items: HashMap<String, u32> = HashMap::new();
    let mut raw = RawInteractions::default();

    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields = delimiter.split(trimmed);
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(
                path,
                lineno + 1,
                "expected at least a user and an item column",
            ));
        }
        let u = intern(&mut users, &mut raw.user_tokens, fields[0]);
        let i = intern(&mut items, &mut raw.item_tokens, fields[1]);
        raw.pairs.push((u, i));
    }

    if raw.pairs.is_empty() {
        return Err(Error::Data(format!(
            "{}: no interactions found",
            path.display()
        )));
    }
    Ok(raw)
}

fn intern(map: &mut HashMap<String, u32>, tokens: &mut Vec<String>, token: &str) -> u32 {
    if let Some(&idx) = map.get(token) {
        return idx;
    }
    let idx = tokens.len() as u32;
    tokens.push(token.to_owned());
    map.insert(token.to_owned(), idx);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 7,
            validation: 1,
            test: 2,
        }
    }
}

impl SplitRatio {
    /// Per-user `(train, validation, test)` sizes for a user with `n` distinct interactions.
    ///
    /// Held-out sizes are rounded half-up; users with fewer than three interactions keep
    /// everything in train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        if n < 3 {
            return (n, 0, 0);
        }
        let total = (self.train + self.validation + self.test) as usize;
        let round = |part: u32| (2 * n * part as usize + total) / (2 * total);
        let test = round(self.test);
        let validation = round(self.validation);
        (n - test - validation, validation, test)
    }
}

/// Immutable train/validation/test split over dense user and item ids.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<(u32, u32)>,
    pub validation: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    pub item_popularity: Vec<u32>,
    pub user_popularity: Vec<u32>,
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
}

impl InteractionDataset {
    pub fn new(
        num_users: usize,
        num_items: usize,
        mut train: Vec<(u32, u32)>,
        mut validation: Vec<(u32, u32)>,
        mut test: Vec<(u32, u32)>,
        user_tokens: Vec<String>,
        item_tokens: Vec<String>,
    ) -> Result<Self> {
        for (name, split) in [("train", &train), ("validation", &validation), ("test", &test)] {
            if let Some(&(u, i)) = split
                .iter()
                .find(|&&(u, i)| u as usize >= num_users || i as usize >= num_items)
            {
                return Err(Error::Data(format!(
                    "{name} pair ({u}, {i}) outside {num_users} users x {num_items} items"
                )));
            }
        }
        train.sort_unstable();
        train.dedup();
        validation.sort_unstable();
        validation.dedup();
        test.sort_unstable();
        test.dedup();

        let mut item_popularity = vec![0u32; num_items];
        let mut user_popularity = vec![0u32; num_users];
        for &(u, i) in &train {
            user_popularity[u as usize] += 1;
            item_popularity[i as usize] += 1;
        }
        Ok(Self {
            num_users,
            num_items,
            train,
            validation,
            test,
            item_popularity,
            user_popularity,
            user_tokens,
            item_tokens,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_interactions(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn density(&self) -> f64 {
        self.num_interactions() as f64 / (self.num_users as f64 * self.num_items as f64)
    }

    /// Copy whose train split is train ∪ validation and whose validation split is empty,
    /// for fitting a final model after hyperparameters are chosen.
    pub fn merge_validation(&self) -> Self {
        let mut train = self.train.clone();
        train.extend_from_slice(&self.validation);
        InteractionDataset::new(
            self.num_users,
            self.num_items,
            train,
            Vec::new(),
            self.test.clone(),
            self.user_tokens.clone(),
            self.item_tokens.clone(),
        )
        .expect("merged splits stay within the id space")
    }

    pub fn train_index(&self) -> UserItems {
        UserItems::new(self.num_users, &self.train)
    }

    pub fn validation_index(&self) -> UserItems {
        UserItems::new(self.num_users, &self.validation)
    }

    pub fn test_index(&self) -> UserItems {
        UserItems::new(self.num_users, &self.test)
    }

    pub fn write_splits(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_pairs(&dir.join(TRAIN_FILE), &self.train)?;
        write_pairs(&dir.join(VALID_FILE), &self.validation)?;
        write_pairs(&dir.join(TEST_FILE), &self.test)?;

        let path = dir.join(IDMAP_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&path, e);
        for (idx, tok) in self.user_tokens.iter().enumerate() {
            writeln!(w, "user\t{tok}\t{idx}").map_err(io)?;
        }
        for (idx, tok) in self.item_tokens.iter().enumerate() {
            writeln!(w, "item\t{tok}\t{idx}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_splits(dir: &Path) -> Result<Self> {
        let path = dir.join(IDMAP_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut user_tokens = Vec::new();
        let mut item_tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::parse(&path, lineno + 1, "expected `kind<TAB>token<TAB>index`");
            if fields.len() != 3 {
                return Err(bad());
            }
            let idx: usize = fields[2].parse().map_err(|_| bad())?;
            let tokens = match fields[0] {
                "user" => &mut user_tokens,
                "item" => &mut item_tokens,
                _ => return Err(bad()),
            };
            if idx != tokens.len() {
                return Err(Error::parse(&path, lineno + 1, "indices must be contiguous"));
            }
            tokens.push(fields[1].to_owned());
        }
        let train = read_pairs(&dir.join(TRAIN_FILE))?;
        let validation = read_pairs(&dir.join(VALID_FILE))?;
        let test = read_pairs(&dir.join(TEST_FILE))?;
        InteractionDataset::new(
            user_tokens.len(),
            item_tokens.len(),
            train,
            validation,
            test,
            user_tokens,
            item_tokens,
        )
    }
}

fn write_pairs(path: &Path, pairs: &[(u32, u32)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &(u, i) in pairs {
        writeln!(w, "{u}\t{i}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_pairs(path: &Path) -> Result<Vec<(u32, u32)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let parsed = match (it.next(), it.next()) {
            (Some(u), Some(i)) => u.trim().parse().ok().zip(i.trim().parse().ok()),
            _ => None,
        };
        match parsed {
            Some(pair) => out.push(pair),
            None => {
                return Err(Error::parse(
                    PathBuf::from(path),
                    lineno + 1,
                    "expected `user<TAB>item` indices",
                ))
            }
        }
    }
    Ok(out)
}

/// Per-user sorted item lists for membership tests.
#[derive(Debug, Clone)]
pub struct UserItems {
    items: Vec<Vec<u32>>,
}

impl UserItems {
    pub fn new(num_users: usize, pairs: &[(u32, u32)]) -> Self {
        let mut items = vec![Vec::new(); num_users];
        for &(u, i) in pairs {
            items[u as usize].push(i);
        }
        for list in &mut items {
            list.sort_unstable();
            list.dedup();
        }
        Self { items }
    }

    #[inline]
    pub fn items(&self, user: usize) -> &[u32] {
        &self.items[user]
    }

    #[inline]
    pub fn contains(&self, user: usize, item: u32) -> bool {
        self.items[user].binary_search(&item).is_ok()
    }

    pub fn num_users(&self) -> usize {
        self.items.len()
    }
}

/// Deduplicates, then splits every user's interactions independently at `ratio`.
pub fn split_dataset(raw: &RawInteractions, ratio: SplitRatio, seed: u64) -> InteractionDataset {
    let per_user = UserItems::new(raw.num_users(), &raw.pairs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());

    for u in 0..raw.num_users() {
        let mut items = per_user.items(u).to_vec();
        let (n_train, n_valid, _) = ratio.sizes(items.len());
        items.shuffle(&mut rng);
        for (k, &i) in items.iter().enumerate() {
            let pair = (u as u32, i);
            if k < n_train {
                train.push(pair);
            } else if k < n_train + n_valid {
                validation.push(pair);
            } else {
                test.push(pair);
            }
        }
    }

    InteractionDataset::new(
        raw.num_users(),
        raw.num_items(),
        train,
        validation,
        test,
        raw.user_tokens.clone(),
        raw.item_tokens.clone(),
    )
    .expect("split pairs come from the interaction id space")
}

/// Items bucketed into ten groups of (roughly) equal test-interaction mass, ordered by
/// training popularity. Group ids run 1..=10, larger means more popular.
#[derive(Debug, Clone)]
pub struct PopularityGroups {
    pub group_of_item: Vec<u8>,
    /// Largest training popularity inside each group (0 for an empty group).
    pub boundaries: [u32; NUM_POPULARITY_GROUPS],
    /// Test interactions that fall in each group.
    pub test_counts: [usize; NUM_POPULARITY_GROUPS],
}

impl PopularityGroups {
    #[inline]
    pub fn group(&self, item: u32) -> u8 {
        self.group_of_item[item as usize]
    }
}

pub fn build_popularity_groups(dataset: &InteractionDataset) -> Result<PopularityGroups> {
    let mut test_mass = vec![0usize; dataset.num_items];
    for &(_, i) in &dataset.test {
        test_mass[i as usize] += 1;
    }
    let distinct = test_mass.iter().filter(|&&c| c > 0).count();
    if distinct < NUM_POPULARITY_GROUPS {
        return Err(Error::Data(format!(
            "popularity groups need at least {NUM_POPULARITY_GROUPS} distinct test items, found {distinct}"
        )));
    }
    let total = dataset.test.len();

    let mut order: Vec<u32> = (0..dataset.num_items as u32).collect();
    order.sort_by_key(|&i| (dataset.item_popularity[i as usize], i));

    let mut group_of_item = vec![0u8; dataset.num_items];
    let mut boundaries = [0u32; NUM_POPULARITY_GROUPS];
    let mut test_counts = [0usize; NUM_POPULARITY_GROUPS];
    let mut cumulative = 0usize;
    for &item in &order {
        // An item joins the bucket holding its first test interaction on the mass line.
        let g = ((NUM_POPULARITY_GROUPS * cumulative) / total).min(NUM_POPULARITY_GROUPS - 1);
        group_of_item[item as usize] = g as u8 + 1;
        boundaries[g] = boundaries[g].max(dataset.item_popularity[item as usize]);
        test_counts[g] += test_mass[item as usize];
        cumulative += test_mass[item as usize];
    }

    Ok(PopularityGroups {
        group_of_item,
        boundaries,
        test_counts,
    })
}
