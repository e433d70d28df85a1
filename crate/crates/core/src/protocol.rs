//! Category hold-out splits, cross-dataset exclusion splits and training-set
//! subsampling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::annotations::{CategoryId, CategoryRecord, Dataset};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryOrdering {
    #[default]
    AscendingId,
    /// Order categories appear in the dataset's category list.
    ListOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_splits: usize,
    #[serde(default)]
    pub ordering: CategoryOrdering,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_splits: 4,
            ordering: CategoryOrdering::AscendingId,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySplit {
    pub split_index: usize,
    pub train_category_ids: BTreeSet<CategoryId>,
    pub heldout_category_ids: BTreeSet<CategoryId>,
}

impl CategorySplit {
    pub fn is_heldout(&self, id: CategoryId) -> bool {
        self.heldout_category_ids.contains(&id)
    }

    pub fn universe(&self) -> BTreeSet<CategoryId> {
        self.train_category_ids
            .union(&self.heldout_category_ids)
            .copied()
            .collect()
    }
}

/// Stripes categories into `n_splits` hold-out groups: the category at sorted
/// position `i` is held out in split `i % n_splits` and used for training in
/// every other split.
pub fn make_splits(categories: &[CategoryRecord], spec: &SplitSpec) -> Result<Vec<CategorySplit>> {
    if spec.n_splits < 2 {
        return Err(Error::Config(format!(
            "n_splits must be at least 2, got {}",
            spec.n_splits
        )));
    }
    if categories.len() < spec.n_splits {
        return Err(Error::Config(format!(
            "{} categories cannot fill {} splits",
            categories.len(),
            spec.n_splits
        )));
    }
    let mut ordered: Vec<CategoryId> = categories.iter().map(|c| c.id).collect();
    if spec.ordering == CategoryOrdering::AscendingId {
        ordered.sort_unstable();
    }
    Ok((0..spec.n_splits)
        .map(|s| {
            let (heldout, train): (Vec<_>, Vec<_>) = ordered
                .iter()
                .enumerate()
                .partition(|(i, _)| i % spec.n_splits == s);
            CategorySplit {
                split_index: s,
                train_category_ids: train.into_iter().map(|(_, &c)| c).collect(),
                heldout_category_ids: heldout.into_iter().map(|(_, &c)| c).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPhase {
    Train,
    Eval,
}

/// A dataset together with the split it was prepared for.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub dataset: Dataset,
    pub split: CategorySplit,
    pub phase: SplitPhase,
}

/// Prepares a dataset for one phase of a split. Training removes every
/// held-out annotation and then every image without annotations; evaluation
/// keeps the dataset as is.
pub fn apply_split(ds: &Dataset, split: &CategorySplit, phase: SplitPhase) -> Result<SplitDataset> {
    let known = ds.category_ids();
    if let Some(&unknown) = split.universe().iter().find(|c| !known.contains(c)) {
        return Err(Error::UnknownCategory(unknown));
    }
    let mut dataset = ds.clone();
    if phase == SplitPhase::Train {
        dataset
            .annotations
            .retain(|a| !split.heldout_category_ids.contains(&a.category_id));
        dataset.drop_unannotated_images();
    }
    Ok(SplitDataset {
        dataset,
        split: split.clone(),
        phase,
    })
}

/// Builds a split of `ds` that holds out every category whose counterpart in
/// another dataset is held out by `external_split`. Categories without a
/// counterpart, or whose counterpart is an external training category, are
/// used for training.
pub fn make_exclusion_split(
    ds: &Dataset,
    correspondence: &BTreeMap<CategoryId, CategoryId>,
    external_split: &CategorySplit,
) -> Result<CategorySplit> {
    let known = ds.category_ids();
    if let Some(&unknown) = correspondence.keys().find(|c| !known.contains(c)) {
        return Err(Error::UnknownCategory(unknown));
    }
    let external = external_split.universe();
    if let Some((src, dst)) = correspondence.iter().find(|(_, d)| !external.contains(d)) {
        return Err(Error::Protocol(format!(
            "category {src} maps to {dst}, which is not in the external split"
        )));
    }
    let heldout: BTreeSet<CategoryId> = correspondence
        .iter()
        .filter(|(_, dst)| external_split.is_heldout(**dst))
        .map(|(&src, _)| src)
        .collect();
    Ok(CategorySplit {
        split_index: external_split.split_index,
        train_category_ids: known.difference(&heldout).copied().collect(),
        heldout_category_ids: heldout,
    })
}

/// Reads a two-column `source_id,target_id` CSV. A non-numeric first row is
/// treated as a header.
pub fn read_correspondence_csv(path: impl AsRef<Path>) -> Result<BTreeMap<CategoryId, CategoryId>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut map = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 2 {
            return Err(Error::Config(format!(
                "{}: row {} has {} columns, expected 2",
                path.display(),
                row + 1,
                record.len()
            )));
        }
        let parsed = (record[0].parse::<u64>(), record[1].parse::<u64>());
        let (src, dst) = match parsed {
            (Ok(s), Ok(d)) => (CategoryId(s), CategoryId(d)),
            _ if row == 0 => continue,
            _ => {
                return Err(Error::Config(format!(
                    "{}: row {} is not a pair of integer ids",
                    path.display(),
                    row + 1
                )))
            }
        };
        if map.insert(src, dst).is_some() {
            return Err(Error::Config(format!(
                "{}: source category {src} mapped twice",
                path.display()
            )));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleMode {
    /// Seeded uniform sample of categories, all their instances.
    CategoryFraction,
    /// Same categories as `CategoryFraction`; its instance count is the budget.
    InstanceMatchedSubset,
    /// All categories, instances sampled down to the subset mode's budget.
    InstanceMatchedAll,
}

impl SubsampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SubsampleMode::CategoryFraction => "category_fraction",
            SubsampleMode::InstanceMatchedSubset => "instance_matched_subset",
            SubsampleMode::InstanceMatchedAll => "instance_matched_all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub mode: SubsampleMode,
    pub fraction: f64,
    pub seed: u64,
    /// `InstanceMatchedAll` only: spread the budget evenly over categories
    /// instead of sampling uniformly over instances.
    #[serde(default)]
    pub per_category_quota: bool,
}

impl SubsampleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subsample fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Subsample {
    pub dataset: Dataset,
    pub kept_categories: BTreeSet<CategoryId>,
    pub instance_budget: usize,
}

/// Number of categories kept at `fraction`; tolerant of products such as
/// `0.3 * 10` landing a hair above an integer.
pub fn categories_at_fraction(n_categories: usize, fraction: f64) -> usize {
    (fraction * n_categories as f64 - 1e-9).ceil().max(0.0) as usize
}

pub fn subsample_training_set(
    ds: &Dataset,
    train_cats: &BTreeSet<CategoryId>,
    spec: &SubsampleSpec,
) -> Result<Subsample> {
    spec.validate()?;
    if let Some(a) = ds
        .annotations
        .iter()
        .find(|a| !train_cats.contains(&a.category_id))
    {
        return Err(Error::Protocol(format!(
            "annotation {} has category {} outside the training categories",
            a.id, a.category_id
        )));
    }
    let n_keep = categories_at_fraction(train_cats.len(), spec.fraction);
    if n_keep == 0 {
        return Err(Error::Config(format!(
            "fraction {} of {} categories keeps none",
            spec.fraction,
            train_cats.len()
        )));
    }

    let ordered: Vec<CategoryId> = train_cats.iter().copied().collect();
    let mut rng = seed::derived_rng(spec.seed, &[seed::tag("categories")]);
    let kept: BTreeSet<CategoryId> = sample(&mut rng, ordered.len(), n_keep)
        .into_iter()
        .map(|i| ordered[i])
        .collect();
    let budget = ds
        .annotations
        .iter()
        .filter(|a| kept.contains(&a.category_id))
        .count();

    let mut dataset = ds.clone();
    match spec.mode {
        SubsampleMode::CategoryFraction | SubsampleMode::InstanceMatchedSubset => {
            dataset
                .annotations
                .retain(|a| kept.contains(&a.category_id));
        }
        SubsampleMode::InstanceMatchedAll => {
            if budget > ds.annotations.len() {
                return Err(Error::Protocol(format!(
                    "instance budget {budget} exceeds the {} available annotations",
                    ds.annotations.len()
                )));
            }
            let mut rng = seed::derived_rng(spec.seed, &[seed::tag("instances")]);
            let chosen = if spec.per_category_quota {
                quota_sample(ds, &ordered, budget, &mut rng)
            } else {
                sample(&mut rng, ds.annotations.len(), budget).into_vec()
            };
            let mut keep = vec![false; ds.annotations.len()];
            for i in chosen {
                keep[i] = true;
            }
            let mut flags = keep.into_iter();
            dataset
                .annotations
                .retain(|_| flags.next().unwrap_or(false));
        }
    }
    dataset.drop_unannotated_images();
    let kept_categories = match spec.mode {
        SubsampleMode::InstanceMatchedAll => {
            dataset.annotations.iter().map(|a| a.category_id).collect()
        }
        _ => kept,
    };
    Ok(Subsample {
        dataset,
        kept_categories,
        instance_budget: budget,
    })
}

/// Splits `budget` as evenly as possible over categories (capped by what each
/// has), then samples uniformly within each category.
fn quota_sample(
    ds: &Dataset,
    categories: &[CategoryId],
    budget: usize,
    rng: &mut seed::Rng,
) -> Vec<usize> {
    let mut pools: BTreeMap<CategoryId, Vec<usize>> =
        categories.iter().map(|&c| (c, Vec::new())).collect();
    for (i, a) in ds.annotations.iter().enumerate() {
        pools.entry(a.category_id).or_default().push(i);
    }
    let mut quota: BTreeMap<CategoryId, usize> = pools.keys().map(|&c| (c, 0)).collect();
    let mut left = budget;
    while left > 0 {
        let mut progressed = false;
        for (c, q) in quota.iter_mut() {
            if left == 0 {
                break;
            }
            if *q < pools[c].len() {
                *q += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let mut chosen = Vec::with_capacity(budget);
    for (c, pool) in &pools {
        chosen.extend(
            sample(rng, pool.len(), quota[c])
                .into_iter()
                .map(|i| pool[i]),
        );
    }
    chosen
}

/// JSON record describing one split or one subsampled training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split_index: usize,
    pub train_category_ids: BTreeSet<CategoryId>,
    pub heldout_category_ids: BTreeSet<CategoryId>,
    pub seed: Option<u64>,
    pub mode: Option<SubsampleMode>,
    pub fraction: Option<f64>,
    pub instance_budget: Option<usize>,
}

impl SplitManifest {
    pub fn from_split(split: &CategorySplit) -> Self {
        Self {
            split_index: split.split_index,
            train_category_ids: split.train_category_ids.clone(),
            heldout_category_ids: split.heldout_category_ids.clone(),
            seed: None,
            mode: None,
            fraction: None,
            instance_budget: None,
        }
    }

    pub fn from_subsample(split: &CategorySplit, spec: &SubsampleSpec, sub: &Subsample) -> Self {
        Self {
            train_category_ids: sub.kept_categories.clone(),
            seed: Some(spec.seed),
            mode: Some(spec.mode),
            fraction: Some(spec.fraction),
            instance_budget: Some(sub.instance_budget),
            ..Self::from_split(split)
        }
    }

    pub fn to_split(&self) -> CategorySplit {
        CategorySplit {
            split_index: self.split_index,
            train_category_ids: self.train_category_ids.clone(),
            heldout_category_ids: self.heldout_category_ids.clone(),
        }
    }
}
