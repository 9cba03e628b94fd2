//! Per-category support/validation/query pools and pre-generated episodic tasks.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeedTree;
use crate::spans::{MarkedSpan, SpanStore};

pub const SUPPORT_CAP: usize = 30_000;
pub const VALIDATION_CAP: usize = 500;
pub const QUERY_CAP: usize = 400;
pub const VALIDATION_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryPool {
    pub name: String,
    pub support: Vec<MarkedSpan>,
    pub validation: Vec<MarkedSpan>,
    pub query: Vec<MarkedSpan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryPools {
    pub ratio: f64,
    pub categories: Vec<CategoryPool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolCaps {
    pub support: usize,
    pub validation: usize,
    pub query: usize,
}

impl Default for PoolCaps {
    fn default() -> Self {
        Self {
            support: SUPPORT_CAP,
            validation: VALIDATION_CAP,
            query: QUERY_CAP,
        }
    }
}

/// Split sizes before capping: `⌊r·n⌋` support, `⌊0.1·n⌋` validation, the rest query.
pub fn split_sizes(n: usize, ratio: f64) -> (usize, usize, usize) {
    let support = (ratio * n as f64 + 1e-9).floor() as usize;
    let validation = (VALIDATION_FRACTION * n as f64 + 1e-9).floor() as usize;
    (support, validation, n - support - validation)
}

/// Shuffle each listed category with its own seeded stream, split by ratio and truncate to caps.
pub fn build_pools(
    store: &SpanStore,
    categories: &[String],
    ratio: f64,
    min_support: usize,
    caps: PoolCaps,
    seeds: &SeedTree,
) -> Result<CategoryPools> {
    if !(0.3 - 1e-9..=0.8 + 1e-9).contains(&ratio) {
        return Err(Error::invalid(format!("split ratio {ratio} outside [0.3, 0.8]")));
    }
    let mut pools = Vec::with_capacity(categories.len());
    for name in categories {
        let mut spans = store.get(name).to_vec();
        spans.shuffle(&mut seeds.stream(&format!("pool:{name}")));
        let (ns, nv, _) = split_sizes(spans.len(), ratio);
        let mut query = spans.split_off(ns + nv);
        let mut validation = spans.split_off(ns);
        let mut support = spans;
        support.truncate(caps.support);
        validation.truncate(caps.validation);
        query.truncate(caps.query);
        if support.len() < min_support {
            return Err(Error::InsufficientData {
                category: name.clone(),
                available: support.len(),
                required: min_support,
            });
        }
        pools.push(CategoryPool {
            name: name.clone(),
            support,
            validation,
            query,
        });
    }
    Ok(CategoryPools {
        ratio,
        categories: pools,
    })
}

impl CategoryPools {
    pub fn names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CategoryPool> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Keep only the named categories, in the given order.
    pub fn restricted(&self, names: &[String]) -> Result<Self> {
        let categories = names
            .iter()
            .map(|n| {
                self.get(n)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("no pool for category `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            ratio: self.ratio,
            categories,
        })
    }

    /// Up to `per_category` validation spans from each pool, in pool order.
    pub fn validation_set(&self, per_category: usize) -> Vec<MarkedSpan> {
        self.categories
            .iter()
            .flat_map(|c| c.validation.iter().take(per_category).cloned())
            .collect()
    }

    pub fn query_set(&self, per_category: usize) -> Vec<MarkedSpan> {
        self.categories
            .iter()
            .flat_map(|c| c.query.iter().take(per_category).cloned())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTask {
    pub index: usize,
    /// sampled categories, in pool order
    pub categories: Vec<String>,
    pub shots: usize,
    /// `shots` spans per category, grouped in `categories` order
    pub support: Vec<MarkedSpan>,
    pub validation: Vec<MarkedSpan>,
    pub query: Vec<MarkedSpan>,
}

impl EpisodeTask {
    pub fn ways(&self) -> usize {
        self.categories.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub count: usize,
    /// validation and query spans drawn per category for each task
    pub eval_per_category: usize,
}

/// Pre-generate `count` tasks. With `ways` equal to the number of pools every
/// task covers all categories.
pub fn sample_episodes(pools: &CategoryPools, spec: EpisodeSpec, seeds: &SeedTree) -> Result<Vec<EpisodeTask>> {
    let total = pools.categories.len();
    if spec.ways == 0 || spec.ways > total {
        return Err(Error::invalid(format!("{} ways requested from {total} categories", spec.ways)));
    }
    if spec.shots == 0 {
        return Err(Error::invalid("shots must be at least 1"));
    }
    for c in &pools.categories {
        if c.support.len() < spec.shots {
            return Err(Error::InsufficientData {
                category: c.name.clone(),
                available: c.support.len(),
                required: spec.shots,
            });
        }
    }
    (0..spec.count)
        .map(|index| {
            let mut rng = seeds.indexed("episode", index as u64);
            let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, total, spec.ways).into_vec();
            chosen.sort_unstable();
            let mut task = EpisodeTask {
                index,
                categories: Vec::with_capacity(spec.ways),
                shots: spec.shots,
                support: Vec::with_capacity(spec.ways * spec.shots),
                validation: Vec::new(),
                query: Vec::new(),
            };
            for &ci in &chosen {
                let pool = &pools.categories[ci];
                task.categories.push(pool.name.clone());
                task.support
                    .extend(pool.support.choose_multiple(&mut rng, spec.shots).cloned());
                task.validation
                    .extend(draw(&mut rng, &pool.validation, spec.eval_per_category));
                task.query.extend(draw(&mut rng, &pool.query, spec.eval_per_category));
            }
            Ok(task)
        })
        .collect()
}

fn draw<'a>(rng: &mut impl Rng, pool: &'a [MarkedSpan], n: usize) -> impl Iterator<Item = MarkedSpan> + 'a {
    let mut picked: Vec<&MarkedSpan> = pool.choose_multiple(rng, n.min(pool.len())).collect();
    picked.sort_by_key(|s| s.id());
    picked.into_iter().cloned()
}

pub fn task_file_name(index: usize) -> String {
    format!("task_{index:03}.json")
}

pub fn save_tasks(tasks: &[EpisodeTask], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in tasks {
        let path = dir.join(task_file_name(t.index));
        std::fs::write(&path, serde_json::to_vec(t)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_tasks(dir: &Path) -> Result<Vec<EpisodeTask>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("task_") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_slice(&bytes)?)
        })
        .collect()
}
