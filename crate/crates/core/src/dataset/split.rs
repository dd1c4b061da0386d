use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
    }
}

/// Location → split assignment with a per-continent stratification report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub assignments: BTreeMap<String, Split>,
    pub per_continent: BTreeMap<String, SplitCounts>,
}

impl SplitManifest {
    pub fn split_of(&self, location_id: &str) -> Option<Split> {
        self.assignments.get(location_id).copied()
    }

    pub fn totals(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for s in self.assignments.values() {
            c.bump(*s);
        }
        c
    }

    pub fn locations(&self, split: Split) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

/// Global 70/10/20 targets at location granularity. Val and test always get
/// at least one location.
fn targets(n: usize) -> [usize; 3] {
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    let test = ((n as f64 * 0.2).round() as usize).max(1);
    [n - val - test, val, test]
}

/// Continent-stratified 70/10/20 split.
///
/// Locations are shuffled within each continent, continents are laid out one
/// after the other, and each position takes the split with the largest
/// deficit against its running proportional quota. Every prefix (and hence
/// every continent block) stays within one location of its proportional share.
pub fn make_split(locations: &[(String, String)], seed: u64) -> Result<SplitManifest> {
    if locations.len() < 5 {
        return Err(Error::invalid(format!(
            "need at least 5 locations for a train/val/test split, got {}",
            locations.len()
        )));
    }
    let mut by_continent: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, continent) in locations {
        by_continent.entry(continent.as_str()).or_default().push(id.as_str());
    }
    let mut rng = stream_rng(seed, "split");
    let mut ordered: Vec<(&str, &str)> = Vec::with_capacity(locations.len());
    for (continent, ids) in by_continent.iter_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        ordered.extend(ids.iter().map(|id| (*continent, *id)));
    }

    let n = ordered.len();
    let target = targets(n);
    let mut assigned = [0usize; 3];
    let mut assignments = BTreeMap::new();
    for (i, (_, id)) in ordered.iter().enumerate() {
        let prefix = (i + 1) as f64;
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for s in 0..3 {
            if assigned[s] >= target[s] {
                continue;
            }
            let deficit = target[s] as f64 * prefix / n as f64 - assigned[s] as f64;
            if deficit > best_deficit + 1e-12 {
                best = s;
                best_deficit = deficit;
            }
        }
        assigned[best] += 1;
        if assignments.insert(id.to_string(), Split::ALL[best]).is_some() {
            return Err(Error::invalid(format!("duplicate location id {id}")));
        }
    }

    // Continents with at least two locations must appear in train.
    for (continent, ids) in &by_continent {
        if ids.len() < 2 || ids.iter().any(|id| assignments[*id] == Split::Train) {
            continue;
        }
        let donor = ordered.iter().rev().find(|(c, id)| {
            *c != *continent
                && assignments[*id] == Split::Train
                && by_continent[c].iter().filter(|x| assignments[**x] == Split::Train).count() > 1
        });
        if let Some((_, donor_id)) = donor {
            let taker = ids[0];
            let taken = assignments[taker];
            assignments.insert(taker.to_string(), Split::Train);
            assignments.insert(donor_id.to_string(), taken);
        }
    }

    let mut per_continent: BTreeMap<String, SplitCounts> = BTreeMap::new();
    for (continent, id) in &ordered {
        per_continent
            .entry(continent.to_string())
            .or_default()
            .bump(assignments[*id]);
    }
    Ok(SplitManifest {
        seed,
        assignments,
        per_continent,
    })
}
