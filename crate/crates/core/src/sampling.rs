//! Under-sampling strategies used as comparisons for matching: balance by
//! label, by protected group, or across all four label × group cells.

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ClassBased,
    PaBased,
    Wae,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::ClassBased, Strategy::PaBased, Strategy::Wae];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ClassBased => "class_based",
            Strategy::PaBased => "pa_based",
            Strategy::Wae => "wae",
        }
    }

    pub fn apply(self, test: &Dataset, seed: u64) -> Result<SampleSelection> {
        match self {
            Strategy::ClassBased => class_balanced(test, seed),
            Strategy::PaBased => pa_balanced(test, seed),
            Strategy::Wae => wae_balanced(test, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSelection {
    pub strategy: Strategy,
    /// Selected test row ids, ascending.
    pub selected_ids: Vec<u64>,
    pub seed: u64,
}

/// Draws `m` rows from every cell, keeping small cells whole. Cells are
/// sampled in order from one stream.
fn balance(test: &Dataset, cells: &[Vec<usize>], stream: Stream, seed: u64, strategy: Strategy) -> SampleSelection {
    let m = cells.iter().map(Vec::len).min().unwrap_or(0);
    let mut rng = rng::rng_for(seed, stream);
    let mut selected_ids: Vec<u64> = Vec::with_capacity(m * cells.len());
    for cell in cells {
        let picked = if cell.len() == m {
            cell.clone()
        } else {
            rng::sample(&mut rng, cell, m)
        };
        selected_ids.extend(picked.iter().map(|&i| test.row_ids[i]));
    }
    selected_ids.sort_unstable();
    SampleSelection {
        strategy,
        selected_ids,
        seed,
    }
}

fn partition(test: &Dataset, key: impl Fn(usize) -> usize, n_cells: usize) -> Vec<Vec<usize>> {
    let mut cells = vec![Vec::new(); n_cells];
    for i in 0..test.len() {
        cells[key(i)].push(i);
    }
    cells
}

/// Keeps the minority label whole and samples as many rows of the majority.
pub fn class_balanced(test: &Dataset, seed: u64) -> Result<SampleSelection> {
    let cells = partition(test, |i| test.labels[i] as usize, 2);
    if cells.iter().any(Vec::is_empty) {
        return Err(Error::DegenerateDataset("class-based sampling needs both labels".into()));
    }
    Ok(balance(test, &cells, Stream::ClassSample, seed, Strategy::ClassBased))
}

/// Keeps the smaller protected group whole and samples as many of the other.
pub fn pa_balanced(test: &Dataset, seed: u64) -> Result<SampleSelection> {
    let cells = partition(test, |i| test.pa[i] as usize, 2);
    if cells.iter().any(Vec::is_empty) {
        return Err(Error::DegenerateDataset("group-based sampling needs both protected groups".into()));
    }
    Ok(balance(test, &cells, Stream::PaSample, seed, Strategy::PaBased))
}

/// Samples the smallest cell size from each label × group cell.
pub fn wae_balanced(test: &Dataset, seed: u64) -> Result<SampleSelection> {
    let cells = partition(test, |i| 2 * test.labels[i] as usize + test.pa[i] as usize, 4);
    if cells.iter().any(Vec::is_empty) {
        return Err(Error::DegenerateDataset("WAE sampling needs all four label × group cells".into()));
    }
    Ok(balance(test, &cells, Stream::WaeSample, seed, Strategy::Wae))
}
