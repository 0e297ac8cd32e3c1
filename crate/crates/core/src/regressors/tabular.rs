use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: Vec<f64>,
    pub mean: f64,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
struct TabularRepr {
    input_dim: usize,
    default_value: f64,
    cells: Vec<Cell>,
}

/// Per-state sample means; states never seen predict `default_value`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "TabularRepr", into = "TabularRepr")]
pub struct TabularModel {
    input_dim: usize,
    default_value: f64,
    cells: Vec<Cell>,
    index: HashMap<Vec<u64>, usize>,
}

impl PartialEq for TabularModel {
    fn eq(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim
            && self.default_value == other.default_value
            && self.cells == other.cells
    }
}

fn key_bits(x: &[f64]) -> Vec<u64> {
    // Fold -0.0 into 0.0 so both hit the same cell.
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

impl From<TabularRepr> for TabularModel {
    fn from(r: TabularRepr) -> Self {
        let index = r
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| (key_bits(&c.key), i))
            .collect();
        Self {
            input_dim: r.input_dim,
            default_value: r.default_value,
            cells: r.cells,
            index,
        }
    }
}

impl From<TabularModel> for TabularRepr {
    fn from(m: TabularModel) -> Self {
        Self {
            input_dim: m.input_dim,
            default_value: m.default_value,
            cells: m.cells,
        }
    }
}

impl TabularModel {
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], default_value: f64) -> Result<Self> {
        check_dim("targets", inputs.len(), targets.len())?;
        let Some(first) = inputs.first() else {
            return Err(Error::EmptyData(
                "tabular fit needs at least one sample".into(),
            ));
        };
        let input_dim = first.len();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut cells: Vec<Cell> = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        for (x, &y) in inputs.iter().zip(targets) {
            check_dim("tabular input", input_dim, x.len())?;
            let i = *index.entry(key_bits(x)).or_insert_with(|| {
                cells.push(Cell {
                    key: x.clone(),
                    mean: 0.0,
                    count: 0,
                });
                sums.push(0.0);
                cells.len() - 1
            });
            cells[i].count += 1;
            sums[i] += y;
        }
        for (c, s) in cells.iter_mut().zip(sums) {
            c.mean = s / c.count as f64;
        }
        Ok(Self {
            input_dim,
            default_value,
            cells,
            index,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim("tabular input", self.input_dim, x.len())?;
        Ok(self
            .index
            .get(&key_bits(x))
            .map_or(self.default_value, |&i| self.cells[i].mean))
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }
}
