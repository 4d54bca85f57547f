//! Position-bias probe over padded frame grids.
//!
//! An m-by-m block of task frames is embedded at varying offsets inside an
//! M-by-M grid of blank cells, the grid is flattened row-major into a frame
//! sequence, and an answer oracle is scored at every placement. Accuracy is
//! reported against the L1 distance between the content block and a fixed
//! query point, which makes positional bias visible as a dip in the curve.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProbeError {
    #[error("grid side {grid_side} cannot hold content side {content_side}")]
    GridShape {
        content_side: usize,
        grid_side: usize,
    },
    #[error("query point ({row}, {col}) outside a grid of side {side}")]
    QueryOutOfRange { row: usize, col: usize, side: usize },
    #[error("offset ({row}, {col}) does not fit the content block")]
    InvalidOffset { row: usize, col: usize },
    #[error("cell ({row}, {col}) outside a grid of side {side}")]
    OutOfGrid { row: usize, col: usize, side: usize },
    #[error("no tasks to evaluate")]
    EmptyTasks,
    #[error("task '{task_id}': {reason}")]
    BadTask { task_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryPoint {
    Cell { row: usize, col: usize },
    /// Just past the bottom-right corner, where the question follows the
    /// frame sequence; clamped to (M-1, M-1) for distance purposes.
    AfterEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlankFill {
    MidGray,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeGrid {
    pub content_side: usize,
    pub grid_side: usize,
    pub query_point: QueryPoint,
    pub blank_fill: BlankFill,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        ProbeGrid {
            content_side: 4,
            grid_side: 12,
            query_point: QueryPoint::AfterEnd,
            blank_fill: BlankFill::MidGray,
        }
    }
}

impl ProbeGrid {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.content_side < 1 || self.grid_side < self.content_side {
            return Err(ProbeError::GridShape {
                content_side: self.content_side,
                grid_side: self.grid_side,
            });
        }
        if let QueryPoint::Cell { row, col } = self.query_point {
            if row >= self.grid_side || col >= self.grid_side {
                return Err(ProbeError::QueryOutOfRange {
                    row,
                    col,
                    side: self.grid_side,
                });
            }
        }
        Ok(())
    }

    /// The concrete cell distances are measured against.
    pub fn query_cell(&self) -> (usize, usize) {
        match self.query_point {
            QueryPoint::Cell { row, col } => (row, col),
            QueryPoint::AfterEnd => (self.grid_side - 1, self.grid_side - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub task_id: String,
    /// Row-major content frames, exactly content_side² of them.
    pub frames: Vec<String>,
    pub question: String,
    pub options: Vec<String>,
    pub gold: String,
}

impl ProbeTask {
    pub fn validate(&self, grid: &ProbeGrid) -> Result<(), ProbeError> {
        let expected = grid.content_side * grid.content_side;
        if self.frames.len() != expected {
            return Err(ProbeError::BadTask {
                task_id: self.task_id.clone(),
                reason: format!("{} frames, expected {expected}", self.frames.len()),
            });
        }
        if !self.options.contains(&self.gold) {
            return Err(ProbeError::BadTask {
                task_id: self.task_id.clone(),
                reason: "gold answer not among options".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementMode {
    Exhaustive,
    Sampled { count: usize, seed: u64 },
}

/// Top-left offsets for the content block: all (M-m+1)² of them in row-major
/// order, or a seeded uniform sample of that set.
pub fn enumerate_placements(
    grid: &ProbeGrid,
    mode: PlacementMode,
) -> Result<Vec<(usize, usize)>, ProbeError> {
    grid.validate()?;
    let span = grid.grid_side - grid.content_side + 1;
    match mode {
        PlacementMode::Exhaustive => {
            let mut offsets = Vec::with_capacity(span * span);
            for row in 0..span {
                for col in 0..span {
                    offsets.push((row, col));
                }
            }
            Ok(offsets)
        }
        PlacementMode::Sampled { count, seed } => {
            let mut rng = crate::seed::rng(seed);
            Ok((0..count)
                .map(|_| (rng.random_range(0..span), rng.random_range(0..span)))
                .collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellContent {
    /// Index into the task's frame list.
    Frame(usize),
    Blank(BlankFill),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaddedCell {
    pub row: usize,
    pub col: usize,
    pub content: CellContent,
}

/// Flattens the padded grid row-major: M² cells, content frames at the
/// offset block, blanks elsewhere.
pub fn build_padded_sequence(
    task: &ProbeTask,
    grid: &ProbeGrid,
    offset: (usize, usize),
) -> Result<Vec<PaddedCell>, ProbeError> {
    grid.validate()?;
    task.validate(grid)?;
    let m = grid.content_side;
    let side = grid.grid_side;
    if offset.0 + m > side || offset.1 + m > side {
        return Err(ProbeError::InvalidOffset {
            row: offset.0,
            col: offset.1,
        });
    }
    let mut cells = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let in_block = (offset.0..offset.0 + m).contains(&row)
                && (offset.1..offset.1 + m).contains(&col);
            let content = if in_block {
                let local = (row - offset.0) * m + (col - offset.1);
                CellContent::Frame(local)
            } else {
                CellContent::Blank(grid.blank_fill)
            };
            cells.push(PaddedCell { row, col, content });
        }
    }
    Ok(cells)
}

pub fn l1_distance(
    cell: (usize, usize),
    query: (usize, usize),
    grid_side: usize,
) -> Result<u32, ProbeError> {
    for (row, col) in [cell, query] {
        if row >= grid_side || col >= grid_side {
            return Err(ProbeError::OutOfGrid {
                row,
                col,
                side: grid_side,
            });
        }
    }
    let dr = cell.0.abs_diff(query.0);
    let dc = cell.1.abs_diff(query.1);
    Ok((dr + dc) as u32)
}

pub trait ProbeOracle: Sync {
    fn answer(&self, task: &ProbeTask, sequence: &[PaddedCell]) -> String;
}

/// Reads the answer out of the content frames and nowhere else, so its
/// accuracy cannot depend on placement. Frames carry their label as a
/// `gold=<label>` suffix; see the fixture generators.
pub struct ContentOnlyOracle;

impl ProbeOracle for ContentOnlyOracle {
    fn answer(&self, task: &ProbeTask, sequence: &[PaddedCell]) -> String {
        for cell in sequence {
            if let CellContent::Frame(i) = cell.content {
                if let Some(label) = task.frames[i].split("gold=").nth(1) {
                    return label.to_string();
                }
            }
        }
        String::new()
    }
}

/// Answers correctly with probability base - depth * exp(-((d - center) /
/// width)²) where d is the placement's mean content distance. Used to check
/// the probe recovers a known dip.
pub struct PlantedDipOracle {
    pub grid: ProbeGrid,
    pub center: f64,
    pub depth: f64,
    pub base: f64,
    pub width: f64,
    pub seed: u64,
}

impl PlantedDipOracle {
    pub fn new(grid: ProbeGrid, center: f64, seed: u64) -> Self {
        PlantedDipOracle {
            grid,
            center,
            depth: 0.4,
            base: 0.9,
            width: 3.0,
            seed,
        }
    }

    pub fn accuracy_at(&self, distance: f64) -> f64 {
        let z = (distance - self.center) / self.width;
        self.base - self.depth * (-z * z).exp()
    }
}

fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl ProbeOracle for PlantedDipOracle {
    fn answer(&self, task: &ProbeTask, sequence: &[PaddedCell]) -> String {
        let query = self.grid.query_cell();
        let mut sum = 0u64;
        let mut count = 0u64;
        let mut top_left = (usize::MAX, usize::MAX);
        for cell in sequence {
            if matches!(cell.content, CellContent::Frame(_)) {
                let d = l1_distance((cell.row, cell.col), query, self.grid.grid_side)
                    .unwrap_or(0);
                sum += u64::from(d);
                count += 1;
                top_left = (top_left.0.min(cell.row), top_left.1.min(cell.col));
            }
        }
        if count == 0 {
            return String::new();
        }
        let mean = sum as f64 / count as f64;
        let key = crate::seed::derive_path(
            self.seed,
            &[fnv1a(&task.task_id), top_left.0 as u64, top_left.1 as u64],
        );
        let mut rng = crate::seed::rng(key);
        if rng.random_bool(self.accuracy_at(mean).clamp(0.0, 1.0)) {
            task.gold.clone()
        } else {
            task.options
                .iter()
                .find(|o| **o != task.gold)
                .cloned()
                .unwrap_or_else(|| format!("not {}", task.gold))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub task_id: String,
    pub offset_row: usize,
    pub offset_col: usize,
    pub mean_l1: f64,
    pub min_l1: u32,
    pub max_l1: u32,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub grid: ProbeGrid,
    pub records: Vec<PlacementRecord>,
    /// Accuracy binned by the rounded mean content distance per placement.
    pub mean_bins: BTreeMap<u32, BinStat>,
    /// Accuracy binned by each content frame's own distance; every frame of
    /// an evaluation contributes its correctness to its own bin.
    pub frame_bins: BTreeMap<u32, BinStat>,
    /// Accuracy with no padding (content fills the whole grid).
    pub upper_bound_accuracy: f64,
    pub total_evaluations: usize,
}

impl ProbeReport {
    /// Flat export of the mean-distance curve: `bin,accuracy,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,accuracy,count\n");
        for (bin, stat) in &self.mean_bins {
            out.push_str(&format!("{bin},{:.6},{}\n", stat.accuracy, stat.count));
        }
        out
    }
}

/// Evaluates `oracle` on every (task, placement) pair plus the no-padding
/// upper bound. Work is concurrent; the report is reduced in (task_id,
/// offset) order so output is deterministic.
pub fn run_probe(
    oracle: &dyn ProbeOracle,
    tasks: &[ProbeTask],
    grid: &ProbeGrid,
    mode: PlacementMode,
) -> Result<ProbeReport, ProbeError> {
    if tasks.is_empty() {
        return Err(ProbeError::EmptyTasks);
    }
    grid.validate()?;
    for task in tasks {
        task.validate(grid)?;
    }
    let placements = enumerate_placements(grid, mode)?;
    let query = grid.query_cell();

    use rayon::prelude::*;
    let pairs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..placements.len()).map(move |p| (t, p)))
        .collect();
    let mut evaluated: Vec<(PlacementRecord, Vec<u32>)> = pairs
        .par_iter()
        .map(|&(t, p)| {
            let task = &tasks[t];
            let offset = placements[p];
            let sequence = build_padded_sequence(task, grid, offset)?;
            let mut distances = Vec::with_capacity(grid.content_side * grid.content_side);
            for cell in &sequence {
                if matches!(cell.content, CellContent::Frame(_)) {
                    distances.push(l1_distance((cell.row, cell.col), query, grid.grid_side)?);
                }
            }
            let answer = oracle.answer(task, &sequence);
            let sum: u64 = distances.iter().map(|&d| u64::from(d)).sum();
            let record = PlacementRecord {
                task_id: task.task_id.clone(),
                offset_row: offset.0,
                offset_col: offset.1,
                mean_l1: sum as f64 / distances.len() as f64,
                min_l1: *distances.iter().min().expect("content block non-empty"),
                max_l1: *distances.iter().max().expect("content block non-empty"),
                correct: answer == task.gold,
            };
            Ok((record, distances))
        })
        .collect::<Result<_, ProbeError>>()?;
    evaluated.sort_by(|a, b| {
        (&a.0.task_id, a.0.offset_row, a.0.offset_col)
            .cmp(&(&b.0.task_id, b.0.offset_row, b.0.offset_col))
    });

    let mut mean_hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut frame_hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (record, distances) in &evaluated {
        let bin = record.mean_l1.round() as u32;
        let entry = mean_hits.entry(bin).or_default();
        entry.1 += 1;
        if record.correct {
            entry.0 += 1;
        }
        for &d in distances {
            let entry = frame_hits.entry(d).or_default();
            entry.1 += 1;
            if record.correct {
                entry.0 += 1;
            }
        }
    }
    let to_stats = |hits: BTreeMap<u32, (usize, usize)>| {
        hits.into_iter()
            .map(|(bin, (correct, count))| {
                (
                    bin,
                    BinStat {
                        accuracy: correct as f64 / count as f64,
                        count,
                    },
                )
            })
            .collect::<BTreeMap<u32, BinStat>>()
    };

    // Upper bound: the content block fills the entire grid.
    let full_grid = ProbeGrid {
        content_side: grid.content_side,
        grid_side: grid.content_side,
        query_point: grid.query_point,
        blank_fill: grid.blank_fill,
    };
    full_grid.validate()?;
    let upper_correct: usize = tasks
        .par_iter()
        .map(|task| {
            let sequence = build_padded_sequence(task, &full_grid, (0, 0))?;
            Ok(usize::from(oracle.answer(task, &sequence) == task.gold))
        })
        .collect::<Result<Vec<usize>, ProbeError>>()?
        .into_iter()
        .sum();

    let total_evaluations = evaluated.len();
    Ok(ProbeReport {
        grid: *grid,
        records: evaluated.into_iter().map(|(r, _)| r).collect(),
        mean_bins: to_stats(mean_hits),
        frame_bins: to_stats(frame_hits),
        upper_bound_accuracy: upper_correct as f64 / tasks.len() as f64,
        total_evaluations,
    })
}
