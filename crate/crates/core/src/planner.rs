//! Entropy-threshold quantization decisions and resource-constrained
//! distribution of transformer blocks over a cluster.
//!
//! Decision rule, with `T = μ − X·σ` over the block entropies:
//!
//! ```text
//! H <= T        -> 4-bit
//! T < H <= μ    -> 8-bit
//! H > μ         -> raw
//! ```
//!
//! [`optimize_distribution`] then fits the plan into the aggregate capacity
//! `R = Σ min(memory, disk)`: promote high-entropy blocks while there is room,
//! or push low-entropy blocks down to 1.58-bit when there is not.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::BlockEntropyReport;
use crate::numeric::{mean, sum_sq_dev};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("no entropies to summarize")]
    Empty,
    #[error("aggressiveness must be finite and >= 0, got {0}")]
    BadAggressiveness(f64),
    #[error("bits per parameter must be positive and strictly decreasing raw > q8 > q4 > q1_58")]
    BadPrecisionTable,
    #[error("cluster has no machines")]
    NoMachines,
    #[error("cluster has zero total capacity")]
    ZeroCapacity,
    #[error("decisions do not cover block {0}")]
    MissingDecision(u64),
    #[error("duplicate exec_index {0}")]
    DuplicateBlock(u64),
}

pub type Result<T> = std::result::Result<T, PlanError>;

/// Storage precision of a block, ordered from smallest to largest footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "q1_58")]
    Q1_58,
    #[serde(rename = "q4")]
    Q4,
    #[serde(rename = "q8")]
    Q8,
    #[serde(rename = "raw")]
    Raw,
}

impl Precision {
    pub const ALL: [Precision; 4] = [
        Precision::Q1_58,
        Precision::Q4,
        Precision::Q8,
        Precision::Raw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Precision::Q1_58 => "q1_58",
            Precision::Q4 => "q4",
            Precision::Q8 => "q8",
            Precision::Raw => "raw",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bits stored per parameter at each precision. The 4-bit default of 4.25
/// accounts for per-group scale and zero-point overhead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionTable {
    pub raw: f64,
    pub q8: f64,
    pub q4: f64,
    pub q1_58: f64,
}

impl Default for PrecisionTable {
    fn default() -> Self {
        Self {
            raw: 16.0,
            q8: 8.0,
            q4: 4.25,
            q1_58: 2.0,
        }
    }
}

impl PrecisionTable {
    pub fn bits(&self, p: Precision) -> f64 {
        match p {
            Precision::Raw => self.raw,
            Precision::Q8 => self.q8,
            Precision::Q4 => self.q4,
            Precision::Q1_58 => self.q1_58,
        }
    }

    pub fn set(&mut self, p: Precision, bits: f64) {
        match p {
            Precision::Raw => self.raw = bits,
            Precision::Q8 => self.q8 = bits,
            Precision::Q4 => self.q4 = bits,
            Precision::Q1_58 => self.q1_58 = bits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.q1_58 > 0.0
            && self.q1_58 < self.q4
            && self.q4 < self.q8
            && self.q8 < self.raw
            && self.raw.is_finite();
        if ok {
            Ok(())
        } else {
            Err(PlanError::BadPrecisionTable)
        }
    }

    pub fn block_bytes(&self, num_parameters: u64, p: Precision) -> u64 {
        block_size_bytes(num_parameters, self.bits(p))
    }
}

/// `ceil(num_parameters * bits / 8)`.
pub fn block_size_bytes(num_parameters: u64, bits_per_param: f64) -> u64 {
    (num_parameters as f64 * bits_per_param / 8.0).ceil() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub mean: f64,
    /// Population (1/N) standard deviation.
    pub std: f64,
    pub threshold: f64,
    #[serde(rename = "x")]
    pub aggressiveness: f64,
}

pub fn compute_stats(entropies: &[f64], aggressiveness: f64) -> Result<EntropyStats> {
    if entropies.is_empty() {
        return Err(PlanError::Empty);
    }
    if !(aggressiveness >= 0.0 && aggressiveness.is_finite()) {
        return Err(PlanError::BadAggressiveness(aggressiveness));
    }
    let mean = mean(entropies);
    let std = (sum_sq_dev(entropies) / entropies.len() as f64).sqrt();
    Ok(EntropyStats {
        mean,
        std,
        threshold: mean - aggressiveness * std,
        aggressiveness,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub exec_index: u64,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decisions {
    /// One entry per report, in report order.
    pub assignments: Vec<Assignment>,
    /// exec_index values in ascending entropy order, ties by ascending
    /// exec_index.
    pub priority: Vec<u64>,
}

impl Decisions {
    pub fn precision_of(&self, exec_index: u64) -> Option<Precision> {
        self.assignments
            .iter()
            .find(|a| a.exec_index == exec_index)
            .map(|a| a.precision)
    }
}

pub fn classify_entropy(entropy: f64, stats: &EntropyStats) -> Precision {
    if entropy <= stats.threshold {
        Precision::Q4
    } else if entropy <= stats.mean {
        Precision::Q8
    } else {
        Precision::Raw
    }
}

pub fn decide(reports: &[BlockEntropyReport], stats: &EntropyStats) -> Decisions {
    let assignments = reports
        .iter()
        .map(|r| Assignment {
            exec_index: r.exec_index,
            precision: classify_entropy(r.block_entropy, stats),
        })
        .collect();
    let mut order: Vec<&BlockEntropyReport> = reports.iter().collect();
    order.sort_by(|a, b| {
        ascending_entropy(a.block_entropy, a.exec_index, b.block_entropy, b.exec_index)
    });
    Decisions {
        assignments,
        priority: order.iter().map(|r| r.exec_index).collect(),
    }
}

fn ascending_entropy(ha: f64, ia: u64, hb: f64, ib: u64) -> Ordering {
    ha.total_cmp(&hb).then(ia.cmp(&ib))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub id: String,
    pub memory_bytes: u64,
    pub disk_bytes: u64,
}

impl MachineSpec {
    pub fn capacity(&self) -> u64 {
        self.memory_bytes.min(self.disk_bytes)
    }
}

/// Cluster descriptor document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub machines: Vec<MachineSpec>,
}

impl Cluster {
    pub fn total_capacity(&self) -> u64 {
        total_capacity(&self.machines)
    }
}

pub fn total_capacity(machines: &[MachineSpec]) -> u64 {
    machines.iter().map(MachineSpec::capacity).sum()
}

pub(crate) fn check_cluster(machines: &[MachineSpec]) -> Result<u64> {
    if machines.is_empty() {
        return Err(PlanError::NoMachines);
    }
    match total_capacity(machines) {
        0 => Err(PlanError::ZeroCapacity),
        r => Ok(r),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub exec_index: u64,
    pub machine: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementStrategy {
    /// Largest block first into the first machine (by descending capacity)
    /// with room.
    #[default]
    FirstFitDecreasing,
    /// Blocks in execution order, machines in descriptor order.
    FirstFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    /// Ascending exec_index.
    pub assignments: Vec<Assignment>,
    pub total_bytes: u64,
    pub fits: bool,
    pub placements: Vec<Placement>,
    pub stats: Option<EntropyStats>,
}

impl QuantPlan {
    pub fn precision_of(&self, exec_index: u64) -> Option<Precision> {
        self.assignments
            .iter()
            .find(|a| a.exec_index == exec_index)
            .map(|a| a.precision)
    }
}

/// A block as seen by the planner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanBlock {
    pub exec_index: u64,
    pub entropy: f64,
    pub num_parameters: u64,
}

fn plan_size(blocks: &[PlanBlock], levels: &[Precision], table: &PrecisionTable) -> u64 {
    blocks
        .iter()
        .zip(levels)
        .map(|(b, &p)| table.block_bytes(b.num_parameters, p))
        .sum()
}

/// Precision assignment before placement. Returns the levels
/// (parallel to `blocks`) and whether they fit into `capacity`.
pub fn assign_precisions(
    blocks: &[PlanBlock],
    initial: &[Precision],
    capacity: u64,
    table: &PrecisionTable,
) -> (Vec<Precision>, bool) {
    assert_eq!(blocks.len(), initial.len());
    let size = |levels: &[Precision]| plan_size(blocks, levels, table);
    let bytes = |i: usize, p: Precision| table.block_bytes(blocks[i].num_parameters, p);

    let all_raw = vec![Precision::Raw; blocks.len()];
    if size(&all_raw) <= capacity {
        return (all_raw, true);
    }

    let mut ascending: Vec<usize> = (0..blocks.len()).collect();
    ascending.sort_by(|&a, &b| {
        ascending_entropy(
            blocks[a].entropy,
            blocks[a].exec_index,
            blocks[b].entropy,
            blocks[b].exec_index,
        )
    });
    let descending: Vec<usize> = ascending.iter().rev().copied().collect();

    let mut levels = initial.to_vec();
    let mut total = size(&levels);

    if total <= capacity {
        // Promote in descending entropy while resources allow.
        loop {
            let mut changed = false;
            for &i in &descending {
                for target in [Precision::Raw, Precision::Q8] {
                    if target <= levels[i] {
                        break;
                    }
                    let next = total - bytes(i, levels[i]) + bytes(i, target);
                    if next <= capacity {
                        total = next;
                        levels[i] = target;
                        changed = true;
                        break;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        return (levels, true);
    }

    // Lowest-entropy blocks drop to 1.58-bit until the plan fits.
    let mut demoted = Vec::new();
    for &i in &ascending {
        if total <= capacity {
            break;
        }
        if levels[i] > Precision::Q1_58 {
            total = total - bytes(i, levels[i]) + bytes(i, Precision::Q1_58);
            levels[i] = Precision::Q1_58;
            demoted.push(i);
        }
    }
    if total > capacity {
        return (levels, false);
    }
    // Give back the initial level to demoted blocks that fit again, highest
    // entropy first, so only the lowest-entropy blocks stay reduced.
    for &i in demoted.iter().rev() {
        let next = total - bytes(i, levels[i]) + bytes(i, initial[i]);
        if next <= capacity {
            total = next;
            levels[i] = initial[i];
        }
    }
    (levels, true)
}

/// Places blocks onto machines. Returns `None` when some block does not fit
/// in any machine's remaining capacity.
pub fn place_blocks(
    blocks: &[(u64, u64)],
    machines: &[MachineSpec],
    strategy: PlacementStrategy,
) -> Option<Vec<Placement>> {
    let mut bins: Vec<(usize, u64)> = machines
        .iter()
        .enumerate()
        .map(|(i, m)| (i, m.capacity()))
        .collect();
    let mut items: Vec<(u64, u64)> = blocks.to_vec();
    if strategy == PlacementStrategy::FirstFitDecreasing {
        bins.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then_with(|| machines[a.0].id.cmp(&machines[b.0].id))
        });
        items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    } else {
        items.sort_by_key(|&(exec_index, _)| exec_index);
    }

    let mut placements = Vec::with_capacity(items.len());
    for (exec_index, size) in items {
        let bin = bins.iter_mut().find(|(_, free)| *free >= size)?;
        bin.1 -= size;
        placements.push(Placement {
            exec_index,
            machine: machines[bin.0].id.clone(),
        });
    }
    placements.sort_by_key(|p| p.exec_index);
    Some(placements)
}

/// Builds a plan from per-block levels; places the blocks when `strategy` is
/// given and the levels fit.
pub fn finish_plan(
    blocks: &[PlanBlock],
    levels: &[Precision],
    fits: bool,
    machines: &[MachineSpec],
    table: &PrecisionTable,
    strategy: Option<PlacementStrategy>,
) -> QuantPlan {
    let sized: Vec<(u64, u64)> = blocks
        .iter()
        .zip(levels)
        .map(|(b, &p)| (b.exec_index, table.block_bytes(b.num_parameters, p)))
        .collect();
    let total_bytes = sized.iter().map(|s| s.1).sum();
    let (fits, placements) = match (fits, strategy) {
        (true, Some(strategy)) => match place_blocks(&sized, machines, strategy) {
            Some(p) => (true, p),
            None => {
                log::warn!("plan fits aggregate capacity but not individual machines");
                (false, Vec::new())
            }
        },
        (fits, _) => (fits, Vec::new()),
    };
    let mut assignments: Vec<Assignment> = blocks
        .iter()
        .zip(levels)
        .map(|(b, &precision)| Assignment {
            exec_index: b.exec_index,
            precision,
        })
        .collect();
    assignments.sort_by_key(|a| a.exec_index);
    QuantPlan {
        assignments,
        total_bytes,
        fits,
        placements,
        stats: None,
    }
}

fn plan_blocks(
    reports: &[BlockEntropyReport],
    decisions: &Decisions,
) -> Result<(Vec<PlanBlock>, Vec<Precision>)> {
    let mut seen = std::collections::HashSet::new();
    let mut blocks = Vec::with_capacity(reports.len());
    let mut initial = Vec::with_capacity(reports.len());
    for r in reports {
        if !seen.insert(r.exec_index) {
            return Err(PlanError::DuplicateBlock(r.exec_index));
        }
        let p = decisions
            .precision_of(r.exec_index)
            .ok_or(PlanError::MissingDecision(r.exec_index))?;
        blocks.push(PlanBlock {
            exec_index: r.exec_index,
            entropy: r.block_entropy,
            num_parameters: r.num_parameters,
        });
        initial.push(p);
    }
    Ok((blocks, initial))
}

/// Distributes the initial decisions, then places with first-fit-decreasing.
pub fn optimize_distribution(
    reports: &[BlockEntropyReport],
    decisions: &Decisions,
    machines: &[MachineSpec],
    table: &PrecisionTable,
) -> Result<QuantPlan> {
    optimize_with(
        reports,
        decisions,
        machines,
        table,
        Some(PlacementStrategy::FirstFitDecreasing),
    )
}

/// As [`optimize_distribution`] with a configurable placement step; `None` skips placement.
pub fn optimize_with(
    reports: &[BlockEntropyReport],
    decisions: &Decisions,
    machines: &[MachineSpec],
    table: &PrecisionTable,
    strategy: Option<PlacementStrategy>,
) -> Result<QuantPlan> {
    table.validate()?;
    let capacity = check_cluster(machines)?;
    let (blocks, initial) = plan_blocks(reports, decisions)?;
    let (levels, fits) = assign_precisions(&blocks, &initial, capacity, table);
    Ok(finish_plan(
        &blocks, &levels, fits, machines, table, strategy,
    ))
}

/// Statistics, decisions and distribution in one call.
pub fn plan_model(
    reports: &[BlockEntropyReport],
    aggressiveness: f64,
    machines: &[MachineSpec],
    table: &PrecisionTable,
    strategy: Option<PlacementStrategy>,
) -> Result<QuantPlan> {
    let entropies: Vec<f64> = reports.iter().map(|r| r.block_entropy).collect();
    let stats = compute_stats(&entropies, aggressiveness)?;
    let decisions = decide(reports, &stats);
    let mut plan = optimize_with(reports, &decisions, machines, table, strategy)?;
    plan.stats = Some(stats);
    Ok(plan)
}
