//! Classifier-driven planning: no entropy, no weights, one prediction per
//! block.

use crate::planner::{
    check_cluster, finish_plan, MachineSpec, PlacementStrategy, PlanBlock, Precision,
    PrecisionTable, QuantPlan,
};
use crate::tensor_io::ModelSchema;

use super::forest::ForestModel;
use super::{FastEwqError, Result};

/// Plans `schema` with the forest's predictions and first-fit-decreasing
/// placement.
pub fn fast_plan(
    schema: &ModelSchema,
    model: &ForestModel,
    machines: &[MachineSpec],
    table: &PrecisionTable,
) -> Result<QuantPlan> {
    model.validate()?;
    fast_plan_with(
        schema,
        |features| Ok(model.predict(features)?.class),
        machines,
        table,
        Some(PlacementStrategy::FirstFitDecreasing),
    )
}

/// Same as [`fast_plan`] with any classifier over
/// (num_parameters, exec_index, num_blocks).
///
/// Positive blocks start at q8 and negatives stay raw. Spare capacity goes
/// to positives in ascending execution order until the first one that does
/// not fit. A deficit is paid by positives in descending execution order,
/// each stepping down q8, q4, q1_58 until the total fits.
pub fn fast_plan_with<C>(
    schema: &ModelSchema,
    classify: C,
    machines: &[MachineSpec],
    table: &PrecisionTable,
    strategy: Option<PlacementStrategy>,
) -> Result<QuantPlan>
where
    C: Fn(&[f64; 3]) -> Result<u8>,
{
    table.validate()?;
    let capacity = check_cluster(machines)?;
    let mut blocks: Vec<PlanBlock> = schema
        .transformer_blocks()
        .map(|b| PlanBlock {
            exec_index: b.exec_index,
            entropy: 0.0,
            num_parameters: b.num_parameters,
        })
        .collect();
    if blocks.is_empty() {
        return Err(FastEwqError::NoTransformerBlocks);
    }
    blocks.sort_by_key(|b| b.exec_index);

    let num_blocks = schema.num_blocks as f64;
    let mut levels = Vec::with_capacity(blocks.len());
    let mut positives = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        let features = [b.num_parameters as f64, b.exec_index as f64, num_blocks];
        if classify(&features)? == 1 {
            positives.push(i);
            levels.push(Precision::Q8);
        } else {
            levels.push(Precision::Raw);
        }
    }

    let bytes = |i: usize, p: Precision| table.block_bytes(blocks[i].num_parameters, p);
    let mut total: u64 = (0..blocks.len()).map(|i| bytes(i, levels[i])).sum();

    if total < capacity {
        for &i in &positives {
            let grown = total - bytes(i, levels[i]) + bytes(i, Precision::Raw);
            if grown > capacity {
                break;
            }
            levels[i] = Precision::Raw;
            total = grown;
        }
    } else if total > capacity {
        'sweep: for &i in positives.iter().rev() {
            for next in [Precision::Q4, Precision::Q1_58] {
                if levels[i] <= next {
                    continue;
                }
                total = total - bytes(i, levels[i]) + bytes(i, next);
                levels[i] = next;
                if total <= capacity {
                    break 'sweep;
                }
            }
        }
    }
    let fits = total <= capacity;
    if !fits {
        log::warn!("classifier plan needs {total} bytes, cluster offers {capacity}");
    }
    Ok(finish_plan(
        &blocks, &levels, fits, machines, table, strategy,
    ))
}
