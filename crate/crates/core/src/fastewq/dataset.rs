//! Block dataset rows: one transformer block per row with its EWQ label.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FastEwqError, Result};

pub const COLUMNS: [&str; 6] = [
    "model_name",
    "num_blocks",
    "exec_index",
    "num_parameters",
    "quantization_type",
    "quantized",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantType {
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "8-bit")]
    Q8,
    #[serde(rename = "4-bit")]
    Q4,
}

impl QuantType {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantType::Raw => "raw",
            QuantType::Q8 => "8-bit",
            QuantType::Q4 => "4-bit",
        }
    }
}

impl fmt::Display for QuantType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "raw" => Ok(QuantType::Raw),
            "8-bit" | "8bit" | "q8" => Ok(QuantType::Q8),
            "4-bit" | "4bit" | "q4" => Ok(QuantType::Q4),
            other => Err(format!("unknown quantization_type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub model_name: String,
    pub num_blocks: u64,
    pub exec_index: u64,
    pub num_parameters: u64,
    pub quantization_type: QuantType,
    pub quantized: u8,
}

impl BlockRecord {
    /// Builds a record with the label derived from the type.
    pub fn new(
        model_name: impl Into<String>,
        num_blocks: u64,
        exec_index: u64,
        num_parameters: u64,
        quantization_type: QuantType,
    ) -> Self {
        Self {
            model_name: model_name.into(),
            num_blocks,
            exec_index,
            num_parameters,
            quantization_type,
            quantized: u8::from(quantization_type != QuantType::Raw),
        }
    }

    /// Classifier input in feature order (num_parameters, exec_index,
    /// num_blocks).
    pub fn features(&self) -> [f64; 3] {
        [
            self.num_parameters as f64,
            self.exec_index as f64,
            self.num_blocks as f64,
        ]
    }

    pub fn label(&self) -> u8 {
        self.quantized
    }
}

fn column_index(headers: &csv::StringRecord) -> Result<[usize; 6]> {
    let mut idx = [0usize; 6];
    for (slot, name) in idx.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| FastEwqError::MissingColumn(name.to_owned()))?;
    }
    Ok(idx)
}

fn parse_int(field: &str, column: &str, line: u64) -> Result<u64> {
    field.trim().parse().map_err(|_| FastEwqError::BadField {
        line,
        column: column.to_owned(),
        value: field.to_owned(),
    })
}

/// Parses comma-delimited rows with the six dataset columns (any order).
pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<BlockRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let idx = column_index(rdr.headers()?)?;
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(idx[i]).unwrap_or("");
        let quantization_type: QuantType =
            field(4).parse().map_err(|_| FastEwqError::BadField {
                line,
                column: COLUMNS[4].into(),
                value: field(4).into(),
            })?;
        let quantized = parse_int(field(5), COLUMNS[5], line)?;
        if quantized > 1 {
            return Err(FastEwqError::BadField {
                line,
                column: COLUMNS[5].into(),
                value: field(5).into(),
            });
        }
        let record = BlockRecord {
            model_name: field(0).to_owned(),
            num_blocks: parse_int(field(1), COLUMNS[1], line)?,
            exec_index: parse_int(field(2), COLUMNS[2], line)?,
            num_parameters: parse_int(field(3), COLUMNS[3], line)?,
            quantization_type,
            quantized: quantized as u8,
        };
        if (record.quantized == 0) != (record.quantization_type == QuantType::Raw) {
            return Err(FastEwqError::InconsistentLabel {
                line,
                quantization_type: record.quantization_type,
                quantized: record.quantized,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<BlockRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| FastEwqError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(std::io::BufReader::new(file))
}

pub fn write_dataset<W: Write>(writer: W, records: &[BlockRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(COLUMNS)?;
    for r in records {
        wtr.write_record([
            r.model_name.clone(),
            r.num_blocks.to_string(),
            r.exec_index.to_string(),
            r.num_parameters.to_string(),
            r.quantization_type.to_string(),
            r.quantized.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| FastEwqError::Csv(e.into()))?;
    Ok(())
}

/// Synthetic dataset whose label is `exec_index > num_blocks / 2`: blocks in
/// the second half of a model are quantized. Models have 32 or 33 blocks, so
/// the boundary sits between exec_index 16 and 17 for both and a single
/// threshold on exec_index separates the classes, while num_blocks still
/// varies enough to be scaled.
pub fn synthetic_half_split(rows: usize, seed: u64) -> Vec<BlockRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(rows);
    let mut model = 0;
    while out.len() < rows {
        let num_blocks = rng.gen_range(32..=33);
        let per_block = rng.gen_range(40_000_000u64..400_000_000);
        for exec_index in 2..num_blocks + 2 {
            if out.len() == rows {
                break;
            }
            // Sample a subset of blocks so models interleave.
            if rng.gen_bool(0.5) {
                continue;
            }
            let quantized = 2 * exec_index > num_blocks;
            debug_assert_eq!(quantized, exec_index >= 17);
            out.push(BlockRecord::new(
                format!("synthetic/model-{model}"),
                num_blocks,
                exec_index,
                per_block,
                if quantized {
                    QuantType::Q8
                } else {
                    QuantType::Raw
                },
            ));
        }
        model += 1;
    }
    out
}
