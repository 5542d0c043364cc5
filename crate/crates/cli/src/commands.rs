use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use ewq_core::entropy::{analyze_model, AnalysisReport, EntropyConfig};
use ewq_core::evalstats::{self, EvalSummary, VariantResults, Weights};
use ewq_core::fastewq::{self, BlockRecord, ClassificationReport, ForestModel, ForestParams};
use ewq_core::planner::{plan_model, Cluster, PlacementStrategy, QuantPlan};
use ewq_core::tensor_io::{group_blocks, Container, GroupingRule, ModelSchema};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{BitsSpec, Config};
use crate::{ForestFlags, Output, PlanFlags, Status, Usage};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_out(
    output: &Output,
    write: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    match &output.out {
        Some(path) => {
            let file =
                File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(file);
            write(&mut w)?;
            w.flush()
                .with_context(|| format!("writing {}", path.display()))?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            write(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
fn emit<T: Serialize>(value: &T, output: &Output) -> anyhow::Result<()> {
    write_out(output, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn grouping_rule(cfg: &Config, flag: Option<String>) -> anyhow::Result<GroupingRule> {
    match flag {
        Some(p) => {
            GroupingRule::with_layer_pattern(&p).map_err(|e| usage(format!("--layer-pattern: {e}")))
        }
        None => {
            GroupingRule::with_layer_pattern(&cfg.layer_pattern).context("config `layer_pattern`")
        }
    }
}

fn open_schema(model: &Path, rule: &GroupingRule) -> anyhow::Result<(Container, ModelSchema)> {
    let container = Container::open(model)?;
    let schema = group_blocks(container.model_name(), container.tensors(), rule)
        .with_context(|| format!("grouping tensors of {}", model.display()))?;
    Ok((container, schema))
}

pub fn inspect(
    cfg: &Config,
    model: &Path,
    layer_pattern: Option<String>,
    output: &Output,
) -> anyhow::Result<Status> {
    let rule = grouping_rule(cfg, layer_pattern)?;
    let (_, schema) = open_schema(model, &rule)?;
    emit(&schema, output)?;
    Ok(Status::Done)
}

pub fn analyze(
    cfg: &Config,
    model: &Path,
    epsilon: Option<f64>,
    layer_pattern: Option<String>,
    output: &Output,
) -> anyhow::Result<Status> {
    let entropy_cfg = EntropyConfig {
        epsilon: epsilon.unwrap_or(cfg.epsilon),
        ..EntropyConfig::default()
    };
    if let Err(e) = entropy_cfg.validate() {
        return Err(if epsilon.is_some() {
            usage(format!("--epsilon: {e}"))
        } else {
            e.into()
        });
    }
    let rule = grouping_rule(cfg, layer_pattern)?;
    let (container, schema) = open_schema(model, &rule)?;
    let blocks = analyze_model(&schema, &container, &entropy_cfg)?;
    let report = AnalysisReport {
        model_name: schema.model_name.clone(),
        unit: "nats".into(),
        config: entropy_cfg,
        blocks,
    };
    emit(&report, output)?;
    Ok(Status::Done)
}

#[derive(Serialize)]
struct PlanReport<'a> {
    model_name: &'a str,
    capacity_bytes: u64,
    #[serde(flatten)]
    plan: &'a QuantPlan,
}

fn finish(
    model_name: &str,
    cluster: &Cluster,
    plan: &QuantPlan,
    output: &Output,
) -> anyhow::Result<Status> {
    emit(
        &PlanReport {
            model_name,
            capacity_bytes: cluster.total_capacity(),
            plan,
        },
        output,
    )?;
    Ok(if plan.fits {
        Status::Done
    } else {
        Status::Infeasible
    })
}

pub fn plan(
    cfg: &Config,
    report: &Path,
    cluster: &Path,
    flags: &PlanFlags,
    strategy: Option<PlacementStrategy>,
    output: &Output,
) -> anyhow::Result<Status> {
    let x = flags.x.unwrap_or(cfg.x);
    if flags.x.is_some() && !(x.is_finite() && x >= 0.0) {
        return Err(usage(format!("--x must be finite and >= 0, got {x}")));
    }
    let table = cfg.precision_table(flags.bits.as_ref())?;
    let report: AnalysisReport = read_json(report)?;
    let cluster: Cluster = read_json(cluster)?;
    let plan = plan_model(&report.blocks, x, &cluster.machines, &table, strategy)?;
    finish(&report.model_name, &cluster, &plan, output)
}

fn forest_params(cfg: &Config, flags: &ForestFlags) -> anyhow::Result<ForestParams> {
    let n_trees = flags.trees.unwrap_or(cfg.forest.trees);
    if n_trees == 0 {
        return Err(usage("--trees must be at least 1"));
    }
    Ok(ForestParams {
        n_trees,
        max_depth: flags.max_depth.or(cfg.forest.max_depth),
        min_samples_split: cfg.forest.min_samples_split,
        bootstrap: true,
        seed: flags.seed.unwrap_or(cfg.forest.seed),
    })
}

pub fn fast_train(
    cfg: &Config,
    dataset: &Path,
    split: Option<f64>,
    flags: &ForestFlags,
    heldout: Option<&Path>,
    output: &Output,
) -> anyhow::Result<Status> {
    let fraction = split.unwrap_or(cfg.forest.split);
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(usage(format!("split must be in (0, 1], got {fraction}")));
    }
    let params = forest_params(cfg, flags)?;
    let records = fastewq::load_dataset(dataset)?;
    let (model, held) = fastewq::train_forest_with(&records, fraction, &params, cfg.forest.std)?;
    if let Some(path) = heldout {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        fastewq::write_dataset(BufWriter::new(file), &held)?;
    }
    emit(&model, output)?;
    Ok(Status::Done)
}

fn load_model(path: &Path) -> anyhow::Result<ForestModel> {
    let model: ForestModel = read_json(path)?;
    model
        .validate()
        .with_context(|| format!("checking model {}", path.display()))?;
    Ok(model)
}

#[derive(Serialize)]
struct BlockPrediction {
    exec_index: u64,
    num_parameters: u64,
    quantized: u8,
    score: f64,
}

#[derive(Serialize)]
struct PredictionReport {
    model_name: String,
    num_blocks: u64,
    blocks: Vec<BlockPrediction>,
}

pub fn fast_predict(schema: &Path, model: &Path, output: &Output) -> anyhow::Result<Status> {
    let schema: ModelSchema = read_json(schema)?;
    let model = load_model(model)?;
    let blocks = schema
        .transformer_blocks()
        .map(|b| {
            let features = [
                b.num_parameters as f64,
                b.exec_index as f64,
                schema.num_blocks as f64,
            ];
            let p = model.predict(&features)?;
            Ok(BlockPrediction {
                exec_index: b.exec_index,
                num_parameters: b.num_parameters,
                quantized: p.class,
                score: p.score,
            })
        })
        .collect::<Result<Vec<_>, fastewq::FastEwqError>>()?;
    emit(
        &PredictionReport {
            model_name: schema.model_name.clone(),
            num_blocks: schema.num_blocks,
            blocks,
        },
        output,
    )?;
    Ok(Status::Done)
}

#[derive(Serialize)]
struct EvalReport {
    rows: usize,
    #[serde(flatten)]
    report: ClassificationReport,
    feature_importance: BTreeMap<String, f64>,
}

pub fn fast_eval(dataset: &Path, model: &Path, output: &Output) -> anyhow::Result<Status> {
    let rows: Vec<BlockRecord> = fastewq::load_dataset(dataset)?;
    let model = load_model(model)?;
    let report = fastewq::evaluate(&model, &rows)?;
    let importance = model.feature_importance()?;
    emit(
        &EvalReport {
            rows: rows.len(),
            report,
            feature_importance: fastewq::FEATURE_NAMES
                .iter()
                .zip(importance)
                .map(|(n, v)| (n.to_string(), v))
                .collect(),
        },
        output,
    )?;
    Ok(Status::Done)
}

pub fn fast_plan(
    cfg: &Config,
    schema: &Path,
    model: &Path,
    cluster: &Path,
    bits: Option<&BitsSpec>,
    output: &Output,
) -> anyhow::Result<Status> {
    let table = cfg.precision_table(bits)?;
    let schema: ModelSchema = read_json(schema)?;
    let model = load_model(model)?;
    let cluster: Cluster = read_json(cluster)?;
    let plan = fastewq::fast_plan_with(
        &schema,
        |f| Ok(model.predict(f)?.class),
        &cluster.machines,
        &table,
        Some(cfg.placement),
    )?;
    finish(&schema.model_name, &cluster, &plan, output)
}

pub fn fast_synth(rows: usize, seed: u64, output: &Output) -> anyhow::Result<Status> {
    let records = fastewq::synthetic_half_split(rows, seed);
    write_out(output, |w| Ok(fastewq::write_dataset(w, &records)?))?;
    Ok(Status::Done)
}

#[derive(Serialize)]
struct MmluReport {
    weights: Weights,
    composite_score: f64,
    #[serde(flatten)]
    summary: EvalSummary,
}

fn weights(cfg: &Config, w1: Option<f64>, w2: Option<f64>) -> Weights {
    Weights {
        w1: w1.unwrap_or(cfg.weights.w1),
        w2: w2.unwrap_or(cfg.weights.w2),
    }
}

pub fn mmlu_stats(
    cfg: &Config,
    records: &Path,
    w1: Option<f64>,
    w2: Option<f64>,
    output: &Output,
) -> anyhow::Result<Status> {
    let file = File::open(records).with_context(|| format!("opening {}", records.display()))?;
    let records = evalstats::read_records(BufReader::new(file))
        .with_context(|| format!("reading {}", records.display()))?;
    let summary = evalstats::summarize(&records, &cfg.perplexity)?;
    let weights = weights(cfg, w1, w2);
    let composite_score =
        evalstats::composite_score(summary.accuracy, summary.perplexity, weights.w1, weights.w2)?;
    emit(
        &MmluReport {
            weights,
            composite_score,
            summary,
        },
        output,
    )?;
    Ok(Status::Done)
}

pub fn compare(
    cfg: &Config,
    a: &Path,
    b: &Path,
    w1: Option<f64>,
    w2: Option<f64>,
    output: &Output,
) -> anyhow::Result<Status> {
    let a: VariantResults = read_json(a)?;
    let b: VariantResults = read_json(b)?;
    let report = evalstats::compare(&a, &b, weights(cfg, w1, w2))?;
    emit(&report, output)?;
    Ok(Status::Done)
}
