//! `spikekit` subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use spikekit_core::analyzer::{
    energy_report, raster_export, EnergyConstants, EnergyReport, FiringAccumulator, FiringStats,
};
use spikekit_core::model::{build_model, convert_from_softmax, ConversionPlan, ConversionSummary, Model, ModelConfig};
use spikekit_core::proj::SpikeSettings;
use spikekit_core::spike::{encode, expand, Granularity, Scheme};

use crate::bench::benchmark_prefill;
use crate::checkpoint::{checkpoint_bytes, load_checkpoint};
use crate::raster::write_raster;
use crate::tensor_file::read_tensor;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "spikekit",
    version,
    about = "Spiking hybrid-attention toy models: build, convert, run, bench, analyze"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Initialize a model from a config document and write a checkpoint.
    Build(BuildArgs),
    /// Convert a softmax-attention checkpoint according to a plan.
    Convert(ConvertArgs),
    /// Prefill a prompt and greedily decode.
    Run(RunArgs),
    /// Time prefill over several lengths and fit the scaling exponent.
    Bench(BenchArgs),
    /// Spike-encode a tensor file and export its raster.
    Spikes(SpikesArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SpikeArgs {
    #[arg(long, value_parser = parse_scheme, default_value = "bitwise_bidir")]
    pub scheme: Scheme,
    #[arg(long, value_parser = parse_granularity, default_value = "per_token")]
    pub granularity: Granularity,
    /// Padding window for windowed sparsity.
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    /// Digit count for bitwise schemes (default: smallest that fits).
    #[arg(long)]
    pub bits: Option<u32>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub checkpoint: PathBuf,
    /// File of whitespace- or comma-separated token ids.
    pub prompt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub steps: usize,
    /// Enable spike mode with threshold divisor `k`.
    #[arg(long)]
    pub spike: Option<f32>,
    #[command(flatten)]
    pub coding: SpikeArgs,
    /// Also write the result document here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SpikesArgs {
    pub tensor: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub spike: f32,
    #[command(flatten)]
    pub coding: SpikeArgs,
    /// Raster CSV destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Report every event as 1.
    #[arg(long)]
    pub presence: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    s.parse().map_err(|e: spikekit_core::Error| e.to_string())
}

fn parse_granularity(s: &str) -> std::result::Result<Granularity, String> {
    s.parse().map_err(|e: spikekit_core::Error| e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Usage(format!("{}: no such file", path.display())),
        _ => Error::io(path, e),
    })
}

fn write_new(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(&read(path)?)
}

/// Parses integer token ids separated by whitespace or commas.
pub fn parse_prompt(text: &str) -> Result<Vec<u32>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>().map_err(|_| Error::Usage(format!("prompt token `{s}` is not a non-negative integer")))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct BuildReport {
    out: PathBuf,
    params: usize,
    layout: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct SpikeDocument {
    pub settings: SpikeSettings,
    pub stats: FiringStats,
    pub energy: EnergyReport,
}

#[derive(Debug, Serialize)]
pub struct RunDocument {
    pub prompt_len: usize,
    pub tokens: Vec<u32>,
    /// Logits after the last consumed token.
    pub logits: Vec<f32>,
    pub spike: Option<SpikeDocument>,
}

#[derive(Debug, Serialize)]
struct SpikesDocument {
    scheme: Scheme,
    k: f32,
    timesteps: usize,
    bits: Option<u32>,
    events: usize,
    stats: FiringStats,
    energy: EnergyReport,
}

fn emit(out: &mut dyn Write, doc: &impl Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(doc)?;
    bytes.push(b'\n');
    out.write_all(&bytes).map_err(|e| Error::io("<stdout>", e))?;
    Ok(bytes)
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Build(a) => {
            let cfg: ModelConfig = serde_json::from_slice(&read(&a.config)?)?;
            let model = build_model(cfg, a.seed)?;
            write_new(&a.out, &checkpoint_bytes(&model)?, a.output.force)?;
            let layout = model.config.layout.iter().map(|s| s.attention.to_string()).collect();
            emit(out, &BuildReport { out: a.out, params: model.param_count(), layout })?;
        }
        Command::Convert(a) => {
            let src = load_model(&a.checkpoint)?;
            let plan: ConversionPlan = serde_json::from_slice(&read(&a.plan)?)?;
            let (dst, summary): (Model, ConversionSummary) = convert_from_softmax(&src, &plan)?;
            write_new(&a.out, &checkpoint_bytes(&dst)?, a.output.force)?;
            emit(out, &summary)?;
        }
        Command::Run(a) => {
            if a.coding.window == 0 {
                return Err(Error::Usage("--window must be at least 1".into()));
            }
            if let Some(p) = &a.out {
                if p.exists() && !a.output.force {
                    return Err(Error::Usage(format!("{} exists; pass --force to overwrite", p.display())));
                }
            }
            let mut model = load_model(&a.checkpoint)?;
            let prompt_text = String::from_utf8(read(&a.prompt)?)
                .map_err(|_| Error::Usage("prompt file is not UTF-8 text".into()))?;
            let prompt = parse_prompt(&prompt_text)?;
            if let Some(k) = a.spike {
                model.set_spike(Some(SpikeSettings {
                    k,
                    scheme: a.coding.scheme,
                    granularity: a.coding.granularity,
                    bits: a.coding.bits,
                }))?;
            }
            let mut rec = FiringAccumulator::new(a.coding.window)?;
            let spiking = model.config.spike;
            let (tokens, logits) = {
                let mut mode = model.mode(spiking.map(|_| &mut rec));
                model.generate(&prompt, a.steps, &mut mode)?
            };
            let spike = match spiking {
                Some(settings) => {
                    let stats = rec.finish()?;
                    let energy = energy_report(stats.avg_spikes_per_channel, &EnergyConstants::default())?;
                    Some(SpikeDocument { settings, stats, energy })
                }
                None => None,
            };
            let doc = RunDocument { prompt_len: prompt.len(), tokens, logits: logits.into_data(), spike };
            let bytes = emit(out, &doc)?;
            if let Some(p) = &a.out {
                write_new(p, &bytes, a.output.force)?;
            }
        }
        Command::Bench(a) => {
            if let Some(p) = &a.out {
                if p.exists() && !a.output.force {
                    return Err(Error::Usage(format!("{} exists; pass --force to overwrite", p.display())));
                }
            }
            let model = load_model(&a.checkpoint)?;
            let report = benchmark_prefill(&model, &a.lengths, a.repeats)?;
            let bytes = emit(out, &report)?;
            if let Some(p) = &a.out {
                write_new(p, &bytes, a.output.force)?;
            }
        }
        Command::Spikes(a) => {
            if a.out.exists() && !a.output.force {
                return Err(Error::Usage(format!("{} exists; pass --force to overwrite", a.out.display())));
            }
            let tensor = read_tensor(&mut read(&a.tensor)?.as_slice())?;
            let counts = encode(&tensor, a.spike, a.coding.granularity)?;
            let train = expand(&counts, a.coding.scheme, a.coding.bits)?;
            let mut acc = FiringAccumulator::new(a.coding.window)?;
            acc.record_train(&counts, &train)?;
            let stats = acc.finish()?;
            let neurons = *tensor.shape().last().unwrap_or(&1);
            let rows = if neurons == 0 { Vec::new() } else { raster_export(&train, 0..neurons, a.presence)? };
            let mut csv = Vec::new();
            write_raster(&mut csv, &rows)?;
            write_new(&a.out, &csv, a.output.force)?;
            let energy = energy_report(stats.avg_spikes_per_channel, &EnergyConstants::default())?;
            emit(
                out,
                &SpikesDocument {
                    scheme: train.scheme,
                    k: a.spike,
                    timesteps: train.timesteps,
                    bits: train.bits,
                    events: rows.len(),
                    stats,
                    energy,
                },
            )?;
        }
    }
    Ok(())
}
