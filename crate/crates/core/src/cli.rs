//! Command-line front end. Exit codes: 0 success, 1 domain error, 2 usage
//! error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::fusion::{fuse_model, verify_equivalence, VerifyOptions};
use crate::ltp::{
    collect_layer_stats, detect_instability, gaussian_batch, ltp_over_snapshots, noam_lr, write_csv,
    ScheduleParams, DEFAULT_MEAN_BOUND, DEFAULT_VAR_BOUND,
};
use crate::io::{load_model, save_model};
use crate::model::{build_model_with, randomize_batch_norms, Flavor, InitOptions, Model, ModelConfig};
use crate::profiler::{bench_rtf, profile, BenchMode, BenchOptions};
use crate::quant::quantize_model;
use crate::streaming::{ChunkWindow, DecodingConfig};

#[derive(Debug, Parser)]
#[command(name = "fusionformer", version, about = "Conformer / FusionFormer CPU inference toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Table,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Float32,
    Int8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a randomly initialized model file.
    Init {
        #[arg(long)]
        flavor: Flavor,
        /// Encoder blocks.
        #[arg(long)]
        blocks: usize,
        #[arg(long)]
        hidden: usize,
        #[arg(long)]
        heads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        decoder_blocks: usize,
        #[arg(long, default_value_t = crate::model::DEFAULT_FFN_DIM)]
        ffn_dim: usize,
        #[arg(long, default_value_t = crate::model::DEFAULT_CONV_KERNEL)]
        conv_kernel: usize,
        #[arg(long, default_value_t = crate::model::DEFAULT_VOCAB)]
        vocab: usize,
        #[arg(long, default_value_t = crate::model::DEFAULT_FEAT_DIM)]
        feat_dim: usize,
        /// Multiplier on the uniform init bound of linear/conv weights.
        #[arg(long, default_value_t = 1.0)]
        weight_scale: f32,
        /// Draw non-trivial BatchNorm statistics from this seed.
        #[arg(long)]
        bn_stats_seed: Option<u64>,
    },
    /// Parameter / FLOP / latency breakdown by module category.
    Profile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        frames: usize,
        #[arg(long, default_value = "2nd-s-16-inf")]
        decoding: DecodingConfig,
        #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
        format: OutputFormat,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fold BatchNorm and ReLU into their producers.
    Fuse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Verification trials recorded in the report's max_residual.
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare two models on identical random inputs.
    Verify {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Layer trend statistics over model snapshots.
    Ltp {
        /// Snapshot files, or one directory whose *.ffwt files are used in
        /// name order.
        #[arg(long, num_args = 1.., required = true)]
        snapshots: Vec<PathBuf>,
        #[arg(long, default_value_t = crate::ltp::DEFAULT_BATCH)]
        batch: usize,
        #[arg(long, default_value_t = crate::ltp::DEFAULT_FRAMES)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write instability flags here as JSON.
        #[arg(long)]
        flags: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MEAN_BOUND)]
        mean_bound: f64,
        #[arg(long, default_value_t = DEFAULT_VAR_BOUND)]
        var_bound: f64,
    },
    /// Real-time factor on synthetic utterances, single thread.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        audio_seconds: f64,
        #[arg(long, default_value = "2nd-s-16-inf")]
        decoding: DecodingConfig,
        #[arg(long, value_enum, default_value_t = Mode::Float32)]
        mode: Mode,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
        format: OutputFormat,
    },
    /// Quantize linear and depthwise-conv weights to int8.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learning rate of the warmup/decay schedule at one step.
    Lr {
        #[arg(long)]
        peak: f64,
        #[arg(long)]
        warmup: u64,
        #[arg(long)]
        step: u64,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn snapshot_paths(args: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if let [dir] = args {
        if dir.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "ffwt"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::InvalidArgument(format!("no .ffwt files in {}", dir.display())));
            }
            return Ok(files);
        }
    }
    Ok(args.to_vec())
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Init {
            flavor,
            blocks,
            hidden,
            heads,
            seed,
            out: path,
            decoder_blocks,
            ffn_dim,
            conv_kernel,
            vocab,
            feat_dim,
            weight_scale,
            bn_stats_seed,
        } => {
            let base = ModelConfig::new(flavor, blocks, decoder_blocks, hidden, heads);
            let config = ModelConfig {
                ffn_dim,
                conv_kernel,
                vocab_size: vocab,
                input_feat_dim: feat_dim,
                ..base
            };
            let mut model = build_model_with(config, InitOptions { seed, weight_scale })?;
            if let Some(s) = bn_stats_seed {
                randomize_batch_norms(&mut model, s);
            }
            save_model(&model, &path)?;
            emit(
                out,
                &format!("wrote {} ({} parameters) to {}\n", flavor, model.param_count(), path.display()),
            )
        }
        Command::Profile {
            model,
            frames,
            decoding,
            format,
            repeats,
            seed,
        } => {
            let model: Model = load_model(&model)?;
            let report = profile(&model, frames, &decoding, repeats, seed)?;
            match format {
                OutputFormat::Json => emit(out, &(report.to_json() + "\n")),
                OutputFormat::Table => emit(out, &report.to_table()),
            }
        }
        Command::Fuse {
            model,
            out: path,
            report,
            trials,
            frames,
            seed,
        } => {
            let unfused: Model = load_model(&model)?;
            let (fused, mut rep) = fuse_model(&unfused)?;
            if trials > 0 {
                rep.max_residual = verify_equivalence(
                    &unfused,
                    &fused,
                    VerifyOptions {
                        trials,
                        frames,
                        seed,
                        window: ChunkWindow::FULL,
                    },
                )?;
            }
            save_model(&fused, &path)?;
            if let Some(r) = report {
                write_file(&r, rep.to_json().as_bytes())?;
            }
            emit(
                out,
                &format!(
                    "folded {} batch norms, {} relu epilogues, max residual {:e}\n",
                    rep.folded.len(),
                    rep.epilogues.len(),
                    rep.max_residual
                ),
            )
        }
        Command::Verify {
            a,
            b,
            trials,
            frames,
            tol,
            seed,
        } => {
            let (ma, mb): (Model, Model) = (load_model(&a)?, load_model(&b)?);
            let residual = verify_equivalence(
                &ma,
                &mb,
                VerifyOptions {
                    trials,
                    frames,
                    seed,
                    window: ChunkWindow::FULL,
                },
            )?;
            emit(out, &format!("max_residual {residual:e}\n"))?;
            if residual < tol {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("max residual {residual:e} exceeds tolerance {tol:e}")))
            }
        }
        Command::Ltp {
            snapshots,
            batch,
            frames,
            seed,
            out: csv_path,
            flags,
            mean_bound,
            var_bound,
        } => {
            let paths = snapshot_paths(&snapshots)?;
            let models = paths
                .iter()
                .enumerate()
                .map(|(i, p)| Ok((i as u64, load_model::<f32>(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let feat = models[0].1.config.input_feat_dim;
            let probe = gaussian_batch(batch, frames, feat, seed);
            let records = if models.len() == 1 {
                collect_layer_stats(&models[0].1, &probe, 0)?
            } else {
                ltp_over_snapshots(&models, &probe)?
            };
            let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
            write_csv(&records, file)?;
            let found = detect_instability(&records, mean_bound, var_bound);
            if let Some(f) = flags {
                write_file(&f, serde_json::to_string_pretty(&found)?.as_bytes())?;
            }
            emit(
                out,
                &format!(
                    "{} records from {} snapshot(s), {} instability flag(s)\n",
                    records.len(),
                    models.len(),
                    found.len()
                ),
            )
        }
        Command::Bench {
            model,
            audio_seconds,
            decoding,
            mode,
            repeats,
            seed,
            format,
        } => {
            let mut model: Model = load_model(&model)?;
            let want = match mode {
                Mode::Float32 => BenchMode::Float32,
                Mode::Int8 => BenchMode::Int8,
            };
            if want == BenchMode::Int8 && !model.config.quantized {
                if model.config.flavor == Flavor::FusionFormer && !model.config.fused {
                    model = fuse_model(&model)?.0;
                }
                model = quantize_model(&model)?.0;
            } else if want == BenchMode::Float32 && model.config.quantized {
                return Err(Error::InvalidArgument("model is int8; use --mode int8".into()));
            }
            let report = bench_rtf(
                &model,
                &decoding,
                BenchOptions {
                    audio_seconds,
                    repeats,
                    seed,
                },
            )?;
            match format {
                OutputFormat::Json => emit(out, &(report.to_json() + "\n")),
                OutputFormat::Table => emit(out, &report.to_table()),
            }
        }
        Command::Quantize { model, out: path } => {
            let model: Model = load_model(&model)?;
            let (q, report) = quantize_model(&model)?;
            save_model(&q, &path)?;
            for w in &report.warnings {
                emit(out, &format!("warning: {w}\n"))?;
            }
            emit(out, &format!("quantized {} layers\n", report.quantized_layers.len()))
        }
        Command::Lr { peak, warmup, step } => {
            let lr = noam_lr(ScheduleParams {
                lr_peak: peak,
                warmup,
                step,
            })?;
            emit(out, &format!("{lr}\n"))
        }
    }
}
