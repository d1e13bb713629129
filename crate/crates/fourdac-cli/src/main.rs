//! Command line front end: synthesize sequences, train models, encode,
//! decode, evaluate, and sweep rate-distortion curves.
//!
//! A sequence argument is either a directory of PLY frames taken in
//! lexicographic order or a JSON manifest `{"frames": [...]}` with paths
//! resolved relative to the manifest file. Frame PLYs written by this tool
//! (double colors plus depth comments) load as exact voxel frames and must
//! match the working depth; raw uchar-color clouds are voxelized at it.
//! Failures print one machine-parsable line to stderr,
//! `error category=<name> msg="..."`, and exit nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use fourdac::codec::{train, CodecConfig, DatasetSpec, Decoder, Encoder};
use fourdac::coder::bitstream::read_frame;
use fourdac::model::ModelParams;
use fourdac::ply::{read_ply, read_ply_frame, write_ply};
use fourdac::report::{FrameReport, Report};
use fourdac::synth::{generate_sequence, SequenceSpec};
use fourdac::{compute_metrics, voxelize, Error, Frame, Result};

#[derive(Parser)]
#[command(name = "fourdac", version, about = "Dynamic point cloud attribute codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a PLY sequence into a compressed stream.
    Encode {
        /// Sequence directory or JSON manifest.
        #[arg(long)]
        input: PathBuf,
        /// Output stream path.
        #[arg(long)]
        output: PathBuf,
        /// Codec configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Trained model file; overrides the config's `model_path`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Decode a compressed stream against its geometry sequence.
    Decode {
        /// Compressed stream path.
        #[arg(long)]
        input: PathBuf,
        /// Geometry sequence directory or JSON manifest.
        #[arg(long)]
        geometry: PathBuf,
        /// Directory for decoded PLY frames.
        #[arg(long)]
        output: PathBuf,
        /// Model file matching the one the stream was encoded with.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Measure rate and quality of a decoded sequence; prints a JSON report.
    Eval {
        /// Original sequence directory or JSON manifest.
        #[arg(long)]
        original: PathBuf,
        /// Decoded sequence directory or JSON manifest.
        #[arg(long)]
        decoded: PathBuf,
        /// The compressed stream the decoded frames came from.
        #[arg(long)]
        bits: PathBuf,
    },
    /// Train model parameters on synthetic sequences.
    Train {
        /// Dataset description JSON.
        #[arg(long)]
        dataset: PathBuf,
        /// Output model file; the loss log lands next to it as `.log.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic PLY sequence with ground-truth flow.
    Synth {
        /// Sequence spec JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode and decode at several quantization steps and tabulate
    /// rate against distortion.
    RdCurve {
        /// Sequence directory or JSON manifest.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated quantization steps, e.g. 5,10,20,40.
        #[arg(long)]
        qsteps: String,
        /// Output base path; writes `<out>.csv` and `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error category={} msg={:?}", err.category(), err.to_string());
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Encode { input, output, config, model } => {
            cmd_encode(&input, &output, &config, model.as_deref())
        }
        Command::Decode { input, geometry, output, model } => {
            cmd_decode(&input, &geometry, &output, model.as_deref())
        }
        Command::Eval { original, decoded, bits } => cmd_eval(&original, &decoded, &bits),
        Command::Train { dataset, out } => cmd_train(&dataset, &out),
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::RdCurve { input, qsteps, out } => cmd_rd_curve(&input, &qsteps, &out),
    }
}

#[derive(Deserialize)]
struct Manifest {
    frames: Vec<PathBuf>,
}

fn frame_paths(input: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    if input.is_dir() {
        for entry in fs::read_dir(input)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
                paths.push(path);
            }
        }
        paths.sort();
    } else {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(input)?)?;
        let base = input.parent().map(Path::to_path_buf).unwrap_or_default();
        paths = manifest
            .frames
            .into_iter()
            .map(|p| if p.is_absolute() { p } else { base.join(p) })
            .collect();
    }
    if paths.is_empty() {
        return Err(Error::ParseError(format!(
            "no PLY frames under {}",
            input.display()
        )));
    }
    Ok(paths)
}

fn load_config(path: &Path) -> Result<CodecConfig> {
    let config: CodecConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
    config.validate()?;
    Ok(config)
}

fn load_frame(path: &Path, depth: u8, index: u32) -> Result<Frame> {
    if let Ok(mut frame) = read_ply_frame(path) {
        if frame.depth != depth {
            return Err(Error::GeometryMismatch(format!(
                "{} is voxelized at depth {}, expected {depth}",
                path.display(),
                frame.depth
            )));
        }
        frame.frame_index = index;
        return Ok(frame);
    }
    voxelize(&read_ply(path)?, depth, index)
}

/// Frame-style inputs carry their own depth; raw clouds take the fallback.
fn sequence_depth(paths: &[PathBuf], fallback: u8) -> u8 {
    read_ply_frame(&paths[0]).map_or(fallback, |f| f.depth)
}

fn cmd_encode(input: &Path, output: &Path, config: &Path, model: Option<&Path>) -> Result<()> {
    let config = load_config(config)?;
    let model_path = model.or(config.model_path.as_deref());
    let model = model_path.map(ModelParams::load).transpose()?;
    let paths = frame_paths(input)?;
    let mut encoder = Encoder::new(config.clone(), model)?;
    let mut stream = Vec::new();
    for (index, path) in paths.iter().enumerate() {
        let frame = load_frame(path, config.depth, index as u32)?;
        let start = Instant::now();
        let bytes = encoder.encode_frame(&frame)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        println!(
            "frame {index}: {} points, {} bytes, {ms:.2} ms",
            frame.positions.len(),
            bytes.len()
        );
        stream.extend_from_slice(&bytes);
    }
    fs::write(output, &stream)?;
    println!(
        "wrote {} bytes for {} frames to {}",
        stream.len(),
        paths.len(),
        output.display()
    );
    Ok(())
}

fn cmd_decode(input: &Path, geometry: &Path, output: &Path, model: Option<&Path>) -> Result<()> {
    let stream = fs::read(input)?;
    let geometry_paths = frame_paths(geometry)?;
    let model = model.map(ModelParams::load).transpose()?;
    let mut decoder = Decoder::new(model);
    fs::create_dir_all(output)?;
    let mut offset = 0usize;
    let mut index = 0usize;
    while offset < stream.len() {
        let (header, _, _) = read_frame(&stream[offset..])?;
        let Some(path) = geometry_paths.get(index) else {
            return Err(Error::GeometryMismatch(format!(
                "stream continues past the {} geometry frames",
                geometry_paths.len()
            )));
        };
        let geometry_frame = load_frame(path, header.depth, index as u32)?;
        let start = Instant::now();
        let (frame, used) = decoder.decode_frame(&stream[offset..], &geometry_frame)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let out_path = output.join(format!("frame_{index:04}.ply"));
        write_ply(&frame, &out_path)?;
        println!(
            "frame {index}: {} points, {ms:.2} ms -> {}",
            frame.positions.len(),
            out_path.display()
        );
        offset += used;
        index += 1;
    }
    println!("decoded {index} frames to {}", output.display());
    Ok(())
}

fn cmd_eval(original: &Path, decoded: &Path, bits: &Path) -> Result<()> {
    let stream = fs::read(bits)?;
    let original_paths = frame_paths(original)?;
    let decoded_paths = frame_paths(decoded)?;
    let mut config = CodecConfig::default();
    let mut model_hash = 0u64;
    let mut rows = Vec::new();
    let mut offset = 0usize;
    let mut index = 0usize;
    while offset < stream.len() {
        let (header, _, used) = read_frame(&stream[offset..])?;
        let (Some(orig_path), Some(dec_path)) =
            (original_paths.get(index), decoded_paths.get(index))
        else {
            return Err(Error::GeometryMismatch(format!(
                "stream frame {index} has no matching original or decoded PLY"
            )));
        };
        let orig = load_frame(orig_path, header.depth, index as u32)?;
        let dec = read_ply_frame(dec_path)?;
        let metrics = compute_metrics(&orig, &dec, used as u64 * 8)?;
        if index == 0 {
            config.depth = header.depth;
            config.qstep = header.qstep as f64;
        }
        if header.model_hash != 0 {
            model_hash = header.model_hash;
        }
        rows.push(FrameReport {
            frame_index: index as u32,
            bpp: metrics.bpp,
            psnr_y: metrics.psnr_y,
            encode_ms: 0.0,
            decode_ms: 0.0,
        });
        offset += used;
        index += 1;
    }
    let report = Report::new(config, model_hash, rows);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_train(dataset: &Path, out: &Path) -> Result<()> {
    let spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(dataset)?)?;
    let (model, log) = train(&spec)?;
    model.save(out)?;
    let log_path = out.with_extension("log.json");
    fs::write(&log_path, serde_json::to_string_pretty(&log)?)?;
    for stage in ["me", "mc", "joint"] {
        if let Some(entry) = log.iter().rev().find(|e| e.stage == stage) {
            println!(
                "stage {stage}: {} epochs, final loss {:.6}",
                entry.epoch + 1,
                entry.loss
            );
        }
    }
    println!(
        "model {:016x} -> {} (log {})",
        model.content_hash(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_synth(spec: &Path, out: &Path) -> Result<()> {
    let spec: SequenceSpec = serde_json::from_str(&fs::read_to_string(spec)?)?;
    let frames = generate_sequence(&spec)?;
    fs::create_dir_all(out)?;
    let mut names = Vec::new();
    for (index, (frame, flow)) in frames.iter().enumerate() {
        let name = format!("frame_{index:04}.ply");
        write_ply(frame, &out.join(&name))?;
        fs::write(
            out.join(format!("frame_{index:04}.flow.json")),
            serde_json::to_string(&serde_json::json!({ "vectors": flow.vectors }))?,
        )?;
        names.push(name);
    }
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "frames": names }))?,
    )?;
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn cmd_rd_curve(input: &Path, qsteps: &str, out: &Path) -> Result<()> {
    let steps = parse_qsteps(qsteps)?;
    let paths = frame_paths(input)?;
    let mut config = CodecConfig::default();
    config.depth = sequence_depth(&paths, config.depth);
    let mut frames = Vec::new();
    for (index, path) in paths.iter().enumerate() {
        frames.push(load_frame(path, config.depth, index as u32)?);
    }
    let mut results = Vec::new();
    thread::scope(|scope| {
        let mut handles = Vec::new();
        for &qstep in &steps {
            let frames = &frames;
            let config = &config;
            handles.push(scope.spawn(move || sweep_point(config, qstep, frames)));
        }
        for handle in handles {
            results.push(handle.join().expect("rd-curve worker panicked"));
        }
    });
    let mut reports = Vec::new();
    for result in results {
        reports.push(result?);
    }
    let csv_path = out.with_extension("csv");
    let json_path = out.with_extension("json");
    let mut csv = String::from("qstep,mean_bpp,mean_psnr_y,mean_encode_ms,mean_decode_ms\n");
    for report in &reports {
        csv.push_str(&format!(
            "{},{},{},{:.3},{:.3}\n",
            report.config.qstep,
            report.mean_bpp,
            report.mean_psnr_y,
            report.mean_encode_ms,
            report.mean_decode_ms
        ));
        println!(
            "qstep {}: {:.4} bpp, {:.2} dB",
            report.config.qstep, report.mean_bpp, report.mean_psnr_y
        );
    }
    fs::write(&csv_path, csv)?;
    fs::write(&json_path, serde_json::to_string_pretty(&reports)?)?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

/// One rate-distortion sweep point: a fresh encode/decode chain over the
/// whole sequence at the given step, geometry shared with the encoder.
fn sweep_point(base: &CodecConfig, qstep: f64, frames: &[Frame]) -> Result<Report> {
    let mut config = base.clone();
    config.qstep = qstep;
    let mut encoder = Encoder::new(config.clone(), None)?;
    let mut decoder = Decoder::new(None);
    let mut rows = Vec::new();
    for (index, frame) in frames.iter().enumerate() {
        let start = Instant::now();
        let bytes = encoder.encode_frame(frame)?;
        let encode_ms = start.elapsed().as_secs_f64() * 1e3;
        let start = Instant::now();
        let (decoded, used) = decoder.decode_frame(&bytes, frame)?;
        let decode_ms = start.elapsed().as_secs_f64() * 1e3;
        debug_assert_eq!(used, bytes.len());
        let metrics = compute_metrics(frame, &decoded, bytes.len() as u64 * 8)?;
        rows.push(FrameReport {
            frame_index: index as u32,
            bpp: metrics.bpp,
            psnr_y: metrics.psnr_y,
            encode_ms,
            decode_ms,
        });
    }
    Ok(Report::new(config, 0, rows))
}

fn parse_qsteps(text: &str) -> Result<Vec<f64>> {
    let mut steps = Vec::new();
    for part in text.split(',') {
        let qstep: f64 = part
            .trim()
            .parse()
            .map_err(|_| Error::ParseError(format!("bad qstep {part:?}")))?;
        if !qstep.is_finite() || qstep <= 0.0 {
            return Err(Error::ParseError(format!(
                "qstep must be positive and finite, got {part}"
            )));
        }
        steps.push(qstep);
    }
    Ok(steps)
}
