use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ivc_core::container::Container;
use ivc_core::entropy::context_model::train_context_model;
use ivc_core::entropy::ContextModelConfig;
use ivc_core::experiment::{evaluate_combo, plan_rates, TABLE_COMBOS};
use ivc_core::frames::{load_clips, load_frames, save_frames, ClipSet};
use ivc_core::hierarchy::{plan_to_bytes, write_plan_tsv, RateCombo, Role};
use ivc_core::metrics::{video_quality, MetricsRecord};
use ivc_core::models::{ModelSet, ModelSetConfig};
use ivc_core::train::{collect_codes, train_image, train_interp, ClipSource, Schedule, StepReport, TrainOptions};
use ivc_core::video::{decode_video, encode_video, BitStats, EncodeOptions};
use ivc_core::{CodecError, GridShape};

#[derive(Parser)]
#[command(name = "ivc", version, about = "Learned video codec with hierarchical interpolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model role on a clip corpus.
    Train(TrainArgs),
    /// Compress frames into a stream.
    Encode(EncodeArgs),
    /// Decompress a stream into frames.
    Decode(DecodeArgs),
    /// Compare decoded frames (or a stream) with the originals.
    Eval(EvalArgs),
    /// Encode clips at a list of rate combinations and print an RD table.
    Sweep(SweepArgs),
    /// Search rate combinations with the beam-search planner.
    Plan(PlanArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainRole {
    Image,
    M66,
    M33,
    M12,
    Context,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    role: TrainRole,
    /// Clips: a directory of clips, one clip, or synthetic:COUNT[:SEED].
    #[arg(long)]
    input: String,
    #[arg(long)]
    checkpoint_dir: PathBuf,
    /// Model sizes used when the checkpoint directory is new.
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Iterations unrolled per example.
    #[arg(long, default_value_t = 4)]
    iterations: usize,
    #[arg(long, default_value_t = 32)]
    crop: usize,
    /// Validation clips, checked every --validate-every steps.
    #[arg(long)]
    validation: Option<String>,
    #[arg(long, default_value_t = 0)]
    validate_every: usize,
    /// Train and code without block motion.
    #[arg(long)]
    no_motion: bool,
    /// Iteration counts used to produce codes for context training.
    #[arg(long, default_value = "5,3,2,1")]
    combo: RateCombo,
    #[arg(long, default_value_t = 16)]
    context_channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    checkpoint_dir: PathBuf,
    #[arg(long, default_value_t = 12)]
    gop: usize,
    #[arg(long, default_value = "5,3,2,1")]
    combo: RateCombo,
    #[arg(long, value_enum, default_value = "off")]
    entropy: Switch,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    /// A directory for PPM frames or a `.y4m` file.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    checkpoint_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Original frames.
    #[arg(long)]
    input: PathBuf,
    /// Decoded frames to score.
    #[arg(long, conflicts_with = "stream")]
    decoded: Option<PathBuf>,
    /// A stream to decode and score; also supplies the rate.
    #[arg(long, requires = "checkpoint_dir")]
    stream: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    input: String,
    #[arg(long)]
    checkpoint_dir: PathBuf,
    #[arg(long, default_value_t = 12)]
    gop: usize,
    /// Combinations separated by `;`; defaults to the reference table.
    #[arg(long)]
    combos: Option<String>,
    #[arg(long, value_enum, default_value = "off")]
    entropy: Switch,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    input: String,
    #[arg(long)]
    checkpoint_dir: PathBuf,
    /// Iteration options per level, e.g. `1,5,10;1,3,10;1,2,6;1,2`.
    #[arg(long, default_value = "1,5,10;1,3,10;1,2,6,10;1,2")]
    options: String,
    #[arg(long, value_enum, default_value = "off")]
    entropy: Switch,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// TSV report; little-endian records go next to it with `.bin` appended.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

type Result<T> = ivc_core::Result<T>;

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Plan(a) => plan(a),
    }
}

fn write_report(path: &Option<PathBuf>, text: &str) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, text)?;
    }
    Ok(())
}

fn open_or_create(dir: &Path, preset: &str, seed: u64) -> Result<ModelSet> {
    if dir.join("config.json").exists() {
        ModelSet::load(dir)
    } else {
        ModelSet::new(ModelSetConfig::preset(preset, seed)?)
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let clips = load_clips(&a.input)?;
    let val = a.validation.as_deref().map(load_clips).transpose()?;
    let mut models = open_or_create(&a.checkpoint_dir, &a.preset, a.seed)?;
    if a.no_motion {
        models.set_motion(false);
    }
    let motion = models.config().motion;
    let opts = TrainOptions {
        schedule: Schedule { steps: a.steps, batch: a.batch, lr: a.lr, seed: a.seed },
        iterations: a.iterations,
        crop: a.crop,
        validate_every: if val.is_some() { a.validate_every } else { 0 },
        patience: 3,
    };
    let mut log_lines = String::new();
    let mut log = |r: &StepReport| {
        let mut line = format!("{}\t{:.5}\t{:.2e}", r.step, r.loss, r.lr);
        if let Some(v) = r.validation {
            line.push_str(&format!("\t{v:.5}"));
        }
        if r.step.is_multiple_of(50) || r.validation.is_some() {
            println!("{line}");
        }
        log_lines.push_str(&line);
        log_lines.push('\n');
    };
    let no_validation = ClipSet::Loaded(Vec::new());
    let val_src: &dyn ClipSource = val.as_ref().unwrap_or(&no_validation);
    match a.role {
        TrainRole::Image => {
            train_image(models.image_mut(), &clips, val_src, &opts, &mut log)?;
        }
        TrainRole::M66 | TrainRole::M33 | TrainRole::M12 => {
            let role = match a.role {
                TrainRole::M66 => Role::M66,
                TrainRole::M33 => Role::M33,
                _ => Role::M12,
            };
            train_interp(models.interp_mut(role)?, &clips, val_src, motion, &opts, &mut log)?;
        }
        TrainRole::Context => {
            let codes = collect_codes(&models, &clips, a.combo)?;
            let config = ContextModelConfig { layers: 11, channels: a.context_channels };
            let limits = models.slot_limits();
            for (slot, grids) in codes.into_iter().enumerate() {
                if grids.is_empty() {
                    continue;
                }
                let first = clips.clip(0)?;
                let s = first[0].shape();
                let shape = GridShape::for_frame(limits[slot].0, s[1], s[2]);
                let (model, losses) = train_context_model(&grids, shape, config, &opts.schedule)?;
                println!(
                    "context slot {slot}: {} grids, final loss {:.4} bits/bit",
                    grids.len(),
                    losses.last().unwrap_or(&f64::NAN)
                );
                models.set_context(slot, model);
            }
        }
    }
    models.save(&a.checkpoint_dir)?;
    println!("saved {} (digest {:08x})", a.checkpoint_dir.display(), models.digest()?);
    write_report(&a.report, &log_lines)
}

fn print_stats(stats: &BitStats) -> String {
    format!(
        "frames\t{}\ntotal_bits\t{}\nheader_bits\t{}\ncode_bits\t{}\nmotion_bits\t{}\nframing_bits\t{}\n\
         bpp\t{:.6}\nbpp_without_motion\t{:.6}\ntotal_bpp\t{:.6}\n",
        stats.frames,
        stats.total_bits,
        stats.header_bits,
        stats.code_bits,
        stats.motion_bits,
        stats.framing_bits,
        stats.bpp(),
        stats.code_bpp(),
        stats.total_bpp()
    )
}

fn encode(a: EncodeArgs) -> Result<()> {
    let models = ModelSet::load(&a.checkpoint_dir)?;
    let frames = load_frames(&a.input)?;
    let opts = EncodeOptions { gop: a.gop, combo: a.combo, entropy: a.entropy == Switch::On };
    let enc = encode_video(&models, &frames, &opts)?;
    fs::write(&a.output, &enc.bytes)?;
    let text = print_stats(&enc.stats);
    print!("{text}");
    write_report(&a.report, &text)
}

fn read_stream(path: &Path) -> Result<(Container, usize)> {
    let bytes = fs::read(path)?;
    Ok((Container::parse(&bytes)?, bytes.len()))
}

fn decode(a: DecodeArgs) -> Result<()> {
    let (container, _) = read_stream(&a.input)?;
    let models = ModelSet::load(&a.checkpoint_dir)?;
    let frames = decode_video(&models, &container)?;
    save_frames(&frames, &a.output)?;
    println!("decoded {} frames to {}", frames.len(), a.output.display());
    Ok(())
}

fn record_text(r: &MetricsRecord) -> String {
    format!(
        "psnr\t{:.4}\nms_ssim\t{:.6}\nbpp\t{:.6}\nbpp_without_motion\t{:.6}\nframes\t{}\n",
        r.psnr, r.ms_ssim, r.bpp, r.bpp_without_motion, r.frames
    )
}

fn eval(a: EvalArgs) -> Result<()> {
    let original = load_frames(&a.input)?;
    let (decoded, stats) = match (&a.decoded, &a.stream) {
        (Some(d), _) => (load_frames(d)?, None),
        (None, Some(s)) => {
            let dir = a.checkpoint_dir.as_ref().expect("clap enforces --checkpoint-dir");
            let (container, len) = read_stream(s)?;
            let models = ModelSet::load(dir)?;
            let frames = decode_video(&models, &container)?;
            (frames, Some(BitStats::from_container(&container, len)?))
        }
        (None, None) => return Err(CodecError::invalid("pass --decoded or --stream")),
    };
    let (psnr, ms_ssim) = video_quality(&original, &decoded)?;
    let record = MetricsRecord {
        psnr,
        ms_ssim,
        bpp: stats.map_or(0.0, |s| s.bpp()),
        bpp_without_motion: stats.map_or(0.0, |s| s.code_bpp()),
        frames: original.len(),
    };
    let text = record_text(&record);
    print!("{text}");
    if let Some(p) = &a.report {
        let json = serde_json::to_string_pretty(&record).map_err(|e| CodecError::invalid(e.to_string()))?;
        fs::write(p, json)?;
    }
    Ok(())
}

fn parse_combos(s: &str) -> Result<Vec<RateCombo>> {
    s.split(';').filter(|c| !c.trim().is_empty()).map(|c| c.parse()).collect()
}

const RD_HEADER: &str = "K0\tK1\tK2\tK3\tbpp\tbpp_without_motion\tpsnr\tms_ssim\n";

fn sweep(a: SweepArgs) -> Result<()> {
    let models = ModelSet::load(&a.checkpoint_dir)?;
    let clips = load_clips(&a.input)?;
    let combos = match &a.combos {
        Some(s) => parse_combos(s)?,
        None => TABLE_COMBOS.iter().map(|&k| RateCombo(k)).collect(),
    };
    let mut out = String::from(RD_HEADER);
    print!("{RD_HEADER}");
    for combo in combos {
        let r = evaluate_combo(&models, &clips, a.gop, combo, a.entropy == Switch::On, a.threads)?;
        let [k0, k1, k2, k3] = combo.0;
        let row = format!(
            "{k0}\t{k1}\t{k2}\t{k3}\t{:.6}\t{:.6}\t{:.4}\t{:.6}\n",
            r.bpp, r.bpp_without_motion, r.psnr, r.ms_ssim
        );
        print!("{row}");
        std::io::stdout().flush()?;
        out.push_str(&row);
    }
    write_report(&a.report, &out)
}

fn parse_options(s: &str) -> Result<[Vec<usize>; 4]> {
    let levels: Vec<Vec<usize>> = s
        .split(';')
        .map(|l| l.split(',').map(|v| v.trim().parse::<usize>()).collect::<std::result::Result<_, _>>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CodecError::invalid(format!("bad --options {s:?}")))?;
    levels.try_into().map_err(|_| CodecError::invalid("--options needs four `;`-separated levels"))
}

fn plan(a: PlanArgs) -> Result<()> {
    let models = ModelSet::load(&a.checkpoint_dir)?;
    let clips = load_clips(&a.input)?;
    let options = parse_options(&a.options)?;
    let result = plan_rates(&models, &clips, &options, a.entropy == Switch::On, a.threads)?;
    let mut tsv = Vec::new();
    write_plan_tsv(&mut tsv, &result.envelope)?;
    std::io::stdout().write_all(&tsv)?;
    println!("# {} combinations evaluated", result.evaluations);
    if let Some(p) = &a.report {
        fs::write(p, &tsv)?;
        let mut bin = p.clone().into_os_string();
        bin.push(".bin");
        fs::write(PathBuf::from(bin), plan_to_bytes(&result.envelope))?;
    }
    Ok(())
}
