//! Command-line front end. Every mode is executed by a service instance
//! (in-process on 127.0.0.1:0 unless `--server` is given) through the HTTP
//! client, and every run leaves a `manifest.json` that can replay it.

use std::fs;
use std::path::{Path, PathBuf};

use avitmp_api as api;
use avitmp_client::{Client, ClientError};
use avitmp_core::ablation::{ablation_csv, ablation_csv_deterministic, Variant};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Track,
    Ablate,
    Gradcheck,
    /// Write a synthetic sequence directory.
    Generate,
}

#[derive(Debug, Parser)]
#[command(name = "avitmp", version, about = "Train, track, ablate and gradient-check the tracker")]
pub struct Args {
    #[arg(long, value_enum, required_unless_present = "from_manifest")]
    pub mode: Option<Mode>,
    /// TOML file with [model], [train], [loss], [world], [inference] and [eval] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub sequence: Option<PathBuf>,
    #[arg(long)]
    pub disable_jse: bool,
    #[arg(long)]
    pub disable_adaptor: bool,
    #[arg(long)]
    pub disable_cycletrack: bool,
    #[arg(long)]
    pub disable_dfu: bool,
    #[arg(long)]
    pub plain_decoder: bool,
    /// Gradcheck mode: also run one forward pass at paper-scale shapes.
    #[arg(long)]
    pub paper_scale: bool,
    /// Track mode: use a predictor that reads the ground truth.
    #[arg(long)]
    pub oracle: bool,
    /// Ablate mode: comma-separated subset of base,+jse,+adaptor,+both.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Gradcheck mode: break one backward rule (gelu, softmax, matmul).
    #[arg(long)]
    pub fault: Option<String>,
    /// Gradcheck mode: seeds per block.
    #[arg(long)]
    pub grad_seeds: Option<usize>,
    /// Replay the run recorded in a manifest; other run flags are ignored.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
    /// Use a running service instead of starting one in-process.
    #[arg(long)]
    pub server: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub model: api::ModelConfig,
    pub train: api::TrainConfig,
    pub loss: api::LossConfig,
    pub world: api::WorldConfig,
    pub inference: api::InferenceConfig,
    pub eval: api::EvalConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Switches {
    pub disable_jse: bool,
    pub disable_adaptor: bool,
    pub disable_cycletrack: bool,
    pub disable_dfu: bool,
    pub plain_decoder: bool,
}

impl Switches {
    fn any(&self) -> bool {
        self.disable_jse || self.disable_adaptor || self.disable_cycletrack || self.disable_dfu || self.plain_decoder
    }
}

/// Everything needed to execute a run, with switches already folded into
/// `config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub mode: Mode,
    pub seed: u64,
    pub switches: Switches,
    pub config: ConfigFile,
    pub checkpoint: Option<PathBuf>,
    pub sequence: Option<PathBuf>,
    pub oracle: bool,
    pub variants: Vec<Variant>,
    pub fault: Option<String>,
    pub grad_seeds: usize,
    pub paper_scale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub invocation: Invocation,
    pub inputs: Vec<InputHash>,
    /// Output files relative to the output directory, sorted, with hashes.
    pub artifacts: Vec<InputHash>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(format!("io: {e}"))
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// What a successful run reports besides its files.
#[derive(Debug)]
pub struct Outcome {
    pub code: u8,
    pub stdout: String,
}

fn io_ctx(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::usage(format!("{}: {e}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn files_under(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// File hash, or for a directory the hash over its relative paths and
/// file contents in sorted order.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut h = Sha256::new();
        for rel in files_under(path).map_err(io_ctx(path))? {
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(fs::read(path.join(&rel)).map_err(io_ctx(path))?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    } else {
        Ok(sha256_hex(&fs::read(path).map_err(io_ctx(path))?))
    }
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    names
        .iter()
        .map(|n| Variant::parse(n.trim()).map_err(|e| CliError::usage(e.to_string())))
        .collect()
}

/// Validates flag combinations and folds switches into the configuration.
pub fn resolve(args: &Args) -> Result<Invocation> {
    let mode = args.mode.ok_or_else(|| CliError::usage("--mode is required"))?;
    let mut config = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_ctx(p))?;
            toml::from_str::<ConfigFile>(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => ConfigFile::default(),
    };
    let switches = Switches {
        disable_jse: args.disable_jse,
        disable_adaptor: args.disable_adaptor,
        disable_cycletrack: args.disable_cycletrack,
        disable_dfu: args.disable_dfu,
        plain_decoder: args.plain_decoder,
    };
    let usage = |flag: &str, modes: &str| Err(CliError::usage(format!("{flag} is only valid with --mode {modes}")));
    if switches.any() && !matches!(mode, Mode::Track | Mode::Ablate) {
        return usage("ablation switches", "track or ablate");
    }
    if args.paper_scale && mode != Mode::Gradcheck {
        return usage("--paper-scale", "gradcheck");
    }
    if args.oracle && mode != Mode::Track {
        return usage("--oracle", "track");
    }
    if args.variants.is_some() && mode != Mode::Ablate {
        return usage("--variants", "ablate");
    }
    if (args.fault.is_some() || args.grad_seeds.is_some()) && mode != Mode::Gradcheck {
        return usage("--fault and --grad-seeds", "gradcheck");
    }
    if args.checkpoint.is_some() && mode != Mode::Track {
        return usage("--checkpoint", "track");
    }
    if args.sequence.is_some() && mode != Mode::Track {
        return usage("--sequence", "track");
    }

    let model = &mut config.model;
    model.use_jse &= !switches.disable_jse;
    model.use_adaptor &= !switches.disable_adaptor;
    model.plain_decoder |= switches.plain_decoder;
    config.inference.use_cycletrack &= !switches.disable_cycletrack;
    config.inference.use_dfu &= !switches.disable_dfu;

    let variants = match (&args.variants, mode) {
        (Some(_), _) if switches.disable_jse || switches.disable_adaptor => {
            return Err(CliError::usage("--variants cannot be combined with --disable-jse/--disable-adaptor"));
        }
        (Some(v), _) => parse_variants(v)?,
        (None, Mode::Ablate) if switches.disable_jse || switches.disable_adaptor => {
            vec![match (switches.disable_jse, switches.disable_adaptor) {
                (true, true) => Variant::Base,
                (true, false) => Variant::Adaptor,
                _ => Variant::Jse,
            }]
        }
        (None, Mode::Ablate) => Variant::ALL.to_vec(),
        (None, _) => Vec::new(),
    };
    if mode == Mode::Ablate && variants.is_empty() {
        return Err(CliError::usage("no variants requested"));
    }
    if mode == Mode::Track {
        if args.sequence.is_none() {
            return Err(CliError::usage("--mode track needs --sequence"));
        }
        if args.checkpoint.is_none() && !args.oracle {
            return Err(CliError::usage("--mode track needs --checkpoint or --oracle"));
        }
    }
    Ok(Invocation {
        mode,
        seed: args.seed,
        switches,
        config,
        checkpoint: args.checkpoint.clone(),
        sequence: args.sequence.clone(),
        oracle: args.oracle,
        variants,
        fault: args.fault.clone(),
        grad_seeds: args.grad_seeds.unwrap_or(avitmp_core::gradsuite::DEFAULT_SEEDS),
        paper_scale: args.paper_scale,
    })
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(io_ctx(p))
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = out.join(name);
    fs::write(&p, contents).map_err(io_ctx(&p))
}

fn input_hashes(inv: &Invocation) -> Result<Vec<InputHash>> {
    let mut v = Vec::new();
    for p in inv.checkpoint.iter().chain(inv.sequence.iter()) {
        if !p.exists() {
            return Err(CliError::usage(format!("{}: no such file or directory", p.display())));
        }
        v.push(InputHash {
            path: p.clone(),
            sha256: hash_path(p)?,
        });
    }
    Ok(v)
}

fn table_line(cells: &[String]) -> String {
    let mut s = cells.join("  ");
    s.push('\n');
    s
}

/// Runs one invocation against the service, writing artifacts and the
/// manifest into `out`.
pub async fn execute(client: &Client, inv: &Invocation, out: &Path) -> Result<Outcome> {
    let inputs = input_hashes(inv)?;
    fs::create_dir_all(out).map_err(io_ctx(out))?;
    let out = absolute(out)?;
    let cfg = &inv.config;
    let mut stdout = String::new();
    let mut code = EXIT_OK;
    match inv.mode {
        Mode::Train => {
            let resp = client
                .train(&api::TrainRequest {
                    model: cfg.model.clone(),
                    train: cfg.train.clone(),
                    loss: cfg.loss.clone(),
                    world: cfg.world.clone(),
                    inference: cfg.inference.clone(),
                    seed: inv.seed,
                })
                .await?;
            let bytes = B64
                .decode(&resp.checkpoint)
                .map_err(|e| CliError::usage(format!("service sent a malformed checkpoint: {e}")))?;
            write(&out, "checkpoint.bin", bytes)?;
            write(&out, "loss.csv", &resp.loss_log)?;
            let last = resp.loss_log.lines().last().unwrap_or_default();
            stdout.push_str(&format!("trained {} steps, {} parameter tensors; last row {last}\n", cfg.train.steps, resp.parameters));
        }
        Mode::Track => {
            let checkpoint = match (&inv.checkpoint, inv.oracle) {
                (Some(p), false) => Some(B64.encode(fs::read(p).map_err(io_ctx(p))?)),
                _ => None,
            };
            let sequence = absolute(inv.sequence.as_ref().expect("validated"))?;
            let resp = client
                .track(&api::TrackRequest {
                    model: cfg.model.clone(),
                    inference: cfg.inference.clone(),
                    checkpoint,
                    oracle: inv.oracle,
                    sequence: sequence.to_string_lossy().into_owned(),
                })
                .await?;
            let metrics = serde_json::to_string(&resp.metrics).expect("metrics serialize");
            write(&out, "metrics.json", format!("{metrics}\n"))?;
            write(&out, "diagnostics.jsonl", &resp.diagnostics)?;
            let mut boxes = String::from("frame,x,y,w,h\n");
            for (i, b) in resp.boxes.iter().enumerate() {
                boxes.push_str(&format!("{i},{},{},{},{}\n", b.x, b.y, b.w, b.h));
            }
            write(&out, "boxes.csv", boxes)?;
            stdout.push_str(&format!("{metrics}\n"));
        }
        Mode::Ablate => {
            let resp = client
                .ablate(&api::AblateRequest {
                    variants: inv.variants.clone(),
                    model: cfg.model.clone(),
                    train: cfg.train.clone(),
                    loss: cfg.loss.clone(),
                    world: cfg.world.clone(),
                    inference: cfg.inference.clone(),
                    eval: cfg.eval.clone(),
                })
                .await?;
            // throughput is wall-clock, so it goes to stdout only
            write(&out, "ablation.csv", ablation_csv_deterministic(&resp.rows))?;
            stdout.push_str(&ablation_csv(&resp.rows));
        }
        Mode::Gradcheck => {
            let resp = client
                .gradcheck(&api::GradcheckRequest {
                    seeds: inv.grad_seeds,
                    fault: inv.fault.clone(),
                    paper_scale: inv.paper_scale,
                })
                .await?;
            let json = serde_json::to_string_pretty(&resp).expect("report serializes");
            write(&out, "gradcheck.json", format!("{json}\n"))?;
            for b in &resp.report.blocks {
                stdout.push_str(&table_line(&[
                    format!("{:<13}", b.name),
                    format!("seeds={}", b.seeds),
                    format!("max_rel_err={:.3e}", b.max_rel_error),
                    (if b.pass { "pass" } else { "FAIL" }).to_string(),
                ]));
            }
            if let Some(s) = &resp.shapes {
                stdout.push_str(&format!(
                    "paper-scale shapes: encoder {:?}, decoder {:?}\n",
                    s.encoder_output, s.decoder_output
                ));
            }
            let verdict = if resp.report.pass { "pass" } else { "FAIL" };
            stdout.push_str(&format!("gradient suite: {verdict}\n"));
            if !resp.report.pass {
                code = EXIT_CHECK_FAILED;
            }
        }
        Mode::Generate => {
            let resp = client
                .generate(&api::GenerateRequest {
                    world: cfg.world.clone(),
                    seed: inv.seed,
                    out: out.to_string_lossy().into_owned(),
                })
                .await?;
            stdout.push_str(&format!("wrote {} frames to {}\n", resp.frames, out.display()));
        }
    }
    let artifacts = files_under(&out)
        .map_err(io_ctx(&out))?
        .into_iter()
        .filter(|p| p != Path::new(MANIFEST))
        .map(|rel| {
            Ok(InputHash {
                sha256: hash_path(&out.join(&rel))?,
                path: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        invocation: inv.clone(),
        inputs,
        artifacts,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out, MANIFEST, format!("{text}\n"))?;
    Ok(Outcome { code, stdout })
}

/// Loads a manifest and checks that its inputs are unchanged.
pub fn replay(path: &Path) -> Result<Invocation> {
    let text = fs::read_to_string(path).map_err(io_ctx(path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    for input in &m.inputs {
        let now = hash_path(&input.path)?;
        if now != input.sha256 {
            return Err(CliError::usage(format!("input {} changed since the manifest was written", input.path.display())));
        }
    }
    Ok(m.invocation)
}

/// Runs `args` end to end, starting a service if needed.
pub async fn run(args: Args) -> Result<Outcome> {
    let inv = match &args.from_manifest {
        Some(p) => replay(p)?,
        None => resolve(&args)?,
    };
    let (client, server) = match &args.server {
        Some(url) => (Client::new(url.clone()), None),
        None => {
            let (addr, task) = avitmp_service::spawn(([127, 0, 0, 1], 0).into()).await?;
            (Client::new(format!("http://{addr}")), Some(task))
        }
    };
    let result = execute(&client, &inv, &args.out).await;
    if let Some(task) = server {
        task.abort();
    }
    result
}
