use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pvtc::codec::{CodecError, CodecModel};
use pvtc::config::{CodecConfig, ConfigError, ConfigMap, Dataset, Shape, TrainConfig};
use pvtc::io::{read_ply, write_ply, write_ply_real, PlyError, PlyFormat};
use pvtc::metrics::{bd_metrics, fmt_psnr, point_metrics, RdCurve};
use pvtc::pipeline::{self, PipelineError};
use pvtc::svg::{rd_plot, Series};
use pvtc::train::{self, load_dataset, parse_triples, TrainError, TrainOutputs};

#[derive(Parser)]
#[command(name = "pvtc", version, about = "Hybrid octree/voxel/point geometry codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a PLY cloud into a container.
    Encode(EncodeArgs),
    /// Reconstruct a PLY cloud from a container.
    Decode(DecodeArgs),
    /// D1/D2 PSNR of a test cloud against a reference.
    Eval(EvalArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train/evaluate one model per bit-interval triple.
    Sweep(SweepArgs),
    /// BD-rate and BD-PSNR between two metric CSVs.
    Bdrate(BdArgs),
    /// Generate a synthetic cloud.
    Synth(SynthArgs),
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Required unless the configuration is octree-only.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Print the CSV header before the row.
    #[arg(long)]
    header: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Write unrounded synthesized points as float coordinates.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    ascii: bool,
    #[arg(long)]
    header: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    bits: u8,
    /// Rate to record in the bpp column.
    #[arg(long)]
    bpp: Option<f64>,
    #[arg(long)]
    header: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    samples_per_epoch: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// `"c,m,f;c,m,f;..."`
    #[arg(long)]
    triples: String,
    /// Evaluation cloud; defaults to the first training cloud.
    #[arg(long)]
    input: Option<PathBuf>,
    /// RD curve CSV; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Per-triple table with the lambda used.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct BdArgs {
    #[arg(long)]
    anchor: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    header: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    shape: Shape,
    #[arg(long)]
    bits: u8,
    #[arg(long)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    ascii: bool,
}

/// Error with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

const USAGE: u8 = 2;
const IO: u8 = 3;
const FORMAT: u8 = 4;
const MISMATCH: u8 = 5;

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

impl From<PlyError> for Failure {
    fn from(e: PlyError) -> Self {
        let code = if matches!(e, PlyError::Io { .. }) { IO } else { FORMAT };
        fail(code, e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        fail(FORMAT, format!("config: {e}"))
    }
}

impl From<CodecError> for Failure {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Mismatch(_) => fail(MISMATCH, e.to_string()),
            CodecError::Autodiff(pvtc::autodiff::AutodiffError::Io { .. }) => fail(IO, e.to_string()),
            _ => fail(FORMAT, e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::ModelMismatch(_) => fail(MISMATCH, e.to_string()),
            PipelineError::Codec(c) => c.into(),
            _ => fail(FORMAT, e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } => fail(IO, e.to_string()),
            TrainError::Ply(p) => p.into(),
            TrainError::Codec(c) => c.into(),
            TrainError::Pipeline(p) => p.into(),
            _ => fail(FORMAT, e.to_string()),
        }
    }
}

type Res<T> = Result<T, Failure>;

fn read_file(p: &Path) -> Res<Vec<u8>> {
    std::fs::read(p).map_err(|e| fail(IO, format!("{}: {e}", p.display())))
}

fn write_file(p: &Path, data: impl AsRef<[u8]>) -> Res<()> {
    std::fs::write(p, data).map_err(|e| fail(IO, format!("{}: {e}", p.display())))
}

fn config_map(p: &Path) -> Res<ConfigMap> {
    let bytes = read_file(p)?;
    let text = String::from_utf8(bytes).map_err(|_| fail(FORMAT, format!("{}: not UTF-8", p.display())))?;
    Ok(ConfigMap::parse(&text)?)
}

fn load_model(p: &Path) -> Res<CodecModel> {
    if !p.exists() {
        return Err(fail(IO, format!("model file not found: {}", p.display())));
    }
    Ok(CodecModel::load(p)?)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn encode(a: EncodeArgs) -> Res<()> {
    let cfg = a.config.as_deref().map(config_map).transpose()?.map(|m| CodecConfig::from_map(&m)).transpose()?;
    let model = match (&a.model, cfg) {
        (Some(p), cfg) => {
            let m = load_model(p)?;
            if let Some(c) = cfg {
                if (c.n, c.n1_prime, c.n1, c.n2) != (m.cfg.n, m.cfg.n1_prime, m.cfg.n1, m.cfg.n2) {
                    return Err(fail(MISMATCH, format!("config intervals differ from model {}", p.display())));
                }
            }
            m
        }
        (None, Some(c)) if c.pure_octree() => CodecModel::new(c)?,
        (None, Some(_)) => return Err(fail(MISMATCH, "this configuration needs --model")),
        (None, None) => return Err(fail(USAGE, "either --model or an octree-only --config is required")),
    };
    let pc = read_ply(&a.input, Some(model.cfg.n))?;
    let t = Instant::now();
    let bytes = pipeline::encode(&pc, &model)?;
    let secs = t.elapsed().as_secs_f64();
    write_file(&a.output, &bytes)?;
    if a.header {
        println!("cloud,bpp,enc_seconds");
    }
    println!("{},{:.6},{:.4}", stem(&a.input), pipeline::bpp(bytes.len(), pc.len() as u64), secs);
    Ok(())
}

fn decode(a: DecodeArgs) -> Res<()> {
    let bytes = read_file(&a.input)?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    let t = Instant::now();
    let dec = pipeline::decode(&bytes, model.as_ref())?;
    let secs = t.elapsed().as_secs_f64();
    for w in &dec.warnings {
        eprintln!("warning: {w}");
    }
    let fmt = if a.ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
    if a.raw {
        write_ply_real(&dec.points, &a.output, fmt)?;
    } else {
        write_ply(&dec.cloud, &a.output, fmt)?;
    }
    if a.header {
        println!("cloud,points,dec_seconds");
    }
    println!("{},{},{:.4}", stem(&a.input), dec.cloud.len(), secs);
    Ok(())
}

fn eval(a: EvalArgs) -> Res<()> {
    let r = read_ply(&a.reference, Some(a.bits))?;
    let (t, _) = pvtc::io::ply::read_ply_points(&a.test)?;
    let m = point_metrics(&r.to_f64(), &t, a.bits).map_err(|e| fail(FORMAT, e.to_string()))?;
    if a.header {
        println!("cloud_id,bpp,d1_psnr,d2_psnr");
    }
    let bpp = a.bpp.map(|b| format!("{b:.6}")).unwrap_or_default();
    println!("{},{bpp},{},{}", stem(&a.test), fmt_psnr(m.d1_psnr), fmt_psnr(m.d2_psnr));
    Ok(())
}

fn train_config(map: &ConfigMap) -> Res<(CodecConfig, TrainConfig)> {
    Ok((CodecConfig::from_map(map)?, TrainConfig::from_map(map)?))
}

fn train_cmd(a: TrainArgs) -> Res<()> {
    let mut map = config_map(&a.config)?;
    if let Some(v) = a.lambda {
        map.set("lambda", v);
    }
    let (cfg, mut tc) = train_config(&map)?;
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.samples_per_epoch {
        tc.samples_per_epoch = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(p) = a.dataset {
        tc.dataset = Dataset::Path(p);
    }
    tc.validate()?;
    if cfg.pure_octree() {
        return Err(fail(USAGE, "octree-only configurations have nothing to train"));
    }
    let data = load_dataset(&tc.dataset, cfg.n)?;
    let mut model = CodecModel::new(cfg)?;
    let loss_log = a.loss_log.or_else(|| map.get("loss_log").map(PathBuf::from));
    let out = TrainOutputs {
        checkpoint: Some(a.output),
        loss_log,
    };
    let report = train::train(&mut model, &tc, &data, &out, |e, l| eprintln!("epoch {e} loss {l:.6}"))?;
    let first = report.epoch_means.first().copied().unwrap_or(f64::NAN);
    let last = report.epoch_means.last().copied().unwrap_or(f64::NAN);
    println!("epochs,first_loss,final_loss");
    println!("{},{first:.6},{last:.6}", report.epoch_means.len());
    Ok(())
}

fn sweep(a: SweepArgs) -> Res<()> {
    let map = config_map(&a.config)?;
    let triples = parse_triples(&a.triples)?;
    if triples.is_empty() {
        return Err(fail(USAGE, "no triples given"));
    }
    let (c, m, f) = triples[0];
    let mut base_map = map.clone();
    base_map.set("triple", format!("{c},{m},{f}"));
    let (base, mut tc) = train_config(&base_map)?;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let needs_training = triples.iter().any(|&(c, _, _)| c != base.n);
    let data = if needs_training || a.input.is_none() {
        load_dataset(&tc.dataset, base.n)?
    } else {
        Vec::new()
    };
    let eval = match &a.input {
        Some(p) => read_ply(p, Some(base.n))?,
        None => data[0].clone(),
    };
    let (curve, rows) = train::rate_point_sweep(&base, &triples, &tc, &data, &eval, |s| eprintln!("{s}"))?;
    let id = a.input.as_deref().map(stem).unwrap_or_else(|| match &tc.dataset {
        Dataset::Synthetic { shape, .. } => shape.to_string(),
        Dataset::Path(p) => stem(p),
    });
    let mut csv = String::from("cloud_id,bpp,d1_psnr,d2_psnr\n");
    for r in &rows {
        csv.push_str(&format!("{id},{:.6},{},{}\n", r.bpp, fmt_psnr(r.d1_psnr), fmt_psnr(r.d2_psnr)));
    }
    match &a.output {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.table {
        let mut t = String::from("triple,lambda,bpp,d1_psnr,d2_psnr\n");
        for r in &rows {
            let (c, m, f) = r.triple;
            t.push_str(&format!("{c}-{m}-{f},{},{:.6},{},{}\n", r.lambda, r.bpp, fmt_psnr(r.d1_psnr), fmt_psnr(r.d2_psnr)));
        }
        write_file(p, t)?;
    }
    if let Some(p) = &a.svg {
        let pts = curve.points().to_vec();
        write_file(p, rd_plot(&[Series { name: &id, points: &pts }], "rate-distortion sweep"))?;
    }
    Ok(())
}

/// Rows of a metric CSV grouped by cloud id: `(bpp, d1, d2)`.
type MetricRows = BTreeMap<String, Vec<(f64, f64, f64)>>;

fn read_metric_csv(p: &Path) -> Res<MetricRows> {
    let text = String::from_utf8(read_file(p)?).map_err(|_| fail(FORMAT, format!("{}: not UTF-8", p.display())))?;
    let mut out = MetricRows::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("cloud_id") {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || fail(FORMAT, format!("{}:{}: expected cloud_id,bpp,d1_psnr,d2_psnr", p.display(), i + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        let num = |s: &str| -> Res<f64> {
            if s == "inf" {
                Ok(f64::INFINITY)
            } else {
                s.parse().map_err(|_| bad())
            }
        };
        out.entry(cols[0].to_string()).or_default().push((num(cols[1])?, num(cols[2])?, num(cols[3])?));
    }
    if out.is_empty() {
        return Err(fail(FORMAT, format!("{}: no data rows", p.display())));
    }
    Ok(out)
}

fn bdrate(a: BdArgs) -> Res<()> {
    let anchor = read_metric_csv(&a.anchor)?;
    let test = read_metric_csv(&a.test)?;
    // a single curve on each side is compared regardless of its id
    let pairs: Vec<(String, &Vec<_>, &Vec<_>)> = if anchor.len() == 1 && test.len() == 1 {
        let (ka, va) = anchor.iter().next().unwrap();
        let (kt, vt) = test.iter().next().unwrap();
        let id = if ka == kt { ka.clone() } else { format!("{ka}-vs-{kt}") };
        vec![(id, va, vt)]
    } else {
        anchor
            .iter()
            .filter_map(|(k, va)| test.get(k).map(|vt| (k.clone(), va, vt)))
            .collect()
    };
    if pairs.is_empty() {
        return Err(fail(FORMAT, "no cloud ids in common"));
    }
    let curve = |v: &[(f64, f64, f64)], d2: bool| {
        RdCurve::new(v.iter().map(|r| (r.0, if d2 { r.2 } else { r.1 })).collect()).map_err(|e| fail(FORMAT, e.to_string()))
    };
    if a.header {
        println!("pair_id,bd_rate_d1,bd_rate_d2,bd_psnr_d1,bd_psnr_d2");
    }
    for (id, va, vt) in pairs {
        let r1 = bd_metrics(&curve(va, false)?, &curve(vt, false)?).map_err(|e| fail(FORMAT, e.to_string()))?;
        let r2 = bd_metrics(&curve(va, true)?, &curve(vt, true)?).map_err(|e| fail(FORMAT, e.to_string()))?;
        println!("{id},{:.2},{:.2},{:.2},{:.2}", r1.bd_rate, r2.bd_rate, r1.bd_psnr, r2.bd_psnr);
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Res<()> {
    let pc = train::synth_cloud(a.shape, a.bits, a.points, a.seed)?;
    let fmt = if a.ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
    write_ply(&pc, &a.output, fmt)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("PIVOTC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let res = match cli.cmd {
        Cmd::Encode(a) => encode(a),
        Cmd::Decode(a) => decode(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Bdrate(a) => bdrate(a),
        Cmd::Synth(a) => synth(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
