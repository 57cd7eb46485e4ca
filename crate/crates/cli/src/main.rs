use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ipslt::checkpoint::Checkpoint;
use ipslt::config::RunConfig;
use ipslt::data::{generate_dataset, load_dataset, save_dataset, DataError, Sample, SyntheticTaskSpec, TaskKind, Vocabulary};
use ipslt::decode::{translate, translate_greedy, BeamConfig};
use ipslt::gradcheck::{check_model, GradCheckDims, TOLERANCE};
use ipslt::metrics::{score_corpus, token_accuracy, CorpusScore};
use ipslt::train::{EpochRecord, Trainer};
use ipslt::{OpKind, TensorError};

/// Exit code 2 for usage errors, 1 for runtime errors.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Usage(m) => Self::Usage(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Usage(m) => Self::Usage(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<ipslt::config::ConfigError> for CliError {
    fn from(e: ipslt::config::ConfigError) -> Self {
        match e {
            ipslt::config::ConfigError::Io { .. } => Self::Runtime(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<ipslt::checkpoint::CheckpointError> for CliError {
    fn from(e: ipslt::checkpoint::CheckpointError) -> Self {
        match e {
            ipslt::checkpoint::CheckpointError::Mismatch(_) => Self::Usage(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "ipslt", version, about = "Iterative prototype refinement: data, training, evaluation and decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/dev/test splits of a synthetic task.
    GenData(GenDataArgs),
    /// Train a model (warm start, then the full objective).
    Train(TrainArgs),
    /// Decode a split and print BLEU-1..4, ROUGE-L and token accuracy as JSON.
    Evaluate(EvaluateArgs),
    /// Decode every sample of a dataset file, one line per sample.
    Translate(TranslateArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task spec (TOML), either a bare spec or a run config with a [data] table.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing split files.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    n_symbols: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    dev: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

/// Flags that override run-config values.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Refinement iterations K.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    warm_start_max_epochs: Option<usize>,
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.iterations {
            c.model.iterations = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.beta {
            c.model.beta = v;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.dropout {
            c.model.dropout = v;
        }
        if let Some(v) = self.warm_start_max_epochs {
            c.train.warm_start_max_epochs = v;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.tsv and dev.tsv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    stop_after: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A dataset file, or a directory holding `<split>.tsv`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Greedy search instead of beam search.
    #[arg(long, conflicts_with_all = ["beam_width", "length_penalty"])]
    greedy: bool,
    /// Also write the record to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file; targets may be empty.
    #[arg(long)]
    input: PathBuf,
    /// Decode with fewer refinement iterations than trained.
    #[arg(long = "K-override", alias = "k-override")]
    k_override: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// `C,heads,L_e,K`.
    #[arg(long, default_value = "8,2,1,2")]
    dims: GradCheckDims,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Perturb the gradient rule of one primitive (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<OpKind>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn read_spec(path: &Path) -> Result<SyntheticTaskSpec> {
    let text = read_text(path)?;
    let value: toml::Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if value.contains_key("data") {
        Ok(RunConfig::from_toml(&text)?.data)
    } else {
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => SyntheticTaskSpec::default(),
    };
    if let Some(v) = a.task {
        spec.task = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    if let Some(v) = a.n_symbols {
        spec.n_symbols = v;
    }
    if let Some(v) = a.train {
        spec.train = v;
    }
    if let Some(v) = a.dev {
        spec.dev = v;
    }
    if let Some(v) = a.test {
        spec.test = v;
    }
    spec.validate()?;
    let splits = generate_dataset(&spec)?;
    create_dir(&a.out)?;
    let files: Vec<PathBuf> = splits.named().iter().map(|(n, _)| a.out.join(format!("{n}.tsv"))).collect();
    if !a.force {
        if let Some(p) = files.iter().find(|p| p.exists()) {
            return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    for ((name, samples), path) in splits.named().iter().zip(&files) {
        save_dataset(samples, path)?;
        println!("{name}\t{}", samples.len());
    }
    write_file(&a.out.join("spec.toml"), toml::to_string(&spec).expect("spec serialises"))?;
    Ok(())
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let path = dir.join(format!("{split}.tsv"));
    if !path.exists() {
        return Err(CliError::Runtime(format!("{}: no such file", path.display())));
    }
    Ok(load_dataset(&path)?)
}

fn check_samples(config: &RunConfig, samples: &[Sample], what: &str) -> Result<()> {
    for s in samples {
        if s.frames.cols() != config.model.frame_dim {
            return Err(CliError::Usage(format!(
                "{what} sample {} has frame_dim {} but model.frame_dim is {}",
                s.id,
                s.frames.cols(),
                config.model.frame_dim
            )));
        }
        if let Some(&t) = s.target.iter().find(|&&t| t >= config.model.vocab_size) {
            return Err(CliError::Usage(format!(
                "{what} sample {} has token {t} outside model.vocab_size {}",
                s.id, config.model.vocab_size
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config: &'a RunConfig,
}

fn train(a: TrainArgs) -> Result<()> {
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut config = match (&a.config, &resumed) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => RunConfig::default(),
    };
    a.overrides.apply(&mut config);
    config.validate()?;

    let mut trainer = match &resumed {
        Some(ck) => {
            if let Some(key) = ck.config.first_resume_mismatch(&config) {
                return Err(CliError::Usage(format!(
                    "cannot resume: config key `{key}` differs from the checkpoint"
                )));
            }
            let mut t = ck.trainer()?;
            t.config = config.clone();
            t
        }
        None => Trainer::new(config.clone())?,
    };

    let train_set = load_split(&a.data, "train")?;
    let dev_set = load_split(&a.data, "dev")?;
    check_samples(&config, &train_set, "train")?;
    check_samples(&config, &dev_set, "dev")?;

    create_dir(&a.out)?;
    write_file(&a.out.join("config.toml"), config.to_toml())?;
    let log_path = a.out.join("train.log.jsonl");
    let mut log = String::new();
    log += &serde_json::to_string(&LogHeader { config: &config }).expect("config serialises");
    log.push('\n');
    if resumed.is_some() && log_path.exists() {
        // keep the records of the epochs the checkpoint already covers
        for line in read_text(&log_path)?.lines().skip(1) {
            let rec: EpochRecord = serde_json::from_str(line)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
            if rec.epoch < trainer.state.epochs_done {
                log += line;
                log.push('\n');
            }
        }
    }
    write_file(&log_path, &log)?;

    let out = a.out.clone();
    let records = trainer.train(&train_set, &dev_set, a.stop_after, |t, rec| -> Result<()> {
        let ck = Checkpoint::from_trainer(t);
        let bytes = ck.to_bytes();
        if t.config.train.keep_epoch_checkpoints {
            write_file(&out.join(format!("epoch-{:03}.ckpt", rec.epoch + 1)), &bytes)?;
        }
        write_file(&out.join("last.ckpt"), &bytes)?;
        if rec.best {
            write_file(&out.join("best.ckpt"), &bytes)?;
        }
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| io_err(&log_path, e))?;
        let line = serde_json::to_string(rec).expect("record serialises");
        writeln!(f, "{line}").map_err(|e| io_err(&log_path, e))?;
        println!("{line}");
        Ok(())
    })?;
    if records.is_empty() {
        eprintln!("nothing to do: {} of {} epochs already complete", trainer.state.epochs_done, config.train.epochs);
    }
    Ok(())
}

fn resolve_split(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{split}.tsv"))
    } else {
        data.to_path_buf()
    }
}

fn beam_from(config: &RunConfig, width: Option<usize>, alpha: Option<f64>, max_len: Option<usize>) -> Result<BeamConfig> {
    let mut beam = config.beam.clone();
    if let Some(w) = width {
        beam.width = w;
    }
    if let Some(a) = alpha {
        beam.length_penalty = a;
    }
    if max_len.is_some() {
        beam.max_len = max_len;
    }
    if beam.width == 0 {
        return Err(CliError::Usage("beam width must be at least 1".into()));
    }
    Ok(beam)
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    split: &'a str,
    checkpoint: String,
    search: &'static str,
    score: CorpusScore,
    token_accuracy: f64,
    beam: &'a BeamConfig,
    config: &'a RunConfig,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.model()?;
    let beam = beam_from(&ck.config, a.beam_width, a.length_penalty, a.max_len)?;
    let path = resolve_split(&a.data, &a.split);
    if !path.exists() {
        return Err(CliError::Runtime(format!("{}: no such file", path.display())));
    }
    let samples = load_dataset(&path)?;
    check_samples(&ck.config, &samples, "evaluation")?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("{} holds no samples", path.display())));
    }
    let mut hyps = Vec::with_capacity(samples.len());
    for s in &samples {
        let t = if a.greedy {
            translate_greedy(&model, &s.frames, beam.max_len, None)?
        } else {
            translate(&model, &s.frames, &beam, None)?
        };
        hyps.push(t.tokens);
    }
    let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.target.clone()).collect();
    let score = score_corpus(&hyps, &refs).map_err(|e| CliError::Usage(e.to_string()))?;
    let acc = token_accuracy(&hyps, &refs).map_err(|e| CliError::Usage(e.to_string()))?;
    let record = EvalRecord {
        split: &a.split,
        checkpoint: a.ckpt.display().to_string(),
        search: if a.greedy { "greedy" } else { "beam" },
        score,
        token_accuracy: acc,
        beam: &beam,
        config: &ck.config,
    };
    let text = serde_json::to_string(&record).expect("record serialises");
    println!("{text}");
    if let Some(out) = &a.out {
        write_file(out, format!("{text}\n"))?;
    }
    Ok(())
}

fn translate_cmd(a: TranslateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.model()?;
    if let Some(k) = a.k_override {
        if k > model.config.iterations {
            return Err(CliError::Usage(format!(
                "--K-override {k} exceeds the trained K = {}",
                model.config.iterations
            )));
        }
    }
    let beam = beam_from(&ck.config, a.beam_width, a.length_penalty, None)?;
    let samples = load_dataset(&a.input)?;
    check_samples(&ck.config, &samples, "input")?;
    let vocab = Vocabulary::new(ck.config.model.vocab_size.saturating_sub(3));
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for s in &samples {
        let t = translate(&model, &s.frames, &beam, a.k_override)?;
        writeln!(out, "{}\t{}\tdecoder_calls={}", s.id, vocab.render(&t.tokens), t.decoder_calls)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = check_model(&a.dims, a.seed, a.corrupt)?;
    let mut failed = false;
    for r in &reports {
        let ok = r.max_rel_error < TOLERANCE;
        failed |= !ok;
        println!(
            "{:<16} max_rel_error={:.3e} checked={:<5} {}",
            r.group,
            r.max_rel_error,
            r.checked,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed {
        Err(CliError::Runtime(format!("gradient check failed (tolerance {TOLERANCE:e})")))
    } else {
        Ok(())
    }
}
