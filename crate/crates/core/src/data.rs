//! Synthetic sequence tasks, the dataset file format, and batching.
//!
//! A dataset file starts with a header line `# ipslt-dataset v1 count=N`,
//! followed by one record per line:
//! `id<TAB>T_x<TAB>frame_dim<TAB>base64(f32 LE frames)<TAB>target ids`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{TokenBatch, BOS, EOS, PAD};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const HEADER: &str = "# ipslt-dataset v1";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{0}")]
    Usage(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Token strings with reserved ids `<pad>` = 0, `<bos>` = 1, `<eos>` = 2;
/// symbol `i` is `w{i}` with id `i + 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub const FIRST_SYMBOL: usize = EOS + 1;

    pub fn new(n_symbols: usize) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
        tokens.extend((0..n_symbols).map(|i| format!("w{i}")));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    WindowedMajority,
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "windowed-majority" => Ok(Self::WindowedMajority),
            _ => Err(format!(
                "unknown task `{s}` (expected copy, reverse or windowed-majority)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    pub n_symbols: usize,
    /// Inclusive range of source symbols per sample.
    pub min_len: usize,
    pub max_len: usize,
    /// Frames emitted per source symbol.
    pub frames_per_symbol: usize,
    pub frame_dim: usize,
    /// Standard deviation of the Gaussian frame noise.
    pub noise: f64,
    /// Window size of the windowed-majority task.
    pub majority_window: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::Copy,
            n_symbols: 17,
            min_len: 3,
            max_len: 8,
            frames_per_symbol: 2,
            frame_dim: 16,
            noise: 0.0,
            majority_window: 3,
            train: 2000,
            dev: 200,
            test: 200,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn vocab_size(&self) -> usize {
        self.n_symbols + Vocabulary::FIRST_SYMBOL
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DataError::Usage(m));
        if self.n_symbols < 2 {
            return fail(format!("n_symbols must be at least 2, got {}", self.n_symbols));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!(
                "need 1 <= min_len <= max_len, got {}..={}",
                self.min_len, self.max_len
            ));
        }
        if self.frames_per_symbol == 0 || self.frame_dim == 0 {
            return fail("frames_per_symbol and frame_dim must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        let (lo, hi) = self.source_range();
        if lo == 0 || lo > hi {
            return fail(format!(
                "length range {}..={} holds no whole window of {}",
                self.min_len, self.max_len, self.majority_window
            ));
        }
        let r = self.frames_per_symbol;
        if lo * r < 4 || hi * r > 64 {
            return fail(format!(
                "frame counts must lie in 4..=64, got {}..={}",
                lo * r,
                hi * r
            ));
        }
        if self.target_len(hi) > 20 {
            return fail("targets may hold at most 20 tokens".into());
        }
        if self.task == TaskKind::WindowedMajority {
            let m = self.majority_window;
            if m == 0 {
                return fail("majority_window must be positive".into());
            }
            // the m - (m/2 + 1) minority slots take distinct non-majority symbols
            if self.n_symbols < m - (m / 2 + 1) + 1 {
                return fail(format!("{} symbols cannot fill a window of {m}", self.n_symbols));
            }
        }
        Ok(())
    }

    /// Allowed source lengths; multiples of the window for windowed-majority.
    fn source_range(&self) -> (usize, usize) {
        match self.task {
            TaskKind::WindowedMajority => {
                let m = self.majority_window.max(1);
                (self.min_len.div_ceil(m) * m, self.max_len / m * m)
            }
            _ => (self.min_len, self.max_len),
        }
    }

    fn target_len(&self, source_len: usize) -> usize {
        match self.task {
            TaskKind::WindowedMajority => source_len / self.majority_window,
            _ => source_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[T_x, frame_dim]`.
    pub frames: Tensor<f32>,
    /// Target token ids without BOS/EOS; may be empty for unlabelled input.
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Splits {
    pub fn named(&self) -> [(&'static str, &Vec<Sample>); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }
}

/// One fixed embedding per symbol id, drawn from N(0, 1).
pub fn symbol_embeddings(spec: &SyntheticTaskSpec) -> Vec<Vec<f32>> {
    let mut r = rng::stream(spec.seed, rng::STREAM_SYMBOLS);
    (0..spec.vocab_size())
        .map(|_| {
            (0..spec.frame_dim)
                .map(|_| StandardNormal.sample(&mut r))
                .map(|v: f64| v as f32)
                .collect()
        })
        .collect()
}

/// Source symbols and target of one windowed-majority sample: each window of
/// `m` symbols holds its majority symbol `m/2 + 1` times and distinct other
/// symbols elsewhere, so the majority is unique.
fn majority_sample(spec: &SyntheticTaskSpec, windows: usize, r: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let m = spec.majority_window;
    let symbols: Vec<usize> = (0..spec.n_symbols).map(|i| i + Vocabulary::FIRST_SYMBOL).collect();
    let mut source = Vec::with_capacity(windows * m);
    let mut target = Vec::with_capacity(windows);
    for _ in 0..windows {
        let major = *symbols.choose(r).expect("n_symbols >= 2");
        let others: Vec<usize> = symbols
            .iter()
            .copied()
            .filter(|&s| s != major)
            .collect::<Vec<_>>()
            .choose_multiple(r, m - (m / 2 + 1))
            .copied()
            .collect();
        let mut window = vec![major; m / 2 + 1];
        window.extend(others);
        window.shuffle(r);
        source.extend(window);
        target.push(major);
    }
    (source, target)
}

fn generate_split(
    spec: &SyntheticTaskSpec,
    name: &str,
    index: u64,
    count: usize,
    embeddings: &[Vec<f32>],
) -> Vec<Sample> {
    let mut r = rng::stream(spec.seed, rng::STREAM_SPLIT_BASE + index);
    let (lo, hi) = spec.source_range();
    let d = spec.frame_dim;
    (0..count)
        .map(|i| {
            let (source, target) = match spec.task {
                TaskKind::WindowedMajority => {
                    let m = spec.majority_window;
                    let windows = r.gen_range(lo / m..=hi / m);
                    majority_sample(spec, windows, &mut r)
                }
                kind => {
                    let len = r.gen_range(lo..=hi);
                    let source: Vec<usize> = (0..len)
                        .map(|_| r.gen_range(0..spec.n_symbols) + Vocabulary::FIRST_SYMBOL)
                        .collect();
                    let mut target = source.clone();
                    if kind == TaskKind::Reverse {
                        target.reverse();
                    }
                    (source, target)
                }
            };
            let t_x = source.len() * spec.frames_per_symbol;
            let mut data = Vec::with_capacity(t_x * d);
            for &s in &source {
                for _ in 0..spec.frames_per_symbol {
                    for &e in &embeddings[s] {
                        let noise = if spec.noise > 0.0 {
                            let z: f64 = StandardNormal.sample(&mut r);
                            spec.noise * z
                        } else {
                            0.0
                        };
                        data.push(e + noise as f32);
                    }
                }
            }
            Sample {
                id: format!("s{}-{name}-{i:06}", spec.seed),
                frames: Tensor::new(vec![t_x, d], data).expect("positive dims"),
                target,
            }
        })
        .collect()
}

/// Train, dev and test splits; a pure function of the spec.
pub fn generate_dataset(spec: &SyntheticTaskSpec) -> Result<Splits> {
    spec.validate()?;
    let emb = symbol_embeddings(spec);
    Ok(Splits {
        train: generate_split(spec, "train", 0, spec.train, &emb),
        dev: generate_split(spec, "dev", 1, spec.dev, &emb),
        test: generate_split(spec, "test", 2, spec.test, &emb),
    })
}

/// The file contents for `samples`.
pub fn encode_dataset(samples: &[Sample]) -> Result<String> {
    let mut out = format!("{HEADER} count={}\n", samples.len());
    for s in samples {
        if s.id.is_empty() || s.id.contains(['\t', '\n', '\r']) {
            return Err(DataError::Usage(format!("sample id {:?} is not writable", s.id)));
        }
        let bytes: Vec<u8> = s.frames.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let target: Vec<String> = s.target.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            s.id,
            s.frames.rows(),
            s.frames.cols(),
            STANDARD.encode(bytes),
            target.join(" ")
        )
        .expect("writing to a string");
    }
    Ok(out)
}

pub fn decode_dataset(text: &str) -> Result<Vec<Sample>> {
    let parse_err = |line: usize, message: String| DataError::Parse { line, message };
    let mut lines = text.split_terminator('\n');
    let header = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let count: usize = header
        .strip_prefix(HEADER)
        .and_then(|rest| rest.trim().strip_prefix("count="))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| parse_err(1, format!("expected `{HEADER} count=N`, got `{header}`")))?;
    let mut samples = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(n, format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let t_x: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(n, format!("bad T_x `{}`: {e}", fields[1])))?;
        let dim: usize = fields[2]
            .parse()
            .map_err(|e| parse_err(n, format!("bad frame_dim `{}`: {e}", fields[2])))?;
        let bytes = STANDARD
            .decode(fields[3])
            .map_err(|e| parse_err(n, format!("bad frame payload: {e}")))?;
        if t_x == 0 || dim == 0 || bytes.len() != t_x * dim * 4 {
            return Err(parse_err(
                n,
                format!("frame payload has {} bytes, expected {t_x} x {dim} floats", bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let target = fields[4]
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| parse_err(n, format!("bad target id `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id: fields[0].to_string(),
            frames: Tensor::new(vec![t_x, dim], data).expect("checked size"),
            target,
        });
    }
    if samples.len() != count {
        return Err(parse_err(
            samples.len() + 2,
            format!("header announces {count} records but the file holds {}", samples.len()),
        ));
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(parse_err(count + 1, "last record is not newline-terminated".into()));
    }
    Ok(samples)
}

pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let text = encode_dataset(samples)?;
    std::fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_dataset(&text)
}

/// A padded mini-batch referring to samples by index.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<usize>,
    /// `[batch * T_f]`; true on real clips.
    pub clip_mask: Vec<bool>,
    /// Decoder inputs `BOS y_1 .. y_n`, PAD-padded.
    pub tokens: TokenBatch,
    /// Decoder targets `y_1 .. y_n EOS`, PAD-padded, aligned with `tokens`.
    pub gold: Vec<usize>,
}

impl Batch {
    pub fn frames<'s>(&self, samples: &'s [Sample]) -> Vec<&'s Tensor<f32>> {
        self.items.iter().map(|&i| &samples[i].frames).collect()
    }

    pub fn target_mask(&self) -> Vec<bool> {
        self.gold.iter().map(|&g| g != PAD).collect()
    }

    /// Frames zero-padded to the longest item, `[batch * T_max, frame_dim]`.
    pub fn padded_frames(&self, samples: &[Sample]) -> Tensor<f32> {
        let frames = self.frames(samples);
        let t_max = frames.iter().map(|f| f.rows()).max().unwrap_or(0);
        let d = frames[0].cols();
        let mut data = vec![0.0; frames.len() * t_max * d];
        for (b, f) in frames.iter().enumerate() {
            data[b * t_max * d..][..f.numel()].copy_from_slice(f.data());
        }
        Tensor::new(vec![frames.len() * t_max, d], data).expect("positive dims")
    }
}

/// Groups `order` into batches of at most `batch_size` samples.
pub fn batch(samples: &[Sample], order: &[usize], batch_size: usize, stride: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 || stride == 0 {
        return Err(DataError::Usage("batch_size and stride must be positive".into()));
    }
    order
        .chunks(batch_size)
        .map(|items| {
            let clips: Vec<usize> = items.iter().map(|&i| samples[i].frames.rows().div_ceil(stride)).collect();
            let t_f = clips.iter().copied().max().unwrap_or(0);
            let clip_mask = clips.iter().flat_map(|&c| (0..t_f).map(move |t| t < c)).collect();
            let inputs: Vec<Vec<usize>> = items
                .iter()
                .map(|&i| std::iter::once(BOS).chain(samples[i].target.iter().copied()).collect())
                .collect();
            let tokens = TokenBatch::from_sequences(&inputs).map_err(|e| DataError::Usage(e.to_string()))?;
            let mut gold = Vec::with_capacity(tokens.ids.len());
            for &i in items {
                let mut g = samples[i].target.clone();
                g.push(EOS);
                g.resize(tokens.len, PAD);
                gold.extend(g);
            }
            Ok(Batch {
                items: items.to_vec(),
                clip_mask,
                tokens,
                gold,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_reserves_the_special_ids() {
        let v = Vocabulary::new(3);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.token(3), Some("w0"));
        assert_eq!(v.render(&[3, 5]), "w0 w2");
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn task_names_parse() {
        assert_eq!("windowed-majority".parse::<TaskKind>(), Ok(TaskKind::WindowedMajority));
        assert!("majority".parse::<TaskKind>().is_err());
    }

    #[test]
    fn spec_validation() {
        let ok = SyntheticTaskSpec::default();
        assert!(ok.validate().is_ok());
        assert!(SyntheticTaskSpec { n_symbols: 1, ..ok.clone() }.validate().is_err());
        assert!(SyntheticTaskSpec { max_len: 40, ..ok.clone() }.validate().is_err());
        assert!(SyntheticTaskSpec { min_len: 1, frames_per_symbol: 2, ..ok.clone() }.validate().is_err());
        let maj = SyntheticTaskSpec { task: TaskKind::WindowedMajority, min_len: 1, max_len: 2, ..ok };
        assert!(maj.validate().is_err());
    }
}
