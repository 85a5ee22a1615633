//! Dataset model: emotion sets, variable-length samples, soft labels,
//! manifest ingestion and the synthetic sequence generator.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a soft label.
pub const SOFT_LABEL_SUM_TOL: f64 = 1e-9;

/// Ordered emotion categories; the position of a name is its class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct EmotionSet {
    labels: Vec<String>,
}

impl EmotionSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::validation("emotion set is empty"));
        }
        for (i, name) in labels.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::validation("emotion name is empty"));
            }
            if labels[..i].contains(name) {
                return Err(Error::validation(format!("duplicate emotion '{name}'")));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.labels.get(class).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

impl Default for EmotionSet {
    fn default() -> Self {
        Self {
            labels: ["angry", "happy", "sad", "neutral"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

impl TryFrom<Vec<String>> for EmotionSet {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        EmotionSet::new(labels)
    }
}

impl From<EmotionSet> for Vec<String> {
    fn from(set: EmotionSet) -> Self {
        set.labels
    }
}

/// Probability vector over the emotion set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::validation("soft label is empty"));
        }
        if let Some(p) = probs
            .iter()
            .find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::validation(format!(
                "soft label entry {p} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SOFT_LABEL_SUM_TOL {
            return Err(Error::validation(format!(
                "soft label sums to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = k;
            }
        }
        best
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= SOFT_LABEL_SUM_TOL);
        Self(probs)
    }
}

/// `probs[label] = 1`, zeros elsewhere.
pub fn one_hot(label: usize, emotions: &EmotionSet) -> Result<SoftLabel> {
    one_hot_n(label, emotions.len())
}

pub(crate) fn one_hot_n(label: usize, n_classes: usize) -> Result<SoftLabel> {
    if label >= n_classes {
        return Err(Error::validation(format!(
            "label {label} out of range for {n_classes} classes"
        )));
    }
    let mut probs = vec![0.0; n_classes];
    probs[label] = 1.0;
    Ok(SoftLabel(probs))
}

/// One utterance: `length × d_in` frames plus its class and recording metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechSample {
    pub id: String,
    signal: Array2<f64>,
    pub label: usize,
    pub speaker_id: String,
    pub session_id: String,
}

impl SpeechSample {
    pub fn new(
        id: impl Into<String>,
        signal: Array2<f64>,
        label: usize,
        n_classes: usize,
        speaker_id: impl Into<String>,
        session_id: impl Into<String>,
    ) -> Result<Self> {
        let id = id.into();
        if signal.nrows() == 0 || signal.ncols() == 0 {
            return Err(Error::validation(format!(
                "sample '{id}' has an empty signal ({}x{})",
                signal.nrows(),
                signal.ncols()
            )));
        }
        if label >= n_classes {
            return Err(Error::validation(format!(
                "sample '{id}' has label {label} but only {n_classes} classes"
            )));
        }
        if signal.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "sample '{id}' contains non-finite values"
            )));
        }
        Ok(Self {
            id,
            signal,
            label,
            speaker_id: speaker_id.into(),
            session_id: session_id.into(),
        })
    }

    pub fn signal(&self) -> ArrayView2<'_, f64> {
        self.signal.view()
    }

    /// Number of frames.
    pub fn length(&self) -> usize {
        self.signal.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.signal.ncols()
    }

    /// Replace the signal, keeping every other field. The length must not change.
    pub(crate) fn with_signal(&self, signal: Array2<f64>) -> Self {
        debug_assert_eq!(signal.dim(), self.signal.dim());
        Self {
            signal,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub signal_path: PathBuf,
    pub label_name: String,
    pub speaker_id: String,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: [&str; 4] = ["path", "label", "speaker", "session"];

impl Manifest {
    /// Parse manifest text. Relative signal paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path, emotions: &EmotionSet) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "empty manifest".into(),
            });
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header '{}', found '{}'",
                    MANIFEST_HEADER.join(","),
                    header.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }

        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != MANIFEST_HEADER.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 4 fields, found {}", record.len()),
                });
            }
            let (path, label, speaker, session) = (&record[0], &record[1], &record[2], &record[3]);
            if path.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "empty signal path".into(),
                });
            }
            if emotions.index_of(label).is_none() {
                return Err(Error::validation(format!(
                    "line {line}: unknown label '{label}'"
                )));
            }
            let path = Path::new(path);
            entries.push(ManifestEntry {
                signal_path: if path.is_absolute() {
                    path.to_path_buf()
                } else {
                    base_dir.join(path)
                },
                label_name: label.to_string(),
                speaker_id: speaker.to_string(),
                session_id: session.to_string(),
            });
        }
        if entries.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "empty manifest".into(),
            });
        }
        Ok(Self { entries })
    }
}

/// Read a manifest and every signal it references.
pub fn load_manifest(path: &Path, emotions: &EmotionSet) -> Result<Vec<SpeechSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = Manifest::parse(&text, base, emotions)?;
    manifest
        .entries
        .iter()
        .map(|entry| {
            let signal = read_signal(&entry.signal_path)?;
            let label = emotions
                .index_of(&entry.label_name)
                .expect("label checked during parse");
            SpeechSample::new(
                entry.signal_path.display().to_string(),
                signal,
                label,
                emotions.len(),
                entry.speaker_id.clone(),
                entry.session_id.clone(),
            )
        })
        .collect()
}

/// Signal file: `u32 n_frames`, `u32 d_in`, then `n_frames * d_in` f32 values, all little-endian.
pub fn read_signal(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_signal(&bytes).map_err(|e| match e {
        Error::Validation(msg) => Error::validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_signal(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 8 {
        return Err(Error::validation("signal file shorter than its 8-byte header"));
    }
    let n_frames = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d_in = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + n_frames * d_in * 4;
    if bytes.len() != expected {
        return Err(Error::validation(format!(
            "signal header says {n_frames}x{d_in} ({expected} bytes), file has {} bytes",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((n_frames, d_in), values)
        .map_err(|e| Error::validation(e.to_string()))
}

pub fn encode_signal(signal: ArrayView2<'_, f64>) -> Vec<u8> {
    let (n_frames, d_in) = signal.dim();
    let mut out = Vec::with_capacity(8 + n_frames * d_in * 4);
    out.extend_from_slice(&(n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(d_in as u32).to_le_bytes());
    for frame in signal.rows() {
        for &v in frame {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_signal(path: &Path, signal: ArrayView2<'_, f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_signal(signal))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic stand-in corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub d_in: usize,
    pub length_range: (usize, usize),
    pub n_speakers: usize,
    pub n_sessions: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            d_in: 8,
            length_range: (20, 60),
            n_speakers: 10,
            n_sessions: 5,
            class_separation: 1.0,
            noise_scale: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let (min_len, max_len) = self.length_range;
        if self.n_per_class == 0 {
            return Err(Error::validation("n_per_class must be >= 1"));
        }
        if min_len < 1 || max_len < min_len {
            return Err(Error::validation(format!(
                "invalid length range ({min_len}, {max_len})"
            )));
        }
        if self.d_in < n_classes {
            return Err(Error::validation(format!(
                "d_in = {} cannot hold {n_classes} orthogonal class directions",
                self.d_in
            )));
        }
        if self.n_sessions == 0 || self.n_speakers == 0 || self.n_speakers % self.n_sessions != 0 {
            return Err(Error::validation(format!(
                "{} speakers cannot be split evenly over {} sessions",
                self.n_speakers, self.n_sessions
            )));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::validation("class_separation must be > 0"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::validation("noise_scale must be >= 0"));
        }
        Ok(())
    }

    pub fn speaker_session(&self, speaker: usize) -> usize {
        speaker / (self.n_speakers / self.n_sessions)
    }
}

/// Class `c` frames are `class_separation * e_c + noise_scale * N(0, I)`.
/// Within each class, sample `i` goes to speaker `i % n_speakers`; speakers are
/// bound to sessions in contiguous blocks.
pub fn generate_synthetic(spec: &SynthSpec, emotions: &EmotionSet) -> Result<Vec<SpeechSample>> {
    let n_classes = emotions.len();
    spec.validate(n_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (min_len, max_len) = spec.length_range;
    let mut samples = Vec::with_capacity(n_classes * spec.n_per_class);
    for class in 0..n_classes {
        for i in 0..spec.n_per_class {
            let length = rng.random_range(min_len..=max_len);
            let mut signal = Array2::<f64>::zeros((length, spec.d_in));
            for mut frame in signal.rows_mut() {
                for (k, v) in frame.iter_mut().enumerate() {
                    let mean = if k == class { spec.class_separation } else { 0.0 };
                    let z: f64 = rng.sample(StandardNormal);
                    *v = mean + spec.noise_scale * z;
                }
            }
            let speaker = i % spec.n_speakers;
            let session = spec.speaker_session(speaker);
            samples.push(SpeechSample::new(
                format!("synth-{class}-{i:05}"),
                signal,
                class,
                n_classes,
                format!("spk{speaker:02}"),
                format!("ses{session:02}"),
            )?);
        }
    }
    Ok(samples)
}
