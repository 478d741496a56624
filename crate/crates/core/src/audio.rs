//! Waveform and protocol ingestion.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Sample rate every pipeline input must have.
pub const PIPELINE_SAMPLE_RATE: u32 = 16_000;

/// Default fixed utterance length (~4 s at 16 kHz).
pub const DEFAULT_TARGET_LEN: usize = 64_600;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Contract("waveform contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn require_pipeline_rate(&self) -> Result<()> {
        if self.sample_rate != PIPELINE_SAMPLE_RATE {
            return Err(Error::UnsupportedFormat(format!(
                "sample rate {} Hz, pipeline requires {} Hz",
                self.sample_rate, PIPELINE_SAMPLE_RATE
            )));
        }
        Ok(())
    }
}

/// Read a 16-bit PCM mono RIFF/WAVE file, scaling samples by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    // Past this point any failure, including a short read, is a malformed file.
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} channels, only mono is accepted",
            path.display(),
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {}-bit {:?}, only 16-bit PCM is accepted",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if samples.is_empty() {
        return Err(Error::Format(format!("{}: no samples", path.display())));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Write 16-bit PCM mono; samples are clipped to [-1, 1) and rounded.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &w.samples {
        writer.write_sample(quantize(s)).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

pub(crate) fn quantize(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Truncate to `target_len`, or tile the whole waveform end to end and
/// truncate when it is shorter.
pub fn fix_length(w: &Waveform, target_len: usize) -> Result<Waveform> {
    if target_len == 0 {
        return Err(Error::Contract("target length must be positive".into()));
    }
    let samples = w.samples.iter().copied().cycle().take(target_len).collect();
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    /// Training label: 1 = bona fide, 0 = spoof.
    pub fn label(self) -> f64 {
        match self {
            Key::Bonafide => 1.0,
            Key::Spoof => 0.0,
        }
    }
}

impl FromStr for Key {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bonafide" => Ok(Key::Bonafide),
            "spoof" => Ok(Key::Spoof),
            _ => Err(format!("unknown key `{s}` (expected bonafide or spoof)")),
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        })
    }
}

/// Attack id used for bona fide trials.
pub const BONAFIDE_ATTACK: &str = "-";

/// One line of a countermeasure protocol file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialRecord {
    pub speaker_id: String,
    pub utt_id: String,
    pub attack_id: String,
    pub key: Key,
}

impl TrialRecord {
    pub fn new(speaker_id: &str, utt_id: &str, attack_id: &str, key: Key) -> Result<Self> {
        if (key == Key::Bonafide) != (attack_id == BONAFIDE_ATTACK) {
            return Err(Error::Contract(format!(
                "{utt_id}: key {key} inconsistent with attack id `{attack_id}`"
            )));
        }
        Ok(Self {
            speaker_id: speaker_id.to_string(),
            utt_id: utt_id.to_string(),
            attack_id: attack_id.to_string(),
            key,
        })
    }
}

/// Parse an ASVspoof-style CM protocol: `speaker utt unused attack key` per
/// line. Blank lines and `#` comments are skipped.
pub fn parse_protocol_str(text: &str, origin: &str) -> Result<Vec<TrialRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let key: Key = fields[4].parse().map_err(err)?;
        let record = TrialRecord::new(fields[0], fields[1], fields[3], key).map_err(|e| err(e.to_string()))?;
        if !seen.insert(record.utt_id.clone()) {
            return Err(err(format!("duplicate utterance id `{}`", record.utt_id)));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn parse_protocol(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_protocol_str(&text, &path.display().to_string())
}

pub fn format_protocol(records: &[TrialRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{} {} - {} {}\n", r.speaker_id, r.utt_id, r.attack_id, r.key));
    }
    out
}

pub fn write_protocol(path: &Path, records: &[TrialRecord]) -> Result<()> {
    fs::write(path, format_protocol(records)).map_err(|e| Error::io(path, e))
}
