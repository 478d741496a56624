//! Seeded synthetic corpus: harmonic "bona fide" tones against noise-like
//! and distorted "spoof" families.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{quantize, write_protocol, write_wav, Key, TrialRecord, Waveform, BONAFIDE_ATTACK, DEFAULT_TARGET_LEN, PIPELINE_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Spoof generator families; each is reported under its own attack id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackFamily {
    /// Flat-spectrum noise.
    WhiteNoise,
    /// Noise confined to one random 1 kHz band.
    BandNoise,
    /// Hard-clipped harmonic tone, gated on and off in time.
    ClippedHarmonic,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 3] = [AttackFamily::WhiteNoise, AttackFamily::BandNoise, AttackFamily::ClippedHarmonic];

    pub fn attack_id(self) -> &'static str {
        match self {
            AttackFamily::WhiteNoise => "A01",
            AttackFamily::BandNoise => "A02",
            AttackFamily::ClippedHarmonic => "A03",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            AttackFamily::WhiteNoise => "white-noise",
            AttackFamily::BandNoise => "band-noise",
            AttackFamily::ClippedHarmonic => "clipped-harmonic",
        }
    }
}

impl FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackFamily::ALL
            .into_iter()
            .find(|a| a.tag() == s || a.attack_id() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack family `{s}`")))
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_bonafide: usize,
    pub n_spoof: usize,
    /// Spoofs cycle through these families in order.
    pub attacks: Vec<AttackFamily>,
    pub seed: u64,
    pub len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_bonafide: 16,
            n_spoof: 16,
            attacks: AttackFamily::ALL.to_vec(),
            seed: 0,
            len: DEFAULT_TARGET_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub record: TrialRecord,
    pub waveform: Waveform,
}

/// Generate the corpus in memory: bona fide trials first, then spoofs.
/// Samples are already on the 16-bit grid, so a WAV round trip is exact.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthUtterance>> {
    if spec.n_bonafide == 0 || spec.n_spoof == 0 {
        return Err(Error::Config("synthetic corpus needs at least one trial per class".into()));
    }
    if spec.attacks.is_empty() || spec.len == 0 {
        return Err(Error::Config("synthetic corpus needs attack families and a positive length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_bonafide + spec.n_spoof);
    for i in 0..spec.n_bonafide {
        let samples = harmonic(&mut rng, spec.len);
        out.push(utterance(i, &format!("SYN_B{i:05}"), BONAFIDE_ATTACK, Key::Bonafide, samples)?);
    }
    for i in 0..spec.n_spoof {
        let family = spec.attacks[i % spec.attacks.len()];
        let samples = match family {
            AttackFamily::WhiteNoise => white_noise(&mut rng, spec.len),
            AttackFamily::BandNoise => band_noise(&mut rng, spec.len),
            AttackFamily::ClippedHarmonic => clipped_harmonic(&mut rng, spec.len),
        };
        out.push(utterance(i, &format!("SYN_S{i:05}"), family.attack_id(), Key::Spoof, samples)?);
    }
    Ok(out)
}

/// Write `<utt_id>.wav` files and a protocol file.
pub fn write_corpus(utterances: &[SynthUtterance], audio_dir: &Path, protocol: &Path) -> Result<()> {
    fs::create_dir_all(audio_dir).map_err(|e| Error::io(audio_dir, e))?;
    for u in utterances {
        write_wav(&audio_dir.join(format!("{}.wav", u.record.utt_id)), &u.waveform)?;
    }
    let records: Vec<TrialRecord> = utterances.iter().map(|u| u.record.clone()).collect();
    write_protocol(protocol, &records)
}

fn utterance(i: usize, utt_id: &str, attack: &str, key: Key, samples: Vec<f64>) -> Result<SynthUtterance> {
    let samples = samples.into_iter().map(|s| quantize(s) as f64 / 32768.0).collect();
    Ok(SynthUtterance {
        record: TrialRecord::new(&format!("SYN{:02}", i % 8), utt_id, attack, key)?,
        waveform: Waveform::new(samples, PIPELINE_SAMPLE_RATE)?,
    })
}

fn tone<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let sr = PIPELINE_SAMPLE_RATE as f64;
    let f0 = rng.gen_range(100.0..250.0);
    let vibrato_rate = rng.gen_range(3.0..6.0);
    let vibrato_depth = rng.gen_range(0.0..0.02);
    let n_harm = rng.gen_range(6..12);
    let amps: Vec<f64> = (1..=n_harm).map(|k| rng.gen_range(0.5..1.0) / k as f64).collect();
    let norm: f64 = amps.iter().sum();
    let mut phase = 0.0;
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let f = f0 * (1.0 + vibrato_depth * (2.0 * PI * vibrato_rate * t).sin());
            phase += 2.0 * PI * f / sr;
            amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase).sin()).sum::<f64>() / norm
        })
        .collect()
}

fn harmonic<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let gain = rng.gen_range(0.3..0.6);
    tone(rng, len).into_iter().map(|s| gain * s).collect()
}

fn white_noise<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let a = rng.gen_range(0.1..0.4);
    (0..len).map(|_| rng.gen_range(-a..a)).collect()
}

fn band_noise<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let lo = rng.gen_range(500.0..6000.0);
    let hi = lo + 1000.0;
    let mut buf: Vec<Complex<f64>> = (0..len).map(|_| Complex::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let df = PIPELINE_SAMPLE_RATE as f64 / len as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * df;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let peak = buf.iter().map(|c| c.re.abs()).fold(0.0, f64::max).max(1e-12);
    let gain = rng.gen_range(0.2..0.5) / peak;
    buf.iter().map(|c| c.re * gain).collect()
}

fn clipped_harmonic<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let clip = rng.gen_range(0.1..0.3);
    let gate = rng.gen_range(1600..4800);
    tone(rng, len)
        .into_iter()
        .enumerate()
        .map(|(n, s)| if (n / gate) % 2 == 0 { 0.5 * (s.clamp(-clip, clip) / clip) } else { 0.0 })
        .collect()
}
