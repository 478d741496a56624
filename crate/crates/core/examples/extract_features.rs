//! Log linear-filterbank features of one utterance, plus a frequency mask.
//!
//!     cargo run --example extract_features [-- file.wav]

use gatspoof::audio::{fix_length, read_wav, DEFAULT_TARGET_LEN};
use gatspoof::features::{apply_freq_mask, mask_fill_value, FeatureConfig, FreqMask, LfbExtractor, MaskFill};
use gatspoof::synth::{generate, SynthSpec};

fn main() -> gatspoof::Result<()> {
    let wave = match std::env::args().nth(1) {
        Some(p) => read_wav(p.as_ref())?,
        None => generate(&SynthSpec { n_bonafide: 1, n_spoof: 1, ..SynthSpec::default() })?.remove(0).waveform,
    };
    wave.require_pipeline_rate()?;
    let wave = fix_length(&wave, DEFAULT_TARGET_LEN)?;
    let extractor = LfbExtractor::new(FeatureConfig::default(), wave.sample_rate())?;
    let f = extractor.extract(&wave)?;
    println!("{} samples -> {} bands x {} frames", wave.len(), f.n_bands(), f.n_frames());
    for band in [0, 15, 30, 45, 59] {
        let row = f.row(band);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        println!("band {band:2}: mean log energy {mean:8.3}");
    }
    let mask = FreqMask { start_band: 20, width: 8 };
    let fill = mask_fill_value(&f, mask, MaskFill::Mean);
    let masked = apply_freq_mask(&f, mask, fill)?;
    println!("bands 20..28 masked with the visible mean {fill:.3}; band 24 now {:.3}", masked.row(24)[0]);
    Ok(())
}
