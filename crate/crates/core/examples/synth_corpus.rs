//! Write a small labelled synthetic corpus and print its protocol.
//!
//!     cargo run --example synth_corpus -- /tmp/corpus

use std::path::PathBuf;

use gatspoof::audio::format_protocol;
use gatspoof::synth::{generate, write_corpus, SynthSpec};

fn main() -> gatspoof::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("gatspoof_corpus"));
    let spec = SynthSpec {
        n_bonafide: 4,
        n_spoof: 6,
        seed: 1,
        ..SynthSpec::default()
    };
    let corpus = generate(&spec)?;
    write_corpus(&corpus, &dir.join("wav"), &dir.join("protocol.txt"))?;
    let records: Vec<_> = corpus.iter().map(|u| u.record.clone()).collect();
    print!("{}", format_protocol(&records));
    println!("wrote {} utterances of {} samples to {}", corpus.len(), spec.len, dir.display());
    Ok(())
}
