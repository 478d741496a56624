//! Attention maps of freshly initialised GAT-T and GAT-S models on one
//! utterance. Untrained weights give sharply peaked maps.
//!
//!     cargo run --release --example attention_demo

use gatspoof::autodiff::{Mode, Tape};
use gatspoof::encoder::EncoderConfig;
use gatspoof::features::{lfb, FeatureConfig};
use gatspoof::gat::attention_matrices;
use gatspoof::model::{batch_tensor, Model, ModelConfig, System};
use gatspoof::synth::{generate, SynthSpec};

fn main() -> gatspoof::Result<()> {
    let utt = generate(&SynthSpec { n_bonafide: 1, n_spoof: 1, ..SynthSpec::default() })?.remove(1);
    let f = lfb(&utt.waveform, &FeatureConfig::default())?;
    for system in [System::GatT, System::GatS] {
        let cfg = ModelConfig {
            system,
            encoder: EncoderConfig::default().scaled_width(8),
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 0)?;
        let mut tape = Tape::new();
        let x = tape.input(batch_tensor(&[&f])?);
        let out = model.forward_gat(&mut tape, x, Mode::Eval)?;
        let n = tape.shape(out.attention)[1];
        let alpha = &attention_matrices(tape.value(out.attention), n)[0];
        println!("{system} on {} ({} nodes), score {:.4}", utt.record.utt_id, n, tape.value(out.scores)[0]);
        println!("rows: source node, columns: target node; each column sums to one");
        for s in 0..n {
            let row: Vec<String> = (0..n).map(|t| format!("{:.3}", alpha.get(s, t))).collect();
            println!("  {}", row.join(" "));
        }
    }
    Ok(())
}
