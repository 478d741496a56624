//! Train a narrow GAT-T on a synthetic corpus and report dev metrics.
//!
//!     cargo run --release --example train_gat [-- epochs]

use gatspoof::encoder::EncoderConfig;
use gatspoof::features::{lfb, FeatureConfig};
use gatspoof::metrics::TdcfCosts;
use gatspoof::model::{Model, ModelConfig, System};
use gatspoof::synth::{generate, SynthSpec};
use gatspoof::training::{train, Dataset, Example, TrainConfig};

fn dataset(seed: u64, per_class: usize) -> gatspoof::Result<Dataset> {
    let spec = SynthSpec {
        n_bonafide: per_class,
        n_spoof: per_class,
        seed,
        len: 32_000,
        ..SynthSpec::default()
    };
    let fc = FeatureConfig::default();
    let items = generate(&spec)?
        .into_iter()
        .map(|u| {
            Ok(Example {
                features: lfb(&u.waveform, &fc)?,
                utt_id: u.record.utt_id,
                key: u.record.key,
                attack_id: u.record.attack_id,
            })
        })
        .collect::<gatspoof::Result<Vec<_>>>()?;
    Ok(Dataset::new(items))
}

fn main() -> gatspoof::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let (train_set, dev_set) = (dataset(1, 12)?, dataset(2, 6)?);
    let model = Model::new(
        ModelConfig {
            system: System::GatT,
            encoder: EncoderConfig::default().scaled_width(8),
            gat_dim: 32,
            ..ModelConfig::default()
        },
        0,
    )?;
    let cfg = TrainConfig {
        epochs,
        batch_size: 8,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let dir = std::env::temp_dir();
    let (ckpt, log) = (dir.join("gatspoof_example.ckpt"), dir.join("gatspoof_example_log.csv"));
    let summary = train(model, cfg, &train_set, &dev_set, &TdcfCosts::default(), &ckpt, &log)?;
    for r in &summary.epochs {
        println!("epoch {:2}  loss {:.4}  dev EER {:.3}  dev min t-DCF {:.3}", r.epoch, r.train_loss, r.dev_eer, r.dev_min_tdcf);
    }
    println!("best epoch {} saved to {}", summary.best_epoch, ckpt.display());
    Ok(())
}
