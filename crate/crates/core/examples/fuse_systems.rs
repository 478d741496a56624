//! Fuse two complementary detectors with a linear SVM.
//!
//!     cargo run --example fuse_systems

use gatspoof::audio::{Key, TrialRecord};
use gatspoof::fusion::{align, fit_svm_with_info, SvmConfig};
use gatspoof::metrics::ScoreSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gatspoof::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut protocol = Vec::new();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    // System a misses attack A02, system b misses A01.
    for (prefix, attack, key) in [("B", "-", Key::Bonafide), ("X", "A01", Key::Spoof), ("Y", "A02", Key::Spoof)] {
        for i in 0..50 {
            let id = format!("{prefix}{i:02}");
            let good = rng.gen_range(0.5..2.0);
            let bad = rng.gen_range(-2.0..-0.5);
            let (sa, sb) = match attack {
                "-" => (good, good * 3.0 + 1.0),
                "A01" => (bad, rng.gen_range(0.5..2.0) * 3.0 + 1.0),
                _ => (rng.gen_range(0.5..2.0), bad * 3.0 + 1.0),
            };
            protocol.push(TrialRecord::new("S", &id, attack, key)?);
            a.push((id.clone(), sa));
            b.push((id, sb));
        }
    }
    let systems = vec![("a".to_string(), a), ("b".to_string(), b)];
    for (name, s) in &systems {
        println!("{name}: EER {:.3}", ScoreSet::from_scores(s, &protocol)?.eer()?);
    }
    let data = align(&systems, &protocol)?;
    let (model, info) = fit_svm_with_info(&data, &SvmConfig::default())?;
    println!("fused: EER {:.3}", model.fuse_set(&data)?.eer()?);
    println!("solver: {} iterations, converged {}", info.iterations, info.converged);
    print!("{}", model.to_text());
    Ok(())
}
