//! EER, min t-DCF and the per-attack breakdown of a score list.
//!
//!     cargo run --example evaluate_scores [-- scores.txt protocol.txt]

use gatspoof::audio::{parse_protocol, Key, TrialRecord};
use gatspoof::metrics::{det_curve, per_attack_report, read_scores, ScoreSet, TdcfCosts};

fn toy() -> gatspoof::Result<(Vec<(String, f64)>, Vec<TrialRecord>)> {
    let mut scores = Vec::new();
    let mut protocol = Vec::new();
    let rows = [("-", Key::Bonafide, [2.1, 1.7, 0.9, 1.4]), ("A01", Key::Spoof, [-1.2, 0.3, -0.4, 1.0]), ("A02", Key::Spoof, [1.5, 2.4, 0.2, 1.8])];
    for (attack, key, values) in rows {
        for (i, v) in values.into_iter().enumerate() {
            let id = format!("{}_{i}", if attack == "-" { "B" } else { attack });
            protocol.push(TrialRecord::new("S01", &id, attack, key)?);
            scores.push((id, v));
        }
    }
    Ok((scores, protocol))
}

fn main() -> gatspoof::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (scores, protocol) = match args.as_slice() {
        [s, p] => (read_scores(s.as_ref())?, parse_protocol(p.as_ref())?),
        _ => toy()?,
    };
    let set = ScoreSet::from_scores(&scores, &protocol)?;
    println!("threshold  P_miss  P_fa");
    for p in det_curve(&set.bonafide(), &set.spoof())? {
        println!("{:9.3}  {:6.3}  {:5.3}", p.threshold, p.p_miss, p.p_fa);
    }
    print!("{}", per_attack_report(&set, &TdcfCosts::default())?.to_text());
    Ok(())
}
