//! EER and minimum normalised t-DCF over countermeasure scores.
//!
//! Polarity: higher scores mean "more bona fide". At threshold `t` a bona
//! fide trial is missed when `score <= t` and a spoof trial is falsely
//! accepted when `score > t`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::audio::{Key, TrialRecord, BONAFIDE_ATTACK};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub utt_id: String,
    pub score: f64,
    pub key: Key,
    pub attack_id: String,
}

/// Scored trials with both classes present and finite scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    entries: Vec<ScoredTrial>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoredTrial>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::Contract(format!("score of `{}` is not finite", e.utt_id)));
        }
        let set = Self { entries };
        if set.bonafide().is_empty() || set.spoof().is_empty() {
            return Err(Error::Contract("score set needs bona fide and spoof trials".into()));
        }
        Ok(set)
    }

    /// Join `utt_id score` pairs with protocol metadata. Every protocol trial
    /// must be scored and every score must belong to the protocol.
    pub fn from_scores(scores: &[(String, f64)], protocol: &[TrialRecord]) -> Result<Self> {
        let by_id: HashMap<&str, f64> = scores.iter().map(|(id, s)| (id.as_str(), *s)).collect();
        let known: HashSet<&str> = protocol.iter().map(|r| r.utt_id.as_str()).collect();
        let missing: Vec<&str> = protocol.iter().map(|r| r.utt_id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
        let extra: Vec<&str> = scores.iter().map(|(id, _)| id.as_str()).filter(|id| !known.contains(id)).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Alignment(format!(
                "unscored trials [{}]; unknown scored ids [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        Self::new(
            protocol
                .iter()
                .map(|r| ScoredTrial {
                    utt_id: r.utt_id.clone(),
                    score: by_id[r.utt_id.as_str()],
                    key: r.key,
                    attack_id: r.attack_id.clone(),
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[ScoredTrial] {
        &self.entries
    }

    pub fn bonafide(&self) -> Vec<f64> {
        self.scores_where(|e| e.key == Key::Bonafide)
    }

    pub fn spoof(&self) -> Vec<f64> {
        self.scores_where(|e| e.key == Key::Spoof)
    }

    fn scores_where(&self, keep: impl Fn(&ScoredTrial) -> bool) -> Vec<f64> {
        self.entries.iter().filter(|e| keep(e)).map(|e| e.score).collect()
    }

    /// Distinct spoof attack ids, sorted.
    pub fn attacks(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| e.key == Key::Spoof && e.attack_id != BONAFIDE_ATTACK)
            .map(|e| e.attack_id.as_str())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn eer(&self) -> Result<f64> {
        eer(&self.bonafide(), &self.spoof())
    }

    pub fn min_tdcf(&self, costs: &TdcfCosts) -> Result<f64> {
        min_tdcf(&self.bonafide(), &self.spoof(), costs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at `-inf` and at every distinct score, ascending.
pub fn det_curve(bonafide: &[f64], spoof: &[f64]) -> Result<Vec<DetPoint>> {
    if bonafide.is_empty() || spoof.is_empty() {
        return Err(Error::Contract("DET curve needs bona fide and spoof scores".into()));
    }
    if bonafide.iter().chain(spoof).any(|s| !s.is_finite()) {
        return Err(Error::Contract("scores must be finite".into()));
    }
    let mut all: Vec<(f64, bool)> = bonafide.iter().map(|&s| (s, true)).chain(spoof.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nb, ns) = (bonafide.len() as f64, spoof.len() as f64);
    let mut points = Vec::with_capacity(all.len() + 1);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    let (mut misses, mut rejected_spoof) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                misses += 1;
            } else {
                rejected_spoof += 1;
            }
            i += 1;
        }
        points.push(DetPoint {
            threshold: t,
            p_miss: misses as f64 / nb,
            p_fa: (spoof.len() - rejected_spoof) as f64 / ns,
        });
    }
    Ok(points)
}

/// Equal error rate, interpolated linearly between the two DET points where
/// `p_miss - p_fa` turns nonnegative.
pub fn eer(bonafide: &[f64], spoof: &[f64]) -> Result<f64> {
    let det = det_curve(bonafide, spoof)?;
    let i = det
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("the last DET point has p_miss = 1 and p_fa = 0");
    let b = det[i];
    if i == 0 || b.p_miss == b.p_fa {
        return Ok(b.p_miss);
    }
    let a = det[i - 1];
    let (da, db) = (a.p_miss - a.p_fa, b.p_miss - b.p_fa);
    let lambda = da / (da - db);
    Ok(a.p_miss + lambda * (b.p_miss - a.p_miss))
}

/// Legacy tandem cost model with a fixed ASV operating point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdcfCosts {
    pub pi_tar: f64,
    pub pi_non: f64,
    pub pi_spoof: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    pub p_fa_asv: f64,
    pub p_miss_asv: f64,
    pub p_miss_spoof_asv: f64,
}

impl Default for TdcfCosts {
    fn default() -> Self {
        Self {
            pi_tar: 0.9405,
            pi_non: 0.0095,
            pi_spoof: 0.05,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
            c_miss_cm: 1.0,
            c_fa_cm: 10.0,
            p_fa_asv: 0.01,
            p_miss_asv: 0.01,
            p_miss_spoof_asv: 0.5,
        }
    }
}

impl TdcfCosts {
    pub fn validate(&self) -> Result<()> {
        let priors = [self.pi_tar, self.pi_non, self.pi_spoof];
        if priors.iter().any(|p| !(*p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config("t-DCF priors must be nonnegative and sum to 1".into()));
        }
        if [self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm].iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config("t-DCF costs must be positive".into()));
        }
        if [self.p_fa_asv, self.p_miss_asv, self.p_miss_spoof_asv].iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("ASV error rates must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `(C1, C2)`: weights of the CM miss and false-alarm rates.
    pub fn coefficients(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let c1 = self.pi_tar * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv) - self.pi_non * self.c_fa_asv * self.p_fa_asv;
        let c2 = self.c_fa_cm * self.pi_spoof * (1.0 - self.p_miss_spoof_asv);
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(Error::Config(format!(
                "ASV operating point (P_fa={}, P_miss={}, P_miss_spoof={}) gives C1={c1}, C2={c2}; both must be positive",
                self.p_fa_asv, self.p_miss_asv, self.p_miss_spoof_asv
            )));
        }
        Ok((c1, c2))
    }
}

/// `min_t (C1 P_miss(t) + C2 P_fa(t)) / min(C1, C2)`.
pub fn min_tdcf(bonafide: &[f64], spoof: &[f64], costs: &TdcfCosts) -> Result<f64> {
    let (c1, c2) = costs.coefficients()?;
    let det = det_curve(bonafide, spoof)?;
    let best = det.iter().map(|p| c1 * p.p_miss + c2 * p.p_fa).fold(f64::INFINITY, f64::min);
    Ok(best / c1.min(c2))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackMetrics {
    pub eer: f64,
    pub min_tdcf: f64,
    pub n_spoof: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub pooled_eer: f64,
    pub pooled_min_tdcf: f64,
    pub n_bonafide: usize,
    pub n_spoof: usize,
    pub per_attack: BTreeMap<String, AttackMetrics>,
}

/// Pooled metrics plus, per attack, that attack's spoofs against all bona
/// fide trials.
pub fn per_attack_report(s: &ScoreSet, costs: &TdcfCosts) -> Result<MetricReport> {
    let bona = s.bonafide();
    let spoof = s.spoof();
    let mut per_attack = BTreeMap::new();
    for attack in s.attacks() {
        let sp = s.scores_where(|e| e.key == Key::Spoof && e.attack_id == attack);
        per_attack.insert(
            attack,
            AttackMetrics {
                eer: eer(&bona, &sp)?,
                min_tdcf: min_tdcf(&bona, &sp, costs)?,
                n_spoof: sp.len(),
            },
        );
    }
    Ok(MetricReport {
        pooled_eer: eer(&bona, &spoof)?,
        pooled_min_tdcf: min_tdcf(&bona, &spoof, costs)?,
        n_bonafide: bona.len(),
        n_spoof: spoof.len(),
        per_attack,
    })
}

impl MetricReport {
    /// `key = value` lines, pooled first, then one line per attack.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pooled.eer = {}", self.pooled_eer);
        let _ = writeln!(out, "pooled.min_tdcf = {}", self.pooled_min_tdcf);
        let _ = writeln!(out, "trials.bonafide = {}", self.n_bonafide);
        let _ = writeln!(out, "trials.spoof = {}", self.n_spoof);
        for (attack, m) in &self.per_attack {
            let _ = writeln!(out, "attack.{attack}.eer = {}", m.eer);
            let _ = writeln!(out, "attack.{attack}.min_tdcf = {}", m.min_tdcf);
            let _ = writeln!(out, "attack.{attack}.spoof_trials = {}", m.n_spoof);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("attack,eer,min_tdcf,spoof_trials\n");
        let _ = writeln!(out, "pooled,{},{},{}", self.pooled_eer, self.pooled_min_tdcf, self.n_spoof);
        for (attack, m) in &self.per_attack {
            let _ = writeln!(out, "{attack},{},{},{}", m.eer, m.min_tdcf, m.n_spoof);
        }
        out
    }
}

/// One `utt_id score` pair per line.
pub fn format_scores(scores: &[(String, f64)]) -> String {
    let mut out = String::new();
    for (id, s) in scores {
        let _ = writeln!(out, "{id} {s}");
    }
    out
}

pub fn parse_scores_str(text: &str, origin: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let mut fields = t.split_whitespace();
        let (Some(id), Some(score), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(err("expected `utt_id score`".into()));
        };
        let score: f64 = score.parse().map_err(|_| err(format!("bad score `{score}`")))?;
        if !score.is_finite() {
            return Err(err(format!("non-finite score `{score}`")));
        }
        if !seen.insert(id.to_string()) {
            return Err(err(format!("duplicate utterance id `{id}`")));
        }
        out.push((id.to_string(), score));
    }
    Ok(out)
}

pub fn write_scores(path: &Path, scores: &[(String, f64)]) -> Result<()> {
    fs::write(path, format_scores(scores)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores_str(&text, &path.display().to_string())
}
