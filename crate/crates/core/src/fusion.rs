//! Linear soft-margin SVM fusion of several systems' scores.
//!
//! Columns are standardised, then the dual problem
//! `min 1/2 a'Qa - sum(a)`, `0 <= a <= C`, `y'a = 0` is solved by SMO with
//! maximal-violating-pair selection. The primal weights are kept explicitly,
//! which is all a linear kernel needs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::audio::{Key, TrialRecord};
use crate::error::{Error, Result};
use crate::metrics::{ScoreSet, ScoredTrial};

/// Standardised inputs are snapped to this grid, so an affine rescaling of
/// any input column produces bit-identical (or sign-flipped) SVM inputs.
const SNAP: f64 = (1u64 << 30) as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct Aligned {
    pub systems: Vec<String>,
    pub utt_ids: Vec<String>,
    /// Row-major `[T, K]`.
    pub x: Vec<f64>,
    pub keys: Vec<Key>,
    pub attack_ids: Vec<String>,
}

impl Aligned {
    pub fn n_systems(&self) -> usize {
        self.systems.len()
    }

    pub fn n_trials(&self) -> usize {
        self.utt_ids.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let k = self.n_systems();
        &self.x[t * k..(t + 1) * k]
    }

    pub fn column(&self, s: usize) -> Vec<f64> {
        (0..self.n_trials()).map(|t| self.row(t)[s]).collect()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.keys.iter().map(|k| if *k == Key::Bonafide { 1.0 } else { -1.0 }).collect()
    }
}

/// Inner-join named score lists on `utt_id`, rows sorted by `utt_id`. Every
/// list must cover exactly the protocol's trials.
pub fn align(systems: &[(String, Vec<(String, f64)>)], protocol: &[TrialRecord]) -> Result<Aligned> {
    if systems.is_empty() {
        return Err(Error::Alignment("no systems to align".into()));
    }
    let meta: BTreeMap<&str, &TrialRecord> = protocol.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    let mut columns = Vec::with_capacity(systems.len());
    let mut problems = Vec::new();
    for (name, scores) in systems {
        let col: BTreeMap<&str, f64> = scores.iter().map(|(id, s)| (id.as_str(), *s)).collect();
        let missing: Vec<&str> = meta.keys().filter(|id| !col.contains_key(*id)).copied().collect();
        let extra: Vec<&str> = col.keys().filter(|id| !meta.contains_key(*id)).copied().collect();
        if !missing.is_empty() {
            problems.push(format!("{name} lacks [{}]", missing.join(", ")));
        }
        if !extra.is_empty() {
            problems.push(format!("{name} has unknown [{}]", extra.join(", ")));
        }
        columns.push(col);
    }
    if !problems.is_empty() {
        return Err(Error::Alignment(problems.join("; ")));
    }
    let mut x = Vec::with_capacity(meta.len() * systems.len());
    for id in meta.keys() {
        x.extend(columns.iter().map(|c| c[id]));
    }
    Ok(Aligned {
        systems: systems.iter().map(|(n, _)| n.clone()).collect(),
        utt_ids: meta.keys().map(|s| s.to_string()).collect(),
        x,
        keys: meta.values().map(|r| r.key).collect(),
        attack_ids: meta.values().map(|r| r.attack_id.clone()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub systems: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    /// Stop when the maximal KKT violation falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-6,
            max_iter: 1_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitInfo {
    pub iterations: usize,
    pub violation: f64,
    pub converged: bool,
}

fn standardise(v: f64, mean: f64, std: f64) -> f64 {
    ((v - mean) / std * SNAP).round() / SNAP
}

impl FusionModel {
    pub fn n_systems(&self) -> usize {
        self.weights.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k != self.n_systems() {
            return Err(Error::dim(format!("fusion model takes {} systems, got {k}", self.n_systems())));
        }
        Ok(())
    }

    pub fn score_row(&self, row: &[f64]) -> Result<f64> {
        self.check(row.len())?;
        Ok(row
            .iter()
            .enumerate()
            .map(|(s, &v)| self.weights[s] * standardise(v, self.mean[s], self.std[s]))
            .sum::<f64>()
            + self.bias)
    }

    /// Fused `utt_id score` pairs in row order.
    pub fn fuse(&self, data: &Aligned) -> Result<Vec<(String, f64)>> {
        self.check(data.n_systems())?;
        (0..data.n_trials()).map(|t| Ok((data.utt_ids[t].clone(), self.score_row(data.row(t))?))).collect()
    }

    /// Fused scores with key and attack metadata carried over.
    pub fn fuse_set(&self, data: &Aligned) -> Result<ScoreSet> {
        let fused = self.fuse(data)?;
        ScoreSet::new(
            fused
                .into_iter()
                .enumerate()
                .map(|(t, (utt_id, score))| ScoredTrial {
                    utt_id,
                    score,
                    key: data.keys[t],
                    attack_id: data.attack_ids[t].clone(),
                })
                .collect(),
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# linear SVM score fusion\n");
        let _ = writeln!(out, "systems = {}", self.n_systems());
        for s in 0..self.n_systems() {
            let _ = writeln!(out, "system.{s}.name = {}", self.systems[s]);
            let _ = writeln!(out, "system.{s}.mean = {}", self.mean[s]);
            let _ = writeln!(out, "system.{s}.std = {}", self.std[s]);
            let _ = writeln!(out, "system.{s}.weight = {}", self.weights[s]);
        }
        let _ = writeln!(out, "bias = {}", self.bias);
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("{origin}: missing `{k}`")));
        let num = |k: &str| -> Result<f64> {
            let (line, v) = get(k)?;
            v.parse().map_err(|_| Error::Parse {
                path: origin.to_string(),
                line: *line,
                msg: format!("`{k}` is not a number"),
            })
        };
        let k = num("systems")? as usize;
        let mut m = FusionModel {
            systems: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
            weights: Vec::new(),
            bias: num("bias")?,
        };
        for s in 0..k {
            m.systems.push(get(&format!("system.{s}.name"))?.1.clone());
            m.mean.push(num(&format!("system.{s}.mean"))?);
            m.std.push(num(&format!("system.{s}.std"))?);
            m.weights.push(num(&format!("system.{s}.weight"))?);
        }
        if m.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Format(format!("{origin}: scaler std must be positive")));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

pub fn fit_svm(data: &Aligned, cfg: &SvmConfig) -> Result<FusionModel> {
    fit_svm_with_info(data, cfg).map(|(m, _)| m)
}

pub fn fit_svm_with_info(data: &Aligned, cfg: &SvmConfig) -> Result<(FusionModel, FitInfo)> {
    let (t_n, k) = (data.n_trials(), data.n_systems());
    let y = data.labels();
    if !y.iter().any(|&v| v > 0.0) || !y.iter().any(|&v| v < 0.0) {
        return Err(Error::Contract("fusion training needs bona fide and spoof trials".into()));
    }
    if !(cfg.c > 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::Config("SVM C and tolerance must be positive".into()));
    }
    let mut mean = Vec::with_capacity(k);
    let mut std = Vec::with_capacity(k);
    for s in 0..k {
        let col = data.column(s);
        let m = col.iter().sum::<f64>() / t_n as f64;
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t_n as f64;
        if !(v.sqrt() > 0.0) || !v.is_finite() {
            return Err(Error::Contract(format!("system `{}` has constant scores", data.systems[s])));
        }
        mean.push(m);
        std.push(v.sqrt());
    }
    let z: Vec<f64> = (0..t_n * k).map(|i| standardise(data.x[i], mean[i % k], std[i % k])).collect();
    let row = |t: usize| &z[t * k..(t + 1) * k];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();

    let c = cfg.c;
    let mut alpha = vec![0.0; t_n];
    let mut w = vec![0.0; k];
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    // grad_t = y_t <w, z_t> - 1
    let mut grad = vec![-1.0; t_n];
    while iterations < cfg.max_iter {
        let mut up = (f64::NEG_INFINITY, usize::MAX);
        let mut low = (f64::INFINITY, usize::MAX);
        for t in 0..t_n {
            let v = -y[t] * grad[t];
            let in_up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
            let in_low = (y[t] < 0.0 && alpha[t] < c) || (y[t] > 0.0 && alpha[t] > 0.0);
            if in_up && v > up.0 {
                up = (v, t);
            }
            if in_low && v < low.0 {
                low = (v, t);
            }
        }
        violation = up.0 - low.0;
        if violation < cfg.tol {
            break;
        }
        let (i, j) = (up.1, low.1);
        let (zi, zj) = (row(i), row(j));
        let eta = (dot(zi, zi) + dot(zj, zj) - 2.0 * dot(zi, zj)).max(1e-12);
        let mut step = violation / eta;
        step = step.min(if y[i] > 0.0 { c - alpha[i] } else { alpha[i] });
        step = step.min(if y[j] > 0.0 { alpha[j] } else { c - alpha[j] });
        alpha[i] += y[i] * step;
        alpha[j] -= y[j] * step;
        for s in 0..k {
            w[s] += step * (zi[s] - zj[s]);
        }
        for t in 0..t_n {
            grad[t] = y[t] * dot(&w, row(t)) - 1.0;
        }
        iterations += 1;
    }

    // b = -rho, rho averaged over free vectors (midpoint of the bounds otherwise)
    let free: Vec<f64> = (0..t_n).filter(|&t| alpha[t] > 0.0 && alpha[t] < c).map(|t| y[t] * grad[t]).collect();
    let rho = if free.is_empty() {
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 0..t_n {
            let yg = y[t] * grad[t];
            let at_lower = alpha[t] <= 0.0;
            if (y[t] > 0.0) == at_lower {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        }
        (ub + lb) / 2.0
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    let model = FusionModel {
        systems: data.systems.clone(),
        mean,
        std,
        weights: w,
        bias: -rho,
    };
    let info = FitInfo {
        iterations,
        violation,
        converged: violation < cfg.tol,
    };
    Ok((model, info))
}
