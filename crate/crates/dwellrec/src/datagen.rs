//! Synthetic impression logs, training samples, and evaluation sets.
//!
//! The generator simulates users with latent topic preferences clicking
//! news items with latent topic mixtures. A click is either an interest
//! click (the item matches one of the user's preferred topics; reading
//! time follows a long log-normal law) or a bait click on a small set of
//! globally attention-grabbing topics the user does not actually care
//! about (reading time under five seconds). A fixed fraction of dwell
//! observations is hidden, simulating telemetry loss. Click labels alone
//! therefore overstate interest, and reading time is what separates the
//! two click kinds.
//!
//! Log schema (JSONL, one impression per line):
//!
//! ```text
//! {"iid":str,"uid":str,"history":[{"nid":str,"dwell":float|null}],
//!  "cands":[{"nid":str,"y":0|1,("dwell":float)?}]}
//! ```
//!
//! `null` encodes an unknown dwell. Clicked candidates additionally carry
//! the dwell observed for that click when it is known — evaluation-set
//! construction needs it — and readers accept lines without it.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::dwell::RawDwell;
use crate::error::{Error, Result};
use crate::newsrep::NewsItem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_news: usize,
    pub n_users: usize,
    pub n_topics: usize,
    pub candidates_per_impression: usize,
    pub impressions_per_user: usize,
    pub history_min: usize,
    pub history_max: usize,
    pub train_fraction: f64,
    /// Probability that a click follows interest rather than bait.
    pub p_interest_click: f64,
    pub topics_per_user: usize,
    /// How peaked topic mixtures and preferences are: 0 = one-hot,
    /// 1 = uniform.
    pub topic_concentration: f64,
    /// A click counts as interest-aligned when preference · mixture
    /// reaches this value; aligned clicks draw from the long dwell law.
    pub alignment_threshold: f64,
    /// Fraction of dwell observations replaced by Unknown.
    pub unknown_rate: f64,
    pub long_dwell_median_s: f64,
    pub long_dwell_sigma: f64,
    pub long_dwell_clip_min_s: f64,
    pub long_dwell_clip_max_s: f64,
    pub short_dwell_max_s: f64,
    /// Number of globally attention-grabbing topics bait clicks land on.
    pub clickbait_topics: usize,
}

impl Default for GeneratorConfig {
    fn default() -> GeneratorConfig {
        GeneratorConfig {
            n_news: 1000,
            n_users: 2000,
            n_topics: 16,
            candidates_per_impression: 5,
            impressions_per_user: 2,
            history_min: 8,
            history_max: 30,
            train_fraction: 0.75,
            p_interest_click: 0.895,
            topics_per_user: 3,
            topic_concentration: 0.2,
            alignment_threshold: 0.1,
            unknown_rate: 0.05,
            long_dwell_median_s: 60.0,
            long_dwell_sigma: 1.0,
            long_dwell_clip_min_s: 5.0,
            long_dwell_clip_max_s: 600.0,
            short_dwell_max_s: 5.0,
            clickbait_topics: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_news", self.n_news),
            ("n_users", self.n_users),
            ("n_topics", self.n_topics),
            ("candidates_per_impression", self.candidates_per_impression),
            ("impressions_per_user", self.impressions_per_user),
            ("topics_per_user", self.topics_per_user),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let probs = [
            ("train_fraction", self.train_fraction),
            ("p_interest_click", self.p_interest_click),
            ("topic_concentration", self.topic_concentration),
            ("unknown_rate", self.unknown_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.n_news < self.candidates_per_impression {
            return Err(Error::Config(format!(
                "n_news ({}) must cover candidates_per_impression ({})",
                self.n_news, self.candidates_per_impression
            )));
        }
        if self.history_min > self.history_max {
            return Err(Error::Config(format!(
                "history_min ({}) exceeds history_max ({})",
                self.history_min, self.history_max
            )));
        }
        if self.topics_per_user > self.n_topics || self.clickbait_topics > self.n_topics {
            return Err(Error::Config(
                "topics_per_user and clickbait_topics cannot exceed n_topics".into(),
            ));
        }
        if self.long_dwell_median_s <= 0.0 || self.long_dwell_sigma <= 0.0 {
            return Err(Error::Config("long dwell law needs positive median and sigma".into()));
        }
        if self.long_dwell_clip_min_s < 0.0
            || self.long_dwell_clip_min_s >= self.long_dwell_clip_max_s
        {
            return Err(Error::Config("long dwell clip range is empty or negative".into()));
        }
        if self.short_dwell_max_s <= 0.0 {
            return Err(Error::Config("short_dwell_max_s must be positive".into()));
        }
        if self.alignment_threshold < 0.0 {
            return Err(Error::Config("alignment_threshold must be non-negative".into()));
        }
        Ok(())
    }
}

/// One past click in a user's history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ClickWire", try_from = "ClickWire")]
pub struct ClickRecord {
    pub nid: String,
    pub dwell: RawDwell,
}

#[derive(Serialize, Deserialize)]
struct ClickWire {
    nid: String,
    dwell: Option<f64>,
}

impl From<ClickRecord> for ClickWire {
    fn from(c: ClickRecord) -> ClickWire {
        ClickWire {
            nid: c.nid,
            dwell: match c.dwell {
                RawDwell::Known(t) => Some(t),
                RawDwell::Unknown => None,
            },
        }
    }
}

impl TryFrom<ClickWire> for ClickRecord {
    type Error = Error;
    fn try_from(w: ClickWire) -> Result<ClickRecord> {
        let dwell = match w.dwell {
            Some(t) => RawDwell::known(t)?,
            None => RawDwell::Unknown,
        };
        Ok(ClickRecord { nid: w.nid, dwell })
    }
}

/// One ranked candidate. `dwell` is only ever present on clicked
/// candidates (`y == 1`); absence there means the dwell is unknown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub nid: String,
    pub y: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Impression {
    pub iid: String,
    pub uid: String,
    /// Ordered oldest to newest; the last record is the most recent click.
    pub history: Vec<ClickRecord>,
    pub cands: Vec<Candidate>,
}

impl Impression {
    fn validate(&self) -> Result<()> {
        if self.cands.is_empty() {
            return Err(Error::InvalidInput(format!(
                "impression `{}` has no candidates",
                self.iid
            )));
        }
        for c in &self.cands {
            if c.y > 1 {
                return Err(Error::InvalidInput(format!(
                    "impression `{}`: label {} for `{}` is not binary",
                    self.iid, c.y, c.nid
                )));
            }
            match c.dwell {
                Some(t) if !t.is_finite() || t < 0.0 => {
                    return Err(Error::InvalidInput(format!(
                        "impression `{}`: candidate `{}` has invalid dwell {t}",
                        self.iid, c.nid
                    )));
                }
                Some(_) if c.y == 0 => {
                    return Err(Error::InvalidInput(format!(
                        "impression `{}`: unclicked candidate `{}` carries a dwell",
                        self.iid, c.nid
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn positives(&self) -> impl Iterator<Item = &Candidate> {
        self.cands.iter().filter(|c| c.y == 1)
    }
}

pub fn write_impressions(impressions: &[Impression], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for imp in impressions {
        serde_json::to_writer(&mut f, imp)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_impressions(path: &Path) -> Result<Vec<Impression>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let imp: Impression = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        imp.validate().map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(imp);
    }
    Ok(out)
}

/// Generate a news catalog and a full impression log, deterministically in
/// `(cfg, seed)`.
pub fn generate_corpus(
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<(Vec<NewsItem>, Vec<Impression>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.n_topics;

    let dominant: Vec<usize> = (0..cfg.n_news).map(|_| rng.random_range(0..t)).collect();
    let news: Vec<NewsItem> = dominant
        .iter()
        .enumerate()
        .map(|(i, &dom)| NewsItem {
            nid: format!("n{i:05}"),
            topics: peaked_mixture(t, &[dom], cfg.topic_concentration),
        })
        .collect();
    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); t];
    for (i, &dom) in dominant.iter().enumerate() {
        by_topic[dom].push(i);
    }
    let bait_topics: HashSet<usize> =
        sample_distinct(&mut rng, t, cfg.clickbait_topics).into_iter().collect();

    let long_law = LogNormal::new(cfg.long_dwell_median_s.ln(), cfg.long_dwell_sigma)
        .map_err(|e| Error::Config(format!("long dwell law: {e}")))?;

    let mut impressions = Vec::with_capacity(cfg.n_users * cfg.impressions_per_user);
    let mut iid = 0usize;
    for u in 0..cfg.n_users {
        let preferred = sample_distinct(&mut rng, t, cfg.topics_per_user);
        let pref = preference_vector(t, &preferred, cfg.topic_concentration);
        let preferred_set: HashSet<usize> = preferred.iter().copied().collect();

        // Interest clicks draw from the user's preferred topics; bait
        // clicks from attention-grabbing topics the user does NOT prefer,
        // so a bait click never crosses the alignment threshold. Each pool
        // falls back to broader ones when a degenerate config empties it.
        let interest_pool = pool_for(&by_topic, |k| preferred_set.contains(&k))
            .unwrap_or_else(|| (0..cfg.n_news).collect());
        let bait_pool = pool_for(&by_topic, |k| {
            bait_topics.contains(&k) && !preferred_set.contains(&k)
        })
        .or_else(|| pool_for(&by_topic, |k| !preferred_set.contains(&k)))
        .unwrap_or_else(|| (0..cfg.n_news).collect());

        let click = |rng: &mut ChaCha8Rng| -> (usize, RawDwell) {
            let pool = if rng.random_bool(cfg.p_interest_click) {
                &interest_pool
            } else {
                &bait_pool
            };
            let idx = pool[rng.random_range(0..pool.len())];
            let aligned = dot(&pref, &news[idx].topics) >= cfg.alignment_threshold;
            let seconds = if aligned {
                long_law
                    .sample(rng)
                    .clamp(cfg.long_dwell_clip_min_s, cfg.long_dwell_clip_max_s)
            } else {
                rng.random_range(0.0..cfg.short_dwell_max_s)
            };
            let dwell = if rng.random_bool(cfg.unknown_rate) {
                RawDwell::Unknown
            } else {
                RawDwell::Known(seconds)
            };
            (idx, dwell)
        };

        for _ in 0..cfg.impressions_per_user {
            let hist_len = rng.random_range(cfg.history_min..=cfg.history_max);
            let history: Vec<ClickRecord> = (0..hist_len)
                .map(|_| {
                    let (idx, dwell) = click(&mut rng);
                    ClickRecord {
                        nid: news[idx].nid.clone(),
                        dwell,
                    }
                })
                .collect();

            let (pos_idx, pos_dwell) = click(&mut rng);
            let mut cands = vec![Candidate {
                nid: news[pos_idx].nid.clone(),
                y: 1,
                dwell: match pos_dwell {
                    RawDwell::Known(s) => Some(s),
                    RawDwell::Unknown => None,
                },
            }];
            let mut used: HashSet<usize> = HashSet::from([pos_idx]);
            while cands.len() < cfg.candidates_per_impression {
                let j = rng.random_range(0..cfg.n_news);
                if used.insert(j) {
                    cands.push(Candidate {
                        nid: news[j].nid.clone(),
                        y: 0,
                        dwell: None,
                    });
                }
            }
            cands.shuffle(&mut rng);

            impressions.push(Impression {
                iid: format!("i{iid:06}"),
                uid: format!("u{u:05}"),
                history,
                cands,
            });
            iid += 1;
        }
    }
    Ok((news, impressions))
}

/// Seeded shuffle-split of an impression log into train and test parts.
pub fn split_impressions(
    mut impressions: Vec<Impression>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Impression>, Vec<Impression>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!(
            "train_fraction must lie in [0, 1], got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    impressions.shuffle(&mut rng);
    let n_train = (impressions.len() as f64 * train_fraction).floor() as usize;
    let test = impressions.split_off(n_train);
    Ok((impressions, test))
}

fn peaked_mixture(t: usize, peaks: &[usize], concentration: f64) -> Vec<f64> {
    let mut mix = vec![concentration / t as f64; t];
    for &p in peaks {
        mix[p] += (1.0 - concentration) / peaks.len() as f64;
    }
    mix
}

fn preference_vector(t: usize, preferred: &[usize], concentration: f64) -> Vec<f64> {
    peaked_mixture(t, preferred, concentration)
}

fn pool_for(by_topic: &[Vec<usize>], keep: impl Fn(usize) -> bool) -> Option<Vec<usize>> {
    let pool: Vec<usize> = by_topic
        .iter()
        .enumerate()
        .filter(|(k, _)| keep(*k))
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    (!pool.is_empty()).then_some(pool)
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let (chosen, _) = idx.partial_shuffle(rng, k);
    chosen.to_vec()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One ranking training instance: a clicked item and K unclicked ones from
/// the same impression.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub history: Vec<ClickRecord>,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// Build one sample per clicked candidate. Negatives come uniformly
/// without replacement from the impression's unclicked candidates, with
/// replacement only when fewer than `k` exist, and the negative order is
/// shuffled. Returns the samples and the count of positives skipped for
/// lack of any unclicked candidate.
pub fn build_train_samples(
    impressions: &[Impression],
    k: usize,
    seed: u64,
) -> Result<(Vec<TrainSample>, usize)> {
    if k == 0 {
        return Err(Error::Config("negative count k must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for imp in impressions {
        let pool: Vec<&str> = imp
            .cands
            .iter()
            .filter(|c| c.y == 0)
            .map(|c| c.nid.as_str())
            .collect();
        for pos in imp.positives() {
            if pool.is_empty() {
                skipped += 1;
                continue;
            }
            let mut negatives: Vec<String> = if pool.len() >= k {
                let mut idx: Vec<usize> = (0..pool.len()).collect();
                let (chosen, _) = idx.partial_shuffle(&mut rng, k);
                chosen.iter().map(|&i| pool[i].to_string()).collect()
            } else {
                (0..k)
                    .map(|_| pool[rng.random_range(0..pool.len())].to_string())
                    .collect()
            };
            negatives.shuffle(&mut rng);
            samples.push(TrainSample {
                history: imp.history.clone(),
                positive: pos.nid.clone(),
                negatives,
            });
        }
    }
    Ok((samples, skipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Normal,
    Real,
    Robust,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Normal => "normal",
            EvalMode::Real => "real",
            EvalMode::Robust => "robust",
        })
    }
}

#[derive(Clone, Debug)]
pub struct EvalSet {
    pub mode: EvalMode,
    pub theta: f64,
    pub impressions: Vec<Impression>,
}

/// Build an evaluation set.
///
/// Normal keeps every impression as is. Real(θ) keeps a clicked candidate
/// positive only when its recorded dwell exceeds θ — unknown-dwell clicks
/// cannot be confirmed and are relabeled 0 — and drops impressions left
/// with no positive. Robust(θ) relaxes Real by keeping unknown-dwell
/// clicks positive.
pub fn build_eval_set(
    impressions: &[Impression],
    mode: EvalMode,
    theta: f64,
) -> Result<EvalSet> {
    if mode != EvalMode::Normal && theta <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "threshold must be positive for {mode} mode, got {theta}"
        )));
    }
    let kept = match mode {
        EvalMode::Normal => impressions.to_vec(),
        EvalMode::Real | EvalMode::Robust => impressions
            .iter()
            .filter_map(|imp| {
                let mut imp = imp.clone();
                for c in &mut imp.cands {
                    if c.y != 1 {
                        continue;
                    }
                    let keep = match c.dwell {
                        Some(t) => t > theta,
                        None => mode == EvalMode::Robust,
                    };
                    if !keep {
                        c.y = 0;
                        c.dwell = None;
                    }
                }
                let has_positive = imp.positives().next().is_some();
                has_positive.then_some(imp)
            })
            .collect(),
    };
    Ok(EvalSet {
        mode,
        theta,
        impressions: kept,
    })
}

/// Replace every history dwell with Unknown; candidates and labels stay
/// untouched. Idempotent.
pub fn mask_eval_dwell(set: &EvalSet) -> EvalSet {
    let impressions = set
        .impressions
        .iter()
        .map(|imp| {
            let mut imp = imp.clone();
            for rec in &mut imp.history {
                rec.dwell = RawDwell::Unknown;
            }
            imp
        })
        .collect();
    EvalSet {
        mode: set.mode,
        theta: set.theta,
        impressions,
    }
}
