//! Dwell-time discretization and distribution statistics.
//!
//! Raw dwell is the number of seconds a user spent on a clicked news item,
//! or unknown when the platform could not measure it (last click of a
//! session, app backgrounded, …). Models consume a small vocabulary of
//! bucket ids instead of raw seconds, so that a learned embedding table can
//! represent "bounced", "skimmed", "read" without fitting a continuous curve.
//!
//! The default (`literal`) bucket map:
//!
//! | condition           | id              |
//! |---------------------|-----------------|
//! | unknown             | 1               |
//! | t = 0               | 2               |
//! | 0 < t < 5           | 3               |
//! | 5 ≤ t < 60          | ⌊t/5⌋ + 3 (4–14)|
//! | 60 ≤ t < 600        | ⌊t/60⌋ + 5 (6–14)|
//! | t ≥ 600             | 9               |
//!
//! Note the deliberate quirks of the literal map: the second and third
//! ranges overlap (59 s and 540 s both land in bucket 14) and everything
//! over ten minutes folds into bucket 9, colliding with the 4–5 minute
//! range. The `monotonic` variant renumbers the upper ranges
//! (`⌊t/60⌋ + 15` for 60 ≤ t < 600, 25 for t ≥ 600) so ids are
//! non-decreasing in seconds; it is config-gated and off by default.
//!
//! Bucket 0 is reserved for history padding and is never produced by
//! [`discretize`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A measured-or-missing dwell duration attached to one click.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RawDwell {
    /// The platform recorded no dwell for this click.
    Unknown,
    /// Dwell in seconds; finite and non-negative (fractional allowed).
    Known(f64),
}

impl RawDwell {
    /// Validating constructor for measured dwell.
    pub fn known(seconds: f64) -> Result<RawDwell> {
        if !seconds.is_finite() || seconds < 0.0 {
            return Err(Error::InvalidInput(format!(
                "dwell seconds must be finite and >= 0, got {seconds}"
            )));
        }
        Ok(RawDwell::Known(seconds))
    }

    pub fn is_unknown(self) -> bool {
        matches!(self, RawDwell::Unknown)
    }

    /// Measured seconds, if any.
    pub fn seconds(self) -> Option<f64> {
        match self {
            RawDwell::Unknown => None,
            RawDwell::Known(s) => Some(s),
        }
    }
}

/// Which bucket renumbering to use for the upper (minute-scale) ranges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwellVariant {
    /// The map exactly as tabled above, overlaps and all.
    #[default]
    Literal,
    /// Collision-free renumbering: ids non-decreasing in seconds.
    Monotonic,
}

impl DwellVariant {
    /// Embedding-table vocabulary size: one row per representable id,
    /// including the padding row 0 (and, for `monotonic`, the unused id 15).
    pub fn vocab_size(self) -> usize {
        match self {
            DwellVariant::Literal => 15,  // ids 0..=14
            DwellVariant::Monotonic => 26, // ids 0..=25
        }
    }
}

/// A discretized dwell bucket id. 0 is padding; real clicks get 1..vocab.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DwellBucket(u8);

impl DwellBucket {
    /// Padding rows of an encoded history.
    pub const PAD: DwellBucket = DwellBucket(0);
    /// Clicks whose dwell was never measured.
    pub const UNKNOWN: DwellBucket = DwellBucket(1);

    pub fn id(self) -> u8 {
        self.0
    }

    /// Row index into a dwell embedding table.
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_pad(self) -> bool {
        self.0 == 0
    }
}

/// Bucket a raw dwell with the default `literal` map.
pub fn discretize(raw: RawDwell) -> Result<DwellBucket> {
    discretize_with(raw, DwellVariant::Literal)
}

/// Bucket a raw dwell under the chosen variant.
///
/// Total over valid inputs: unknown and every finite t ≥ 0 map to a bucket;
/// negative or non-finite seconds are rejected.
pub fn discretize_with(raw: RawDwell, variant: DwellVariant) -> Result<DwellBucket> {
    let t = match raw {
        RawDwell::Unknown => return Ok(DwellBucket(1)),
        RawDwell::Known(t) => t,
    };
    if !t.is_finite() || t < 0.0 {
        return Err(Error::InvalidInput(format!(
            "dwell seconds must be finite and >= 0, got {t}"
        )));
    }
    let id = if t == 0.0 {
        2
    } else if t < 5.0 {
        3
    } else if t < 60.0 {
        (t / 5.0).floor() as u8 + 3
    } else if t < 600.0 {
        match variant {
            DwellVariant::Literal => (t / 60.0).floor() as u8 + 5,
            DwellVariant::Monotonic => (t / 60.0).floor() as u8 + 15,
        }
    } else {
        match variant {
            DwellVariant::Literal => 9,
            DwellVariant::Monotonic => 25,
        }
    };
    Ok(DwellBucket(id))
}

/// 1 for any real bucket, 0 for padding — the attention masks are built
/// from this so padded rows carry no weight anywhere.
pub fn mask_bucket(bucket: DwellBucket) -> u8 {
    if bucket.is_pad() {
        0
    } else {
        1
    }
}

/// Summary statistics of a dwell sample, as reported by the `stats`
/// subcommand and used to calibrate the synthetic generator.
#[derive(Clone, Debug, serde::Serialize)]
pub struct DwellDistribution {
    /// Per-bucket counts under the literal map, indexed by bucket id
    /// (index 0 stays 0: padding never occurs in raw records).
    pub counts: Vec<u64>,
    /// counts / total; sums to 1.
    pub fractions: Vec<f64>,
    /// Fraction of records with unknown dwell.
    pub unknown_fraction: f64,
    /// Among *known* dwells, the fraction strictly above 5 seconds.
    /// 0.0 when no dwell is known — check [`Self::over_5s_defined`].
    pub over_5s_fraction: f64,
    pub over_5s_defined: bool,
    /// Histogram of known dwells at 30-second width: (interval start,
    /// fraction of all records). Fractions sum to ≤ 1 because unknown
    /// records fall in no interval.
    pub bar_30s: Vec<(f64, f64)>,
}

/// Tally a sample of raw dwells. Errors on an empty sample.
pub fn dwell_stats(records: &[RawDwell]) -> Result<DwellDistribution> {
    if records.is_empty() {
        return Err(Error::InvalidInput(
            "dwell_stats needs at least one record".into(),
        ));
    }
    let total = records.len() as f64;
    let mut counts = vec![0u64; DwellVariant::Literal.vocab_size()];
    let mut unknown = 0u64;
    let mut known = 0u64;
    let mut over_5s = 0u64;
    let mut bars: Vec<u64> = Vec::new();
    for &r in records {
        counts[discretize(r)?.index()] += 1;
        match r {
            RawDwell::Unknown => unknown += 1,
            RawDwell::Known(t) => {
                known += 1;
                if t > 5.0 {
                    over_5s += 1;
                }
                let slot = (t / 30.0).floor() as usize;
                if bars.len() <= slot {
                    bars.resize(slot + 1, 0);
                }
                bars[slot] += 1;
            }
        }
    }
    let fractions = counts.iter().map(|&c| c as f64 / total).collect();
    Ok(DwellDistribution {
        counts,
        fractions,
        unknown_fraction: unknown as f64 / total,
        over_5s_fraction: if known > 0 {
            over_5s as f64 / known as f64
        } else {
            0.0
        },
        over_5s_defined: known > 0,
        bar_30s: bars
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as f64 * 30.0, c as f64 / total))
            .collect(),
    })
}

impl DwellDistribution {
    /// CSV rows `bucket,count,fraction` for every non-padding literal bucket.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,count,fraction\n");
        for id in 1..self.counts.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                id, self.counts[id], self.fractions[id]
            ));
        }
        out
    }

    /// The two headline numbers as a small JSON object.
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary {
            unknown_fraction: f64,
            over_5s_fraction: f64,
        }
        serde_json::to_string(&Summary {
            unknown_fraction: self.unknown_fraction,
            over_5s_fraction: self.over_5s_fraction,
        })
        .expect("summary serialization cannot fail")
    }
}
