//! Intercoder reliability between machine decisions and the gold standard.
//!
//! Every statistic is computed from a binary 2x2 table:
//!
//! ```text
//!                 gold = 1   gold = 0
//! machine = 1        a          b
//! machine = 0        c          d
//! ```
//!
//! Cohen's kappa and Gwet's AC1 share the form `(p_o - p_e) / (1 - p_e)` and
//! differ only in the chance term. Both are evaluated from integer counts, so
//! the undefined case (`p_e = 1`) is detected exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound (inclusive) of substantial agreement.
pub const SUBSTANTIAL_KAPPA: f64 = 0.6;
/// Lower bound (inclusive) of excellent agreement.
pub const EXCELLENT_KAPPA: f64 = 0.75;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReliabilityError {
    #[error("label sets cover different passages (machine only: {machine_only:?}; gold only: {gold_only:?})")]
    IdMismatch {
        machine_only: Vec<String>,
        gold_only: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion2x2 {
    /// Both applied.
    pub a: u64,
    /// Machine only.
    pub b: u64,
    /// Gold only.
    pub c: u64,
    /// Neither applied.
    pub d: u64,
}

impl Confusion2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Confusion2x2 { a, b, c, d }
    }

    pub fn n(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn record(&mut self, machine: bool, gold: bool) {
        match (machine, gold) {
            (true, true) => self.a += 1,
            (true, false) => self.b += 1,
            (false, true) => self.c += 1,
            (false, false) => self.d += 1,
        }
    }

    /// The same table with the two raters swapped.
    pub fn transposed(&self) -> Self {
        Confusion2x2::new(self.a, self.c, self.b, self.d)
    }
}

/// Counts agreement over a shared passage id set.
pub fn confusion_2x2(
    machine: &BTreeMap<String, bool>,
    gold: &BTreeMap<String, bool>,
) -> Result<Confusion2x2, ReliabilityError> {
    let m: BTreeSet<&String> = machine.keys().collect();
    let g: BTreeSet<&String> = gold.keys().collect();
    if m != g {
        return Err(ReliabilityError::IdMismatch {
            machine_only: m.difference(&g).map(|s| s.to_string()).collect(),
            gold_only: g.difference(&m).map(|s| s.to_string()).collect(),
        });
    }
    let mut t = Confusion2x2::default();
    for (id, &mv) in machine {
        t.record(mv, gold[id]);
    }
    Ok(t)
}

/// `(p_o - p_e) / (1 - p_e)` with both probabilities given over a common
/// integer denominator. `None` when `p_e = 1`.
fn chance_corrected(observed: u128, chance: u128, denom: u128) -> Option<f64> {
    if denom == 0 || chance == denom {
        return None;
    }
    Some((observed as f64 - chance as f64) / (denom as f64 - chance as f64))
}

/// Cohen's kappa. `None` (undefined) when chance agreement is 1 or `n = 0`.
pub fn cohen_kappa(t: &Confusion2x2) -> Option<f64> {
    let (a, b, c, d) = (t.a as u128, t.b as u128, t.c as u128, t.d as u128);
    let n = a + b + c + d;
    // p_o = n(a+d)/n², p_e = [(a+b)(a+c) + (c+d)(b+d)]/n²
    let chance = (a + b) * (a + c) + (c + d) * (b + d);
    chance_corrected(n * (a + d), chance, n * n)
}

/// Gwet's AC1. `None` when `n = 0`; the chance term `2π(1-π)` never exceeds
/// 1/2, so AC1 is otherwise always defined.
pub fn gwet_ac1(t: &Confusion2x2) -> Option<f64> {
    let (a, b, c, d) = (t.a as u128, t.b as u128, t.c as u128, t.d as u128);
    let n = a + b + c + d;
    // π = (2a+b+c)/2n, 1-π = (2d+b+c)/2n, p_e' = 2π(1-π) = (2a+b+c)(2d+b+c)/2n²
    let chance = (2 * a + b + c) * (2 * d + b + c);
    chance_corrected(2 * n * (a + d), chance, 2 * n * n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub p_o: f64,
    pub p_e: f64,
    pub kappa: Option<f64>,
    pub percent_agreement: f64,
    pub ac1: Option<f64>,
    /// Mean positive rate of the two raters.
    pub prevalence: f64,
}

/// All statistics for one table. For `n = 0` every probability is 0 and both
/// coefficients are undefined.
pub fn agreement_stats(t: &Confusion2x2) -> AgreementStats {
    let n = t.n();
    if n == 0 {
        return AgreementStats {
            p_o: 0.0,
            p_e: 0.0,
            kappa: None,
            percent_agreement: 0.0,
            ac1: None,
            prevalence: 0.0,
        };
    }
    let nf = n as f64;
    let p_o = (t.a + t.d) as f64 / nf;
    let p_e =
        (((t.a + t.b) as u128 * (t.a + t.c) as u128 + (t.c + t.d) as u128 * (t.b + t.d) as u128) as f64) / (nf * nf);
    AgreementStats {
        p_o,
        p_e,
        kappa: cohen_kappa(t),
        percent_agreement: p_o,
        ac1: gwet_ac1(t),
        prevalence: (2 * t.a + t.b + t.c) as f64 / (2.0 * nf),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgreementBand {
    Excellent,
    Substantial,
    Low,
}

impl fmt::Display for AgreementBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgreementBand::Excellent => "excellent",
            AgreementBand::Substantial => "substantial",
            AgreementBand::Low => "low",
        })
    }
}

/// Bands kappa with inclusive lower bounds at 0.6 and 0.75.
pub fn interpret_agreement(kappa: f64) -> AgreementBand {
    if kappa >= EXCELLENT_KAPPA {
        AgreementBand::Excellent
    } else if kappa >= SUBSTANTIAL_KAPPA {
        AgreementBand::Substantial
    } else {
        AgreementBand::Low
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanKappa {
    /// Mean over defined values; `None` if there are none.
    pub mean: Option<f64>,
    /// Number of undefined values left out.
    pub excluded: usize,
}

pub fn aggregate_mean_kappa(per_code: &[Option<f64>]) -> MeanKappa {
    let defined: Vec<f64> = per_code.iter().flatten().copied().collect();
    MeanKappa {
        mean: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        excluded: per_code.len() - defined.len(),
    }
}
