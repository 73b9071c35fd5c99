//! Closed-form bounds on Key-Write and Postcarding query failures.
//!
//! Notation: `N` redundancy, `b` checksum (or cell) width in bits, `α` the
//! number of distinct writes since the queried key as a fraction of the slot
//! (or chunk) count, `B` hops per chunk and `|V|` the value universe size.
//!
//! A location of the queried key survives `αM` later writes of `N` copies each
//! with probability `e^{-αN}` under the Poisson approximation, or
//! `(1 - 1/M)^{αMN}` exactly. Products of tiny probabilities are evaluated
//! through `ln_1p`/`exp_m1` so that `1 - (1 - 2^-b)^N` keeps its precision even
//! at `b = 64`; [`pc_wrong_bound_ln`] stays finite where the linear value
//! underflows.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive};
use thiserror::Error;

/// Scalar type the bounds are evaluated in.
pub trait Probability: Float + FloatConst + FromPrimitive + Debug + Display + Send + Sync + 'static {}
impl Probability for f32 {}
impl Probability for f64 {}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("redundancy must be at least 1")]
    BadRedundancy,
    #[error("width must be in 1..=64 bits, got {0}")]
    BadWidth(u32),
    #[error("load factor must be finite and non-negative")]
    BadAlpha,
    #[error("hops per chunk must be at least 1")]
    BadHops,
    #[error("value universe exponent must be finite and non-negative")]
    BadUniverse,
    #[error("exact overwrite model needs at least one slot")]
    BadSlots,
}

/// How the per-location overwrite probability is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverwriteModel {
    #[default]
    Poisson,
    /// Binomial with a finite table of `slots` locations.
    Exact { slots: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KwModel<F> {
    pub n: u32,
    pub b: u32,
    pub alpha: F,
    pub overwrite: OverwriteModel,
}

fn c<F: Probability>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

fn binomial<F: Probability>(n: u32, k: u32) -> F {
    (0..k).fold(F::one(), |acc, i| acc * c::<F>(f64::from(n - i)) / c::<F>(f64::from(i + 1)))
}

/// `P[Binomial(n, q) >= 2]`, summed directly to avoid cancellation.
fn at_least_two<F: Probability>(n: u32, q: F) -> F {
    let ln_keep = (-q).ln_1p();
    (2..=n)
        .map(|k| binomial::<F>(n, k) * q.powi(k as i32) * pow_ln(ln_keep, n - k))
        .fold(F::zero(), |a, x| a + x)
}

/// `exp(ln_base · j)`, with `j = 0` giving one even for a zero base.
fn pow_ln<F: Probability>(ln_base: F, j: u32) -> F {
    if j == 0 {
        F::one()
    } else {
        (ln_base * c(f64::from(j))).exp()
    }
}

/// `1 - (1 - q)^j`.
fn any_of<F: Probability>(j: u32, q: F) -> F {
    -((-q).ln_1p() * c(f64::from(j))).exp_m1()
}

/// `(1 - q)^j`.
fn none_of<F: Probability>(j: u32, q: F) -> F {
    pow_ln((-q).ln_1p(), j)
}

impl<F: Probability> KwModel<F> {
    pub fn new(n: u32, b: u32, alpha: F) -> Result<Self, ModelError> {
        let m = KwModel {
            n,
            b,
            alpha,
            overwrite: OverwriteModel::Poisson,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn exact(mut self, slots: u64) -> Result<Self, ModelError> {
        if slots == 0 {
            return Err(ModelError::BadSlots);
        }
        self.overwrite = OverwriteModel::Exact { slots };
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n == 0 {
            return Err(ModelError::BadRedundancy);
        }
        if !(1..=64).contains(&self.b) {
            return Err(ModelError::BadWidth(self.b));
        }
        if !self.alpha.is_finite() || self.alpha < F::zero() {
            return Err(ModelError::BadAlpha);
        }
        Ok(())
    }

    /// `ln` of the probability that one location survives all later writes.
    fn ln_survive(&self) -> F {
        let n = c::<F>(f64::from(self.n));
        match self.overwrite {
            OverwriteModel::Poisson => -self.alpha * n,
            OverwriteModel::Exact { slots } => {
                let m = c::<F>(slots as f64);
                let writes = (self.alpha * m).round() * n;
                writes * (-(F::one() / m)).ln_1p()
            }
        }
    }

    /// Probability that a given location was overwritten, `1 - e^{-αN}`.
    pub fn overwritten(&self) -> F {
        -self.ln_survive().exp_m1()
    }

    pub fn survives(&self) -> F {
        self.ln_survive().exp()
    }

    /// Probability that a random overwriting key matches the checksum, `2^-b`.
    pub fn match_probability(&self) -> F {
        c::<F>(2.0).powi(-(self.b as i32))
    }
}

/// The three additive terms of the Key-Write no-output bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KwNoOutput<F> {
    /// All `N` locations overwritten and none carries the key's checksum.
    pub all_overwritten: F,
    /// All overwritten and at least two overwriting entries match the checksum.
    pub all_overwritten_conflict: F,
    /// Some but not all overwritten, and an overwritten one matches the checksum.
    pub partial_overwrite_match: F,
}

impl<F: Probability> KwNoOutput<F> {
    pub fn total(&self) -> F {
        self.all_overwritten + self.all_overwritten_conflict + self.partial_overwrite_match
    }

    /// Bracket on the "several distinct matching values" part alone.
    pub fn multi_candidate_bracket(&self) -> (F, F) {
        (
            self.partial_overwrite_match,
            self.partial_overwrite_match + self.all_overwritten_conflict,
        )
    }

    /// Lower and upper bound on the empty-return probability.
    pub fn bracket(&self) -> (F, F) {
        let (lo, hi) = self.multi_candidate_bracket();
        (self.all_overwritten + lo, self.all_overwritten + hi)
    }
}

/// `Σ_{j=1}^{N-1} C(N,j) O^j S^{N-j} (1 - (1 - q)^j)` with overwrite `O`, survival `S`.
fn partial_term<F: Probability>(n: u32, overwritten: F, survives: F, q: F) -> F {
    (1..n)
        .map(|j| {
            binomial::<F>(n, j) * overwritten.powi(j as i32) * survives.powi((n - j) as i32) * any_of(j, q)
        })
        .fold(F::zero(), |a, x| a + x)
}

pub fn kw_no_output_bound<F: Probability>(m: &KwModel<F>) -> KwNoOutput<F> {
    let n = m.n;
    let q = m.match_probability();
    let all = m.overwritten().powi(n as i32);
    KwNoOutput {
        all_overwritten: all * none_of(n, q),
        all_overwritten_conflict: all * at_least_two(n, q),
        partial_overwrite_match: partial_term(n, m.overwritten(), m.survives(), q),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KwWrongOutput<F> {
    /// `(1 - e^{-αN})^N · N · 2^{-b}`.
    pub bound: F,
    /// Exactly one overwriting key matches the checksum.
    pub lower: F,
    /// At least one overwriting key matches the checksum.
    pub upper: F,
}

pub fn kw_wrong_output_bound<F: Probability>(m: &KwModel<F>) -> KwWrongOutput<F> {
    let n = m.n;
    let q = m.match_probability();
    let all = m.overwritten().powi(n as i32);
    KwWrongOutput {
        bound: (all * c(f64::from(n)) * q).min(F::one()),
        lower: (all * c(f64::from(n)) * q * none_of(n - 1, q)).min(F::one()),
        upper: all * any_of(n, q),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcModel<F> {
    pub kw: KwModel<F>,
    /// Hops per chunk, `B`.
    pub hops: u32,
    /// `log2 |V|`.
    pub value_bits: F,
}

impl<F: Probability> PcModel<F> {
    pub fn new(n: u32, b: u32, alpha: F, hops: u32, value_bits: F) -> Result<Self, ModelError> {
        let kw = KwModel::new(n, b, alpha)?;
        if hops == 0 {
            return Err(ModelError::BadHops);
        }
        if !value_bits.is_finite() || value_bits < F::zero() {
            return Err(ModelError::BadUniverse);
        }
        Ok(PcModel { kw, hops, value_bits })
    }

    /// `ln(((|V| + 1) · 2^{-b})^B)`, clamped at zero.
    pub fn ln_valid_chunk(&self) -> F {
        let ln2 = F::LN_2();
        let ln_v1 = self.value_bits * ln2 + c::<F>(2.0).powf(-self.value_bits).ln_1p();
        let per_cell = ln_v1 - c::<F>(f64::from(self.kw.b)) * ln2;
        (per_cell * c(f64::from(self.hops))).min(F::zero())
    }

    /// Probability that an overwritten chunk decodes as valid for the queried flow.
    pub fn valid_chunk(&self) -> F {
        self.ln_valid_chunk().exp()
    }
}

/// The three additive terms of the Postcarding failure-to-output bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcFail<F> {
    /// All chunks overwritten, none valid.
    pub all_overwritten: F,
    /// All chunks overwritten, at least two valid.
    pub all_overwritten_conflict: F,
    /// Some but not all overwritten, an overwritten one valid.
    pub partial_overwrite_valid: F,
}

impl<F: Probability> PcFail<F> {
    pub fn total(&self) -> F {
        self.all_overwritten + self.all_overwritten_conflict + self.partial_overwrite_valid
    }
}

pub fn pc_fail_bound<F: Probability>(m: &PcModel<F>) -> PcFail<F> {
    let n = m.kw.n;
    let p = m.valid_chunk();
    let all = m.kw.overwritten().powi(n as i32);
    PcFail {
        all_overwritten: all * none_of(n, p),
        all_overwritten_conflict: all * at_least_two(n, p),
        partial_overwrite_valid: partial_term(n, m.kw.overwritten(), m.kw.survives(), p),
    }
}

/// Natural log of the wrong-output bound `(1 - e^{-αN})^N · N · ((|V|+1) 2^{-b})^B`,
/// capped at probability one.
pub fn pc_wrong_bound_ln<F: Probability>(m: &PcModel<F>) -> F {
    let n = m.kw.n;
    let ln = c::<F>(f64::from(n)) * m.kw.overwritten().ln() + c::<F>(f64::from(n)).ln() + m.ln_valid_chunk();
    ln.min(F::zero())
}

pub fn pc_wrong_bound<F: Probability>(m: &PcModel<F>) -> F {
    pc_wrong_bound_ln(m).exp()
}

/// Wrong output in at least one of `B` hops when each hop is stored with
/// Key-Write at the same `N`, `b` and `α`.
pub fn kw_per_hop_wrong_bound<F: Probability>(m: &PcModel<F>) -> F {
    let per_hop = kw_wrong_output_bound(&m.kw).bound;
    any_of(m.hops, per_hop)
}
