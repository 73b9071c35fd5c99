//! Query outcome counters shared by the Monte-Carlo harnesses.

use num_traits::Float;

/// Classification of one probabilistic query against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Empty,
    Ambiguous,
    Wrong,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OutcomeTally {
    pub trials: u64,
    pub success: u64,
    pub empty: u64,
    pub ambiguous: u64,
    pub wrong: u64,
}

impl OutcomeTally {
    pub fn record(&mut self, outcome: Outcome) {
        self.trials += 1;
        match outcome {
            Outcome::Success => self.success += 1,
            Outcome::Empty => self.empty += 1,
            Outcome::Ambiguous => self.ambiguous += 1,
            Outcome::Wrong => self.wrong += 1,
        }
    }

    pub fn merge(&mut self, other: &OutcomeTally) {
        self.trials += other.trials;
        self.success += other.success;
        self.empty += other.empty;
        self.ambiguous += other.ambiguous;
        self.wrong += other.wrong;
    }

    fn rate<F: Float>(&self, count: u64) -> F {
        if self.trials == 0 {
            return F::zero();
        }
        F::from(count).unwrap() / F::from(self.trials).unwrap()
    }

    pub fn success_rate<F: Float>(&self) -> F {
        self.rate(self.success)
    }

    pub fn empty_rate<F: Float>(&self) -> F {
        self.rate(self.empty)
    }

    pub fn ambiguous_rate<F: Float>(&self) -> F {
        self.rate(self.ambiguous)
    }

    pub fn wrong_rate<F: Float>(&self) -> F {
        self.rate(self.wrong)
    }

    /// Empty returns in the analytical sense: nothing output, ties included.
    pub fn no_output_rate<F: Float>(&self) -> F {
        self.rate(self.empty + self.ambiguous)
    }
}

/// Standard deviation of a binomial proportion `p` estimated from `n` trials.
pub fn binomial_sigma<F: Float>(p: F, n: u64) -> F {
    if n == 0 {
        return F::zero();
    }
    let p = p.max(F::zero()).min(F::one());
    (p * (F::one() - p) / F::from(n).unwrap()).sqrt()
}
