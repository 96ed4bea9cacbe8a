//! Split-merge regulation: when the largest company's weight reaches
//! `1 - delta'`, it is split in two equal halves and the two smallest
//! companies merge, keeping the company count and total capital fixed.

use crate::error::{config, domain, Error, Result};
use crate::model::{
    entropy, market_weights, rank_permutation, CapitalizationVector, WeightVector,
};

/// Extra prerule applications allowed for states that overshot the boundary.
pub const OVERSHOOT_EXTRA_APPLICATIONS: usize = 8;

/// Regulatory set `{mu : mu_(1) < 1 - delta'}` for `n >= 3` companies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegulatorySet {
    n: usize,
    delta_prime: f64,
}

fn check_bounds(n: usize, delta_prime: f64) -> Result<()> {
    if n < 3 {
        return Err(config(format!("split-merge regulation needs n >= 3, got {n}")));
    }
    let upper = (n as f64 - 1.0) / (n as f64 + 1.0);
    if !(delta_prime > 0.0 && delta_prime < upper) {
        return Err(config(format!(
            "delta' must lie in (0, {upper}) for n = {n}, got {delta_prime}"
        )));
    }
    Ok(())
}

impl RegulatorySet {
    pub fn new(n: usize, delta_prime: f64) -> Result<Self> {
        check_bounds(n, delta_prime)?;
        Ok(Self { n, delta_prime })
    }

    pub fn company_count(&self) -> usize {
        self.n
    }

    pub fn delta_prime(&self) -> f64 {
        self.delta_prime
    }

    /// Largest weight at which regulation triggers, `1 - delta'`.
    pub fn threshold(&self) -> f64 {
        1.0 - self.delta_prime
    }

    pub fn contains(&self, mu: &WeightVector) -> bool {
        mu.largest() < self.threshold()
    }

    pub fn contains_caps(&self, x: &CapitalizationVector) -> bool {
        self.contains(&market_weights(x))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < 3 {
            return Err(config(format!("split-merge needs n >= 3, got {len}")));
        }
        if len != self.n {
            return Err(domain(format!(
                "weight vector has {len} entries, regulatory set expects {}",
                self.n
            )));
        }
        Ok(())
    }
}

/// One split-merge step. Identity on the regulatory set.
pub fn prerule_apply(mu: &WeightVector, set: &RegulatorySet) -> Result<WeightVector> {
    set.check_len(mu.len())?;
    if set.contains(mu) {
        return Ok(mu.clone());
    }
    let n = mu.len();
    let w = mu.as_slice();
    let p = rank_permutation(w)?;
    let (largest, second_smallest, smallest) = (p.at(0), p.at(n - 2), p.at(n - 1));
    let mut out = w.to_vec();
    out[largest] = w[largest] / 2.0;
    out[second_smallest] = w[largest] / 2.0;
    out[smallest] = w[smallest] + w[second_smallest];
    WeightVector::normalized(out)
}

/// Result of the full rule, with bookkeeping for the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleOutcome {
    pub weights: WeightVector,
    pub applications: usize,
    /// The input lay strictly beyond the boundary rather than on it.
    pub overshoot: bool,
}

/// Applies the prerule until the state is strictly interior.
pub fn rule_apply_detailed(mu: &WeightVector, set: &RegulatorySet) -> Result<RuleOutcome> {
    set.check_len(mu.len())?;
    let overshoot = mu.largest() > set.threshold();
    let cap = if overshoot {
        set.n + OVERSHOOT_EXTRA_APPLICATIONS
    } else {
        set.n
    };
    let mut current = mu.clone();
    let mut applications = 0;
    while !set.contains(&current) {
        if applications == cap {
            return Err(Error::Invariant(format!(
                "split-merge did not reach the interior after {cap} applications (largest weight {})",
                current.largest()
            )));
        }
        current = prerule_apply(&current, set)?;
        applications += 1;
    }
    Ok(RuleOutcome {
        weights: current,
        applications,
        overshoot,
    })
}

pub fn rule_apply(mu: &WeightVector, set: &RegulatorySet) -> Result<WeightVector> {
    rule_apply_detailed(mu, set).map(|o| o.weights)
}

/// Capital-conserving regulation of capitalizations: total times regulated weights.
pub fn regulate_caps(x: &CapitalizationVector, set: &RegulatorySet) -> Result<CapitalizationVector> {
    let mu = market_weights(x);
    if set.contains(&mu) {
        return Ok(x.clone());
    }
    let total = x.total();
    let weights = rule_apply(&mu, set)?;
    CapitalizationVector::new(weights.as_slice().iter().map(|w| total * w).collect())
}

/// Guaranteed entropy gain of one regulation from an exact boundary point,
/// `(1 - delta'(n+1)/(n-1)) ln 2`.
pub fn entropy_jump_lower_bound(n: usize, delta_prime: f64) -> Result<f64> {
    check_bounds(n, delta_prime)?;
    let n = n as f64;
    Ok((1.0 - delta_prime * (n + 1.0) / (n - 1.0)) * std::f64::consts::LN_2)
}

/// On the boundary the two smallest weights sum to at most `2 delta'/(n-1)`.
pub fn smallest_two_sum_bound(n: usize, delta_prime: f64) -> Result<f64> {
    check_bounds(n, delta_prime)?;
    Ok(2.0 * delta_prime / (n as f64 - 1.0))
}

/// One entry of a path's regulation log.
#[derive(Debug, Clone, PartialEq)]
pub struct RegulationEvent {
    /// One-based event count along the path.
    pub ordinal: usize,
    /// Grid index where the post-regulation state is stored.
    pub step: usize,
    pub time: f64,
    pub pre_caps: CapitalizationVector,
    pub post_caps: CapitalizationVector,
    pub pre_weights: WeightVector,
    pub post_weights: WeightVector,
    pub entropy_jump: f64,
    pub overshoot: bool,
    pub prerule_applications: usize,
}

impl RegulationEvent {
    /// Regulates `pre` and records the event.
    pub fn regulate(
        pre: CapitalizationVector,
        set: &RegulatorySet,
        ordinal: usize,
        step: usize,
        time: f64,
    ) -> Result<Self> {
        let pre_weights = market_weights(&pre);
        let outcome = rule_apply_detailed(&pre_weights, set)?;
        let total = pre.total();
        let post_caps = CapitalizationVector::new(
            outcome.weights.as_slice().iter().map(|w| total * w).collect(),
        )?;
        let post_weights = market_weights(&post_caps);
        Ok(Self {
            ordinal,
            step,
            time,
            entropy_jump: entropy(&post_weights) - entropy(&pre_weights),
            pre_caps: pre,
            post_caps,
            pre_weights,
            post_weights,
            overshoot: outcome.overshoot,
            prerule_applications: outcome.applications,
        })
    }

    /// `post - pre`, the capitalization jump excluded from the net process.
    pub fn jump(&self) -> Vec<f64> {
        self.post_caps
            .as_slice()
            .iter()
            .zip(self.pre_caps.as_slice())
            .map(|(post, pre)| post - pre)
            .collect()
    }

    /// How far the pre-regulation largest weight went past `threshold`.
    pub fn overshoot_amount(&self, threshold: f64) -> f64 {
        self.pre_weights.largest() - threshold
    }
}

/// Random exact-boundary weight vectors, used by the rule validation suites.
pub mod sampling {
    use rand::Rng;
    use rand_distr::Exp1;

    use crate::model::WeightVector;

    /// Draws `mu` with `mu_(1) = 1 - delta'` exactly. With some probability
    /// several companies share the top weight.
    pub fn boundary_weights<R: Rng + ?Sized>(rng: &mut R, n: usize, delta_prime: f64) -> WeightVector {
        let top = 1.0 - delta_prime;
        loop {
            let max_ties = ((1.0 / top).ceil() as usize).saturating_sub(1).clamp(1, n - 1);
            let ties = if max_ties > 1 && rng.random_bool(0.2) {
                rng.random_range(2..=max_ties)
            } else {
                1
            };
            let rest = 1.0 - ties as f64 * top;
            if rest <= 0.0 {
                continue;
            }
            let draws: Vec<f64> = (0..n - ties).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
            let total: f64 = draws.iter().sum();
            let others: Vec<f64> = draws.iter().map(|d| rest * d / total).collect();
            if others.iter().any(|&o| o > top || o <= 0.0) {
                continue;
            }
            let mut slots: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                slots.swap(i, rng.random_range(0..=i));
            }
            let mut w = vec![0.0; n];
            for (k, &slot) in slots.iter().enumerate() {
                w[slot] = if k < ties { top } else { others[k - ties] };
            }
            if let Ok(mu) = WeightVector::new(w) {
                if mu.largest() == top {
                    return mu;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn regulatory_set_bounds() {
        assert!(RegulatorySet::new(3, 0.3).is_ok());
        assert!(matches!(RegulatorySet::new(3, 0.5), Err(Error::Config(_))));
        assert!(RegulatorySet::new(3, 0.0).is_err());
        assert!(RegulatorySet::new(2, 0.1).is_err());
        assert!(RegulatorySet::new(5, 0.6).is_ok());
    }

    #[test]
    fn prerule_examples() {
        let set = RegulatorySet::new(3, 0.3).unwrap();
        let out = prerule_apply(&weights(&[0.7, 0.2, 0.1]), &set).unwrap();
        assert_close(out.as_slice(), &[0.35, 0.35, 0.30], 1e-15);

        let set4 = RegulatorySet::new(4, 0.4).unwrap();
        let out = prerule_apply(&weights(&[0.6, 0.2, 0.15, 0.05]), &set4).unwrap();
        assert_close(out.as_slice(), &[0.3, 0.2, 0.3, 0.2], 1e-15);

        let interior = weights(&[0.4, 0.35, 0.25]);
        assert_eq!(prerule_apply(&interior, &set).unwrap(), interior);
    }

    #[test]
    fn prerule_rejects_mismatched_length() {
        let set = RegulatorySet::new(3, 0.3).unwrap();
        assert!(matches!(
            prerule_apply(&weights(&[0.8, 0.2]), &set),
            Err(Error::Config(_))
        ));
        assert!(prerule_apply(&weights(&[0.7, 0.1, 0.1, 0.1]), &set).is_err());
    }

    #[test]
    fn rule_examples() {
        let set = RegulatorySet::new(3, 0.3).unwrap();
        let out = rule_apply_detailed(&weights(&[0.7, 0.2, 0.1]), &set).unwrap();
        assert_close(out.weights.as_slice(), &[0.35, 0.35, 0.30], 1e-15);
        assert_eq!(out.applications, 1);
        assert!(!out.overshoot);

        let interior = weights(&[0.35, 0.35, 0.30]);
        let out = rule_apply_detailed(&interior, &set).unwrap();
        assert_eq!(out.weights, interior);
        assert_eq!(out.applications, 0);
    }

    #[test]
    fn rule_handles_tied_leaders() {
        // dyadic weights keep every sum exact; two leaders sit on 0.375
        let set = RegulatorySet::new(7, 0.625).unwrap();
        let mu = weights(&[0.375, 0.375, 0.125, 0.0625, 0.03125, 0.015625, 0.015625]);
        let once = prerule_apply(&mu, &set).unwrap();
        assert_eq!(once.largest(), 0.375);
        let out = rule_apply_detailed(&mu, &set).unwrap();
        assert_eq!(out.applications, 2);
        assert!(out.weights.largest() < 0.375);
    }

    #[test]
    fn rule_handles_overshoot() {
        let set = RegulatorySet::new(3, 0.3).unwrap();
        let out = rule_apply_detailed(&weights(&[0.75, 0.15, 0.1]), &set).unwrap();
        assert!(out.overshoot);
        assert!(set.contains(&out.weights));
    }

    #[test]
    fn regulate_caps_examples() {
        let set = RegulatorySet::new(3, 0.3).unwrap();
        let x = CapitalizationVector::new(vec![7.0, 2.0, 1.0]).unwrap();
        assert_close(regulate_caps(&x, &set).unwrap().as_slice(), &[3.5, 3.5, 3.0], 1e-14);
        let big = x.scaled(10.0).unwrap();
        let out = regulate_caps(&big, &set).unwrap();
        assert_close(out.as_slice(), &[35.0, 35.0, 30.0], 1e-13);
        assert_close(
            market_weights(&out).as_slice(),
            market_weights(&regulate_caps(&x, &set).unwrap()).as_slice(),
            1e-15,
        );
        let interior = CapitalizationVector::new(vec![4.0, 3.5, 2.5]).unwrap();
        assert_eq!(regulate_caps(&interior, &set).unwrap(), interior);
    }

    #[test]
    fn bound_examples() {
        assert!((entropy_jump_lower_bound(3, 0.3).unwrap() - 0.2772588722239781).abs() < 1e-15);
        assert!((entropy_jump_lower_bound(5, 0.3).unwrap() - 0.3812309493079699).abs() < 1e-15);
        assert!(entropy_jump_lower_bound(3, 0.5 - 1e-12).unwrap() < 1e-11);
        assert!(entropy_jump_lower_bound(3, 0.5 - 1e-12).unwrap() > 0.0);
        assert!(entropy_jump_lower_bound(3, 0.5).is_err());

        assert!((smallest_two_sum_bound(3, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!((smallest_two_sum_bound(5, 0.2).unwrap() - 0.1).abs() < 1e-15);
        assert!(smallest_two_sum_bound(2, 0.2).is_err());
    }

    #[test]
    fn event_records_jump_and_entropy() {
        let set = RegulatorySet::new(3, 0.3).unwrap();
        let pre = CapitalizationVector::new(vec![7.0, 2.0, 1.0]).unwrap();
        let ev = RegulationEvent::regulate(pre, &set, 1, 10, 0.5).unwrap();
        assert_close(&ev.jump(), &[-3.5, 1.5, 2.0], 1e-14);
        assert!((ev.entropy_jump - (1.0960673284468552 - 0.8018185525433372)).abs() < 1e-12);
        assert!(!ev.overshoot);
        assert_eq!(ev.overshoot_amount(set.threshold()), 0.0);
    }
}
