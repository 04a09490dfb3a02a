//! AboveThreshold selection, its randomly permuted variant, and the
//! multi-round sparse-vector corrector built from sequential AboveThreshold
//! passes.

use crate::accounting::advanced_compose;
use crate::error::{Error, Result};
use crate::noise::NoiseSource;

/// Read-only view of the current query values an AboveThreshold scan
/// compares against its threshold. Values are non-negative reals, with
/// +infinity marking a coordinate that fires regardless of noise.
pub trait GapView {
    fn len(&self) -> usize;
    fn abs_gap(&self, i: usize) -> f64;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl GapView for [f64] {
    fn len(&self) -> usize {
        <[f64]>::len(self)
    }
    fn abs_gap(&self, i: usize) -> f64 {
        self[i]
    }
}

impl GapView for Vec<f64> {
    fn len(&self) -> usize {
        <[f64]>::len(self)
    }
    fn abs_gap(&self, i: usize) -> f64 {
        self[i]
    }
}

/// |target_i − current_i| residuals without materializing the gap vector.
/// current entries may be +infinity (uninitialized), in which case the gap
/// is +infinity.
pub struct AbsoluteResiduals<'a> {
    targets: &'a [f64],
    current: &'a [f64],
}

impl<'a> AbsoluteResiduals<'a> {
    pub fn new(targets: &'a [f64], current: &'a [f64]) -> Self {
        debug_assert_eq!(targets.len(), current.len());
        Self { targets, current }
    }
}

impl GapView for AbsoluteResiduals<'_> {
    fn len(&self) -> usize {
        self.targets.len()
    }
    fn abs_gap(&self, i: usize) -> f64 {
        (self.targets[i] - self.current[i]).abs()
    }
}

fn check_selector_args<G: GapView + ?Sized>(gaps: &G, threshold: f64, epsilon: f64) -> Result<()> {
    if gaps.is_empty() {
        return Err(Error::invalid("selector requires at least one query"));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!(
            "selector epsilon must be positive and finite, got {epsilon}"
        )));
    }
    if threshold.is_nan() {
        return Err(Error::invalid("selector threshold must not be NaN"));
    }
    Ok(())
}

/// AboveThreshold: draw ρ ~ Lap(2/ε) once, then scan i = 0, 1, ... drawing
/// ν_i ~ Lap(4/ε) and return the first i with gap_i + ν_i ≥ T + ρ. Returns
/// `None` when no index fires. Gap accesses and noise draws are lazy: one ρ
/// plus one ν per scanned index, and no gap beyond the returned index is
/// inspected.
pub fn above_threshold<G: GapView + ?Sized>(
    gaps: &G,
    threshold: f64,
    epsilon: f64,
    source: &mut NoiseSource,
) -> Result<Option<usize>> {
    check_selector_args(gaps, threshold, epsilon)?;
    let rho = source.laplace(2.0 / epsilon)?;
    for i in 0..gaps.len() {
        let nu = source.laplace(4.0 / epsilon)?;
        if gaps.abs_gap(i) + nu >= threshold + rho {
            return Ok(Some(i));
        }
    }
    Ok(None)
}

/// Reusable scratch for permuted AboveThreshold scans.
///
/// The permutation is sampled lazily: position j of the scan receives a
/// uniformly chosen index among those not yet scanned (Fisher-Yates, one
/// swap per scanned position), which distributes identically to drawing a
/// full uniform permutation up front but costs only as much as the scan is
/// long. The prefix swaps are undone after each call so the scratch can be
/// reused.
pub struct PermutedSelector {
    positions: Vec<usize>,
    swap_log: Vec<usize>,
}

impl PermutedSelector {
    pub fn new(k: usize) -> Self {
        Self {
            positions: (0..k).collect(),
            swap_log: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Permuted AboveThreshold at privacy parameter ε: scan the queries in
    /// uniformly random order and return the original index of the first one
    /// that fires, or `None`. In zero mode the order is the identity, so this
    /// reduces to plain AboveThreshold.
    pub fn select<G: GapView + ?Sized>(
        &mut self,
        gaps: &G,
        threshold: f64,
        epsilon: f64,
        source: &mut NoiseSource,
    ) -> Result<Option<usize>> {
        check_selector_args(gaps, threshold, epsilon)?;
        let rho = source.laplace(2.0 / epsilon)?;
        self.select_with_rho(gaps, threshold, epsilon, rho, source)
    }

    /// The scan with the round's ρ already drawn.
    pub(crate) fn select_with_rho<G: GapView + ?Sized>(
        &mut self,
        gaps: &G,
        threshold: f64,
        epsilon: f64,
        rho: f64,
        source: &mut NoiseSource,
    ) -> Result<Option<usize>> {
        let k = gaps.len();
        if k != self.positions.len() {
            return Err(Error::invalid(format!(
                "selector sized for {} queries, got {k}",
                self.positions.len()
            )));
        }
        let mut outcome = None;
        for j in 0..k {
            let r = j + source.uniform_index(k - j)?;
            self.positions.swap(j, r);
            self.swap_log.push(r);
            let nu = source.laplace(4.0 / epsilon)?;
            if gaps.abs_gap(self.positions[j]) + nu >= threshold + rho {
                outcome = Some(self.positions[j]);
                break;
            }
        }
        for (j, r) in self.swap_log.drain(..).enumerate().rev() {
            self.positions.swap(j, r);
        }
        Ok(outcome)
    }
}

/// One-shot permuted AboveThreshold.
pub fn permuted_above_threshold<G: GapView + ?Sized>(
    gaps: &G,
    threshold: f64,
    epsilon: f64,
    source: &mut NoiseSource,
) -> Result<Option<usize>> {
    PermutedSelector::new(gaps.len()).select(gaps, threshold, epsilon, source)
}

/// Permuted AboveThreshold over tracked residual state, tuned for long runs
/// of rounds where nothing fires.
///
/// Given ρ, each coordinate of a permuted scan fires independently when
/// scanned (probability = its Laplace noise crossing T + ρ − gap), and the
/// returned index is the firing coordinate that comes earliest in a uniform
/// permutation — i.e. a uniform member of the firing set. The scanner
/// samples that law directly: the firing count among sub-ceiling coordinates
/// is a thinned binomial, so a round whose firing set is almost surely empty
/// costs O(1) draws instead of a length-k scan. Rounds in zero mode, rounds
/// with unreleased (+infinity) coordinates, and rounds where firing is
/// likely fall back to the literal scan with the same ρ, which samples the
/// identical conditional law.
///
/// The tracked state is a conservative ceiling on the largest finite
/// residual (refreshed exactly at stage boundaries) plus the set of indices
/// still at the sentinel.
pub struct ResidualScanner {
    /// Indices still at the +infinity sentinel.
    inf_list: Vec<usize>,
    /// inf_pos[i] = position of i in inf_list, or usize::MAX once released.
    inf_pos: Vec<usize>,
    /// Upper bound on max |gap| over released coordinates.
    gap_ceiling: f64,
    naive: PermutedSelector,
    candidates: Vec<usize>,
}

/// Only thin when the expected firing count is comfortably small and the
/// candidate set cannot collide with itself.
const THIN_MAX_MEAN: f64 = 64.0;
const THIN_MAX_P: f64 = 1.0 / 64.0;
const THIN_MIN_K: usize = 256;

impl ResidualScanner {
    pub fn new(k: usize) -> Self {
        Self {
            inf_list: (0..k).collect(),
            inf_pos: (0..k).collect(),
            gap_ceiling: 0.0,
            naive: PermutedSelector::new(k),
            candidates: Vec::new(),
        }
    }

    pub fn unreleased(&self) -> usize {
        self.inf_list.len()
    }

    /// Record that coordinate `i` was released with |residual| = `abs_residual`.
    pub fn mark_released(&mut self, i: usize, abs_residual: f64) {
        let pos = self.inf_pos[i];
        if pos != usize::MAX {
            let last = *self.inf_list.last().expect("inf_list non-empty");
            self.inf_list.swap_remove(pos);
            if pos < self.inf_list.len() {
                self.inf_pos[last] = pos;
            }
            self.inf_pos[i] = usize::MAX;
        }
        if abs_residual > self.gap_ceiling {
            self.gap_ceiling = abs_residual;
        }
    }

    /// Tighten the ceiling to the exact current maximum finite residual.
    pub fn refresh_ceiling(&mut self, targets: &[f64], answers: &[f64]) {
        let mut max = 0.0f64;
        for (t, a) in targets.iter().zip(answers) {
            let gap = (t - a).abs();
            if gap.is_finite() && gap > max {
                max = gap;
            }
        }
        self.gap_ceiling = max;
    }

    pub fn select(
        &mut self,
        targets: &[f64],
        answers: &[f64],
        threshold: f64,
        epsilon: f64,
        source: &mut NoiseSource,
    ) -> Result<Option<usize>> {
        let view = AbsoluteResiduals::new(targets, answers);
        check_selector_args(&view, threshold, epsilon)?;
        let k = targets.len();
        let rho = source.laplace(2.0 / epsilon)?;
        let b = 4.0 / epsilon;
        let pmax = crate::noise::laplace_upper_tail(threshold + rho - self.gap_ceiling, b);
        if source.is_zero()
            || !self.inf_list.is_empty()
            || k < THIN_MIN_K
            || pmax > THIN_MAX_P
            || k as f64 * pmax > THIN_MAX_MEAN
        {
            return self.naive.select_with_rho(&view, threshold, epsilon, rho, source);
        }

        // Firing count among all-finite coordinates: Binomial(k, p_i) coins
        // thinned from Binomial(k, pmax) candidates (p_i <= pmax by the
        // ceiling). Count by CDF inversion on one uniform.
        let mut count = 0usize;
        let u = source.open_unit();
        let mut pmf = ((k as f64) * (-pmax).ln_1p()).exp();
        let mut cdf = pmf;
        while u > cdf && count < k {
            count += 1;
            pmf *= (k - count + 1) as f64 / count as f64 * (pmax / (1.0 - pmax));
            cdf += pmf;
        }
        if count == 0 {
            return Ok(None);
        }

        // Candidate positions are uniform without replacement given the count.
        self.candidates.clear();
        while self.candidates.len() < count {
            let i = source.uniform_index(k)?;
            if !self.candidates.contains(&i) {
                self.candidates.push(i);
            }
        }
        // Accept each candidate with its true crossing probability.
        let mut accepted = 0usize;
        for slot in 0..count {
            let i = self.candidates[slot];
            let gap = (targets[i] - answers[i]).abs();
            let p = crate::noise::laplace_upper_tail(threshold + rho - gap, b);
            if source.bernoulli(p / pmax) {
                self.candidates.swap(accepted, slot);
                accepted += 1;
            }
        }
        match accepted {
            0 => Ok(None),
            1 => Ok(Some(self.candidates[0])),
            m => Ok(Some(self.candidates[source.uniform_index(m)?])),
        }
    }
}

/// Parameters of one corrector invocation.
#[derive(Clone, Copy, Debug)]
pub struct SvCorrectParams {
    /// Maximum number of correction rounds.
    pub c_sv: usize,
    /// Total (ε, δ) the corrector may consume.
    pub epsilon_sv: f64,
    pub delta_sv: f64,
    /// Target ℓ∞ level: rounds select at threshold α_sv/2.
    pub alpha_sv: f64,
}

/// Result of a corrector run. Corrections are carried as re-released values
/// rather than additive offsets so that a coordinate whose previous answer
/// was the +infinity sentinel still composes to a finite release.
#[derive(Clone, Debug)]
pub struct SvCorrection {
    /// `Some(v)`: the coordinate was selected and re-released as v.
    pub released: Vec<Option<f64>>,
    pub rounds_fired: usize,
    pub rounds_run: usize,
    /// Worst-case budget of the full c_sv-round plan, by advanced
    /// composition; charged regardless of early stopping.
    pub budget_spent: (f64, f64),
    /// Set when α_sv is below the level the margin arithmetic certifies.
    pub alpha_warning: Option<String>,
}

impl SvCorrection {
    /// Released answers after applying the corrections to `answers`.
    pub fn apply(&self, answers: &[f64]) -> Vec<f64> {
        answers
            .iter()
            .zip(&self.released)
            .map(|(&a, r)| r.unwrap_or(a))
            .collect()
    }

    /// Additive view: b_i with corrected answer a_i + b_i, and b_i = 0 for
    /// untouched coordinates. Only meaningful when `answers` is finite.
    pub fn offsets(&self, answers: &[f64]) -> Vec<f64> {
        answers
            .iter()
            .zip(&self.released)
            .map(|(&a, r)| r.map_or(0.0, |v| v - a))
            .collect()
    }
}

/// Per-round privacy parameter: each half of ε_sv is spread across c_sv
/// rounds by advanced composition with δ_sv/2 reserved per half, giving
/// ε_round = (ε_sv/2)/√(8·c_sv·ln(2/δ_sv)). The selector rounds use one
/// half, the answer releases the other, at the same per-round rate.
pub fn sv_round_epsilon(c_sv: usize, epsilon_sv: f64, delta_sv: f64) -> f64 {
    (epsilon_sv / 2.0) / (8.0 * c_sv as f64 * (2.0 / delta_sv).ln()).sqrt()
}

/// Smallest α the union-bound margins certify for failure probability β:
/// every selector draw stays within α/8 and every answer draw within α/2.
pub fn sv_sufficient_alpha(
    k: usize,
    c_sv: usize,
    epsilon_sv: f64,
    delta_sv: f64,
    beta_sv: f64,
) -> Result<f64> {
    if k == 0 || c_sv == 0 {
        return Err(Error::invalid("sv_sufficient_alpha requires k, c_sv >= 1"));
    }
    if !(beta_sv > 0.0 && beta_sv < 1.0) {
        return Err(Error::invalid(format!(
            "beta must lie in (0, 1), got {beta_sv}"
        )));
    }
    let er = sv_round_epsilon(c_sv, epsilon_sv, delta_sv);
    if !(er > 0.0 && er.is_finite()) {
        return Err(Error::invalid("corrector round budget is not positive"));
    }
    let c = c_sv as f64;
    let selector = (32.0 / er) * (2.0 * c * (k as f64 + 1.0) / beta_sv).ln();
    let answers = (2.0 / er) * (2.0 * c / beta_sv).ln();
    Ok(selector.max(answers))
}

/// Sparse-vector correction: up to c_sv sequential AboveThreshold rounds over
/// the residuals target_i − current_i, each selecting at threshold α_sv/2 and
/// re-releasing the selected coordinate as target + Lap(1/ε_round). Rounds
/// stop early after a pass where nothing fires. If at most c_sv residuals
/// exceed α_sv/2 in magnitude and α_sv carries the margin arithmetic, the
/// corrected answers are within α_sv of the targets with probability at
/// least 1 − β.
pub fn sv_correct(
    targets: &[f64],
    answers: &[f64],
    params: &SvCorrectParams,
    source: &mut NoiseSource,
) -> Result<SvCorrection> {
    let k = targets.len();
    if k == 0 {
        return Err(Error::invalid("sv_correct requires at least one query"));
    }
    if answers.len() != k {
        return Err(Error::invalid(format!(
            "answers length {} does not match k={k}",
            answers.len()
        )));
    }
    if params.c_sv == 0 || params.c_sv > k {
        return Err(Error::invalid(format!(
            "c_sv must lie in [1, k={k}], got {}",
            params.c_sv
        )));
    }
    if !(params.epsilon_sv > 0.0 && params.epsilon_sv.is_finite()) {
        return Err(Error::invalid("epsilon_sv must be positive"));
    }
    if !(params.delta_sv > 0.0 && params.delta_sv < 1.0) {
        return Err(Error::invalid("delta_sv must lie in (0, 1)"));
    }
    if !(params.alpha_sv > 0.0 && params.alpha_sv.is_finite()) {
        return Err(Error::invalid("alpha_sv must be positive"));
    }

    let er = sv_round_epsilon(params.c_sv, params.epsilon_sv, params.delta_sv);
    let sufficient = sv_sufficient_alpha(
        k,
        params.c_sv,
        params.epsilon_sv,
        params.delta_sv,
        1e-3,
    )?;
    let alpha_warning = (params.alpha_sv < sufficient).then(|| {
        format!(
            "alpha_sv {:.4e} is below the certified level {:.4e} (at beta 1e-3); \
             the corrector runs but the accuracy guarantee may not hold",
            params.alpha_sv, sufficient
        )
    });

    let mut current = answers.to_vec();
    let mut released: Vec<Option<f64>> = vec![None; k];
    let mut rounds_fired = 0;
    let mut rounds_run = 0;
    for _ in 0..params.c_sv {
        rounds_run += 1;
        let fired = {
            let view = AbsoluteResiduals::new(targets, &current);
            above_threshold(&view, params.alpha_sv / 2.0, er, source)?
        };
        match fired {
            Some(i) => {
                let v = targets[i] + source.laplace(1.0 / er)?;
                current[i] = v;
                released[i] = Some(v);
                rounds_fired += 1;
            }
            None => break,
        }
    }

    let half = advanced_compose(params.c_sv, er, params.delta_sv / 2.0)?;
    Ok(SvCorrection {
        released,
        rounds_fired,
        rounds_run,
        budget_spent: (2.0 * half, params.delta_sv),
        alpha_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct CountingView {
        gaps: Vec<f64>,
        highest: Cell<Option<usize>>,
    }

    impl GapView for CountingView {
        fn len(&self) -> usize {
            self.gaps.len()
        }
        fn abs_gap(&self, i: usize) -> f64 {
            if self.highest.get().is_none_or(|h| i > h) {
                self.highest.set(Some(i));
            }
            self.gaps[i]
        }
    }

    #[test]
    fn zero_mode_scan_returns_first_crossing() {
        let mut src = NoiseSource::zero();
        let gaps = vec![0.0, 0.0, 5.0];
        assert_eq!(above_threshold(&gaps, 3.0, 1.0, &mut src).unwrap(), Some(2));
        let gaps = vec![0.0, 0.0, 0.0];
        assert_eq!(above_threshold(&gaps, 3.0, 1.0, &mut src).unwrap(), None);
    }

    #[test]
    fn selector_rejects_bad_arguments() {
        let mut src = NoiseSource::zero();
        let empty: Vec<f64> = vec![];
        assert!(above_threshold(&empty, 1.0, 1.0, &mut src).is_err());
        let gaps = vec![1.0];
        assert!(above_threshold(&gaps, 1.0, 0.0, &mut src).is_err());
        assert!(above_threshold(&gaps, f64::NAN, 1.0, &mut src).is_err());
        assert!(permuted_above_threshold(&gaps, 1.0, -1.0, &mut src).is_err());
    }

    #[test]
    fn huge_gap_is_selected_with_overwhelming_frequency() {
        let gaps = vec![1e6, 0.0, 0.0];
        let mut wins = 0;
        for t in 0..10_000u64 {
            let mut src = NoiseSource::for_trial(21, crate::noise::NoiseMode::Random, t);
            if above_threshold(&gaps, 3.0, 1.0, &mut src).unwrap() == Some(0) {
                wins += 1;
            }
        }
        assert!(wins as f64 / 10_000.0 >= 0.999, "win rate {wins}/10000");
    }

    #[test]
    fn infinity_gap_always_fires() {
        let gaps = vec![f64::INFINITY, 0.0];
        for t in 0..100u64 {
            let mut src = NoiseSource::for_trial(4, crate::noise::NoiseMode::Random, t);
            assert_eq!(above_threshold(&gaps, 1e9, 0.01, &mut src).unwrap(), Some(0));
        }
    }

    #[test]
    fn scan_is_lazy_up_to_returned_index() {
        let view = CountingView {
            gaps: vec![0.0, 10.0, 0.0, 0.0, 0.0],
            highest: Cell::new(None),
        };
        let mut src = NoiseSource::zero();
        let got = above_threshold(&view, 3.0, 1.0, &mut src).unwrap();
        assert_eq!(got, Some(1));
        assert_eq!(view.highest.get(), Some(1));
    }

    #[test]
    fn permuted_zero_mode_is_identity_order() {
        let mut src = NoiseSource::zero();
        let gaps = vec![5.0, 5.0];
        assert_eq!(
            permuted_above_threshold(&gaps, 3.0, 1.0, &mut src).unwrap(),
            Some(0)
        );
    }

    #[test]
    fn permuted_equal_gaps_select_uniformly() {
        // Two identical above-threshold gaps at negligible noise: each side
        // wins half the time.
        let gaps = vec![5.0, 5.0];
        let mut first = 0u64;
        let n = 10_000u64;
        for t in 0..n {
            let mut src = NoiseSource::for_trial(33, crate::noise::NoiseMode::Random, t);
            match permuted_above_threshold(&gaps, 3.0, 1e3, &mut src).unwrap() {
                Some(0) => first += 1,
                Some(1) => {}
                other => panic!("unexpected outcome {other:?}"),
            }
        }
        let freq = first as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn permuted_uniformity_chi_square() {
        // All-equal above-threshold gaps at negligible noise: the selected
        // index is uniform over {0..5}. chi2(5) quantile at 0.999 = 20.515.
        let k = 6;
        let gaps = vec![10.0; k];
        let mut counts = vec![0u64; k];
        let n = 60_000u64;
        for t in 0..n {
            let mut src = NoiseSource::for_trial(34, crate::noise::NoiseMode::Random, t);
            let got = permuted_above_threshold(&gaps, 3.0, 1e3, &mut src)
                .unwrap()
                .unwrap();
            counts[got] += 1;
        }
        let expected = n as f64 / k as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 <= 20.5150, "chi-square {chi2}, counts {counts:?}");
    }

    #[test]
    fn selector_scratch_is_restored_between_calls() {
        let mut sel = PermutedSelector::new(8);
        let gaps = vec![0.0; 8];
        let mut src = NoiseSource::random(5);
        for _ in 0..50 {
            let _ = sel.select(&gaps, 100.0, 1.0, &mut src).unwrap();
            assert_eq!(sel.positions, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn one_shot_and_fresh_selector_agree() {
        let gaps = vec![0.0, 7.0, 2.0, 9.0];
        for t in 0..200u64 {
            let mut a = NoiseSource::for_trial(6, crate::noise::NoiseMode::Random, t);
            let mut b = NoiseSource::for_trial(6, crate::noise::NoiseMode::Random, t);
            let ra = permuted_above_threshold(&gaps, 4.0, 2.0, &mut a).unwrap();
            let rb = PermutedSelector::new(4).select(&gaps, 4.0, 2.0, &mut b).unwrap();
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn residual_scanner_matches_naive_selection_law() {
        // The scanner's thinned sampling and the literal permuted scan are
        // two routes to the same selection distribution. Compare per-index
        // firing counts on a fixed residual pattern.
        let k = 512;
        let threshold = 100.0;
        let epsilon = 0.4;
        let mut targets = vec![0.0f64; k];
        for (i, g) in [60.0, 55.0, 50.0, 40.0, 30.0, 20.0, 20.0, 20.0]
            .into_iter()
            .enumerate()
        {
            targets[i] = g;
        }
        let answers = vec![0.0f64; k];

        let trials = 100_000u64;
        let mut fast_counts = vec![0u64; k + 1];
        let mut scanner = ResidualScanner::new(k);
        for i in 0..k {
            scanner.mark_released(i, 0.0);
        }
        scanner.refresh_ceiling(&targets, &answers);
        for t in 0..trials {
            let mut src = NoiseSource::for_trial(51, crate::noise::NoiseMode::Random, t);
            match scanner.select(&targets, &answers, threshold, epsilon, &mut src).unwrap() {
                Some(i) => fast_counts[i] += 1,
                None => fast_counts[k] += 1,
            }
        }

        let mut naive_counts = vec![0u64; k + 1];
        let view = AbsoluteResiduals::new(&targets, &answers);
        for t in 0..trials {
            let mut src = NoiseSource::for_trial(52, crate::noise::NoiseMode::Random, t);
            match permuted_above_threshold(&view, threshold, epsilon, &mut src).unwrap() {
                Some(i) => naive_counts[i] += 1,
                None => naive_counts[k] += 1,
            }
        }

        // Planted coordinates, the lumped zero-gap rest, and the none arm
        // must agree within Poisson noise (5 sigma).
        let lump =
            |c: &[u64]| -> u64 { c[8..k].iter().sum() };
        let mut pairs: Vec<(u64, u64)> = (0..8)
            .map(|i| (fast_counts[i], naive_counts[i]))
            .collect();
        pairs.push((lump(&fast_counts), lump(&naive_counts)));
        pairs.push((fast_counts[k], naive_counts[k]));
        for (i, (a, b)) in pairs.iter().enumerate() {
            let slack = 5.0 * ((a + b + 10) as f64).sqrt();
            assert!(
                (*a as f64 - *b as f64).abs() <= slack,
                "bucket {i}: fast {a} vs naive {b} (slack {slack:.1})"
            );
        }
    }

    #[test]
    fn residual_scanner_tracks_sentinels() {
        let targets = vec![5.0; 300];
        let mut answers = vec![f64::INFINITY; 300];
        let mut scanner = ResidualScanner::new(300);
        assert_eq!(scanner.unreleased(), 300);
        // With sentinels present the scan must fire at one of them.
        let mut src = NoiseSource::random(1);
        let got = scanner
            .select(&targets, &answers, 1e9, 0.5, &mut src)
            .unwrap()
            .expect("a sentinel coordinate must fire");
        answers[got] = targets[got];
        scanner.mark_released(got, 0.0);
        assert_eq!(scanner.unreleased(), 299);
        // Releasing the rest empties the list.
        for i in 0..300 {
            scanner.mark_released(i, 0.1);
        }
        assert_eq!(scanner.unreleased(), 0);
    }

    #[test]
    fn corrector_zero_gaps_do_nothing() {
        let targets = vec![0.0; 16];
        let answers = vec![0.0; 16];
        let params = SvCorrectParams {
            c_sv: 5,
            epsilon_sv: 0.5,
            delta_sv: 1e-6,
            alpha_sv: 8.0,
        };
        let mut src = NoiseSource::zero();
        let got = sv_correct(&targets, &answers, &params, &mut src).unwrap();
        assert_eq!(got.rounds_fired, 0);
        assert_eq!(got.rounds_run, 1);
        assert!(got.released.iter().all(|r| r.is_none()));
        assert!(got.offsets(&answers).iter().all(|&b| b == 0.0));
    }

    #[test]
    fn corrector_zero_mode_repairs_single_violation_exactly() {
        let alpha = 4.0;
        let mut targets = vec![0.0; 10];
        targets[3] = 10.0 * alpha;
        let answers = vec![0.0; 10];
        let params = SvCorrectParams {
            c_sv: 3,
            epsilon_sv: 0.5,
            delta_sv: 1e-6,
            alpha_sv: alpha,
        };
        let mut src = NoiseSource::zero();
        let got = sv_correct(&targets, &answers, &params, &mut src).unwrap();
        assert_eq!(got.rounds_fired, 1);
        let fixed = got.apply(&answers);
        assert_eq!(fixed[3], targets[3]);
        for i in (0..10).filter(|&i| i != 3) {
            assert_eq!(fixed[i], 0.0);
        }
        let b = got.offsets(&answers);
        assert_eq!(b[3], targets[3]);
    }

    #[test]
    fn corrector_handles_sentinel_answers() {
        let targets = vec![5.0, -2.0];
        let answers = vec![f64::INFINITY, -2.0];
        let params = SvCorrectParams {
            c_sv: 2,
            epsilon_sv: 0.5,
            delta_sv: 1e-6,
            alpha_sv: 1.0,
        };
        let mut src = NoiseSource::zero();
        let got = sv_correct(&targets, &answers, &params, &mut src).unwrap();
        let fixed = got.apply(&answers);
        assert_eq!(fixed, vec![5.0, -2.0]);
        assert!(fixed.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn corrector_zero_mode_progress_is_monotone() {
        // Each firing round in zero mode repairs exactly one violation.
        let alpha = 2.0;
        let mut targets = vec![0.0; 20];
        for i in 0..6 {
            targets[3 * i] = 5.0 * alpha * (if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        let answers = vec![0.0; 20];
        let count_violations = |vals: &[f64]| {
            vals.iter()
                .zip(&targets)
                .filter(|(v, t)| (*t - *v).abs() > alpha / 2.0)
                .count()
        };
        assert_eq!(count_violations(&answers), 6);
        let params = SvCorrectParams {
            c_sv: 10,
            epsilon_sv: 0.5,
            delta_sv: 1e-6,
            alpha_sv: alpha,
        };
        let mut src = NoiseSource::zero();
        let got = sv_correct(&targets, &answers, &params, &mut src).unwrap();
        assert_eq!(got.rounds_fired, 6);
        assert_eq!(count_violations(&got.apply(&answers)), 0);
    }

    #[test]
    fn corrector_budget_is_within_the_requested_pair() {
        let params = SvCorrectParams {
            c_sv: 50,
            epsilon_sv: 0.5,
            delta_sv: 2f64.powi(-20),
            alpha_sv: 1e6,
        };
        let targets = vec![0.0; 100];
        let answers = vec![0.0; 100];
        let mut src = NoiseSource::random(8);
        let got = sv_correct(&targets, &answers, &params, &mut src).unwrap();
        let (es, ds) = got.budget_spent;
        assert!(es <= params.epsilon_sv, "eps spent {es}");
        assert!(ds <= params.delta_sv * (1.0 + 1e-15));
        // Recompute through the accounting module.
        let er = sv_round_epsilon(params.c_sv, params.epsilon_sv, params.delta_sv);
        let half = advanced_compose(params.c_sv, er, params.delta_sv / 2.0).unwrap();
        assert_eq!(es, 2.0 * half);
    }

    #[test]
    fn corrector_warns_on_small_alpha() {
        let params = SvCorrectParams {
            c_sv: 5,
            epsilon_sv: 0.5,
            delta_sv: 1e-6,
            alpha_sv: 1.0,
        };
        let mut src = NoiseSource::zero();
        let got = sv_correct(&[0.0; 10], &[0.0; 10], &params, &mut src).unwrap();
        assert!(got.alpha_warning.is_some());
    }

    #[test]
    fn corrector_rejects_c_sv_above_k() {
        let params = SvCorrectParams {
            c_sv: 11,
            epsilon_sv: 0.5,
            delta_sv: 1e-6,
            alpha_sv: 1.0,
        };
        let mut src = NoiseSource::zero();
        assert!(sv_correct(&[0.0; 10], &[0.0; 10], &params, &mut src).is_err());
    }
}
