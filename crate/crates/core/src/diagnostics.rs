//! Ensemble uncertainty analysis: expected-minimum oracle, dispersion
//! statistics and distance-binned profiles.

use std::io::Write;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::critic::{critic_input, CriticEnsemble, TargetMode};
use crate::data::{sample_indices, Dataset, StateNormalizer};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_BUDGET: usize = 50_000;

/// Standard normal quantile (Wichura's AS241, PPND16; about 1e-16 relative).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let poly = |c: &[f64], x: f64| c.iter().rev().fold(0.0, |acc, &k| acc * x + k);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        const A: [f64; 8] = [
            3.387_132_872_796_366_6,
            133.141_667_891_784_38,
            1_971.590_950_306_551_3,
            13_731.693_765_509_46,
            45_921.953_931_549_87,
            67_265.770_927_008_7,
            33_430.575_583_588_13,
            2_509.080_928_730_122_7,
        ];
        const B: [f64; 8] = [
            1.0,
            42.313_330_701_600_91,
            687.187_007_492_057_9,
            5_394.196_021_424_751,
            21_213.794_301_586_597,
            39_307.895_800_092_71,
            28_729.085_735_721_943,
            5_226.495_278_852_854,
        ];
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        const C: [f64; 8] = [
            1.423_437_110_749_683_6,
            4.630_337_846_156_546,
            5.769_497_221_460_691,
            3.647_848_324_763_204_5,
            1.270_458_252_452_368_4,
            0.241_780_725_177_450_6,
            0.022_723_844_989_269_184,
            7.745_450_142_783_414e-4,
        ];
        const D: [f64; 8] = [
            1.0,
            2.053_191_626_637_759,
            1.676_384_830_183_803_8,
            0.689_767_334_985_1,
            0.148_103_976_427_480_08,
            0.015_198_666_563_616_457,
            5.475_938_084_995_345e-4,
            1.050_750_071_644_416_8e-9,
        ];
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        const E: [f64; 8] = [
            6.657_904_643_501_104,
            5.463_784_911_164_114,
            1.784_826_539_917_291_3,
            0.296_560_571_828_504_9,
            0.026_532_189_526_576_124,
            0.001_242_660_947_388_078_4,
            2.711_555_568_743_487_6e-5,
            2.010_334_399_292_288_1e-7,
        ];
        const F: [f64; 8] = [
            1.0,
            0.599_832_206_555_887_9,
            0.136_929_880_922_735_8,
            0.014_875_361_290_850_615,
            7.868_691_311_456_133e-4,
            1.846_318_317_510_054_8e-5,
            1.421_511_758_316_446e-7,
            2.044_263_103_389_939_8e-15,
        ];
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Approximate expected minimum of `n` iid `N(mu, sigma^2)` draws (Blom's plotting position).
pub fn expected_min_gaussian(mu: f64, sigma: f64, n: usize) -> Result<f64> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::config(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    if n == 0 {
        return Err(Error::config("n must be at least 1"));
    }
    let pi = std::f64::consts::PI;
    let n = n as f64;
    let p = (n - pi / 8.0) / (n - pi / 4.0 + 1.0);
    Ok(mu - normal_quantile(p) * sigma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleStats {
    pub q_mean: f64,
    pub q_std: f64,
    pub q_min: f64,
    pub q_clip: f64,
}

/// Mean, population std, min and clip penalty of one set of member values.
pub fn stats_of(values: &[f64]) -> EnsembleStats {
    let n = values.len() as f64;
    let q_mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - q_mean) * (v - q_mean)).sum::<f64>() / n;
    let q_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    EnsembleStats {
        q_mean,
        q_std: var.sqrt(),
        q_min,
        q_clip: (q_mean - q_min).max(0.0),
    }
}

/// Statistics for one raw state and action.
pub fn ensemble_stats(
    critics: &CriticEnsemble,
    normalizer: &StateNormalizer,
    state: &[f64],
    action: &[f64],
) -> Result<EnsembleStats> {
    let s = normalizer.normalize(state);
    let mut input = s;
    input.extend_from_slice(action);
    let values = critics
        .members
        .iter()
        .map(|m| m.forward(&input).map(|o| o[0]))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats_of(&values))
}

/// Who produced a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileProvenance {
    pub beta: f64,
    pub ensemble_size: usize,
    pub target_mode: TargetMode,
    pub budget: usize,
    pub bins: usize,
}

impl ProfileProvenance {
    pub fn of_agent<A: Agent + ?Sized>(agent: &A, budget: usize, bins: usize) -> Self {
        Self {
            beta: agent.beta(),
            ensemble_size: agent.critics().len(),
            target_mode: agent.target_mode(),
            budget,
            bins,
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format(e.to_string()))
    }
}

/// Ensemble statistics averaged over equal-width action-distance bins.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyProfile {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub q_std: Vec<f64>,
    pub q_clip: Vec<f64>,
    pub q_min: Vec<f64>,
    pub q_mean: Vec<f64>,
    pub provenance: ProfileProvenance,
    /// Set when the source run diverged; every cell is then NaN.
    pub invalid: bool,
}

pub const PROFILE_COLUMNS: [&str; 7] = ["bin_lo", "bin_hi", "count", "q_std", "q_clip", "q_min", "q_mean"];

impl UncertaintyProfile {
    /// The all-NaN profile reported for a diverged run.
    pub fn invalid(provenance: ProfileProvenance) -> Self {
        let bins = provenance.bins;
        Self {
            edges: vec![f64::NAN; bins + 1],
            counts: vec![0; bins],
            q_std: vec![f64::NAN; bins],
            q_clip: vec![f64::NAN; bins],
            q_min: vec![f64::NAN; bins],
            q_mean: vec![f64::NAN; bins],
            provenance,
            invalid: true,
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", PROFILE_COLUMNS.join(","))?;
        for b in 0..self.bins() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.counts[b],
                self.q_std[b],
                self.q_clip[b],
                self.q_min[b],
                self.q_mean[b]
            )?;
        }
        out.flush()?;
        Ok(())
    }

    /// Mean `q_std` over the bins whose lower edge lies in the top quarter of the distance range.
    pub fn top_quartile_q_std(&self) -> f64 {
        let lo = self.edges[0];
        let hi = self.edges[self.bins()];
        let cut = lo + 0.75 * (hi - lo);
        let (mut sum, mut n) = (0.0, 0usize);
        for b in 0..self.bins() {
            if self.edges[b] >= cut - 1e-12 * (hi - lo).abs() && self.counts[b] > 0 {
                sum += self.q_std[b] * self.counts[b] as f64;
                n += self.counts[b];
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    /// Spearman correlation between bin index and mean `q_std` over non-empty bins.
    pub fn distance_trend(&self) -> f64 {
        let (x, y): (Vec<f64>, Vec<f64>) = (0..self.bins())
            .filter(|&b| self.counts[b] > 0)
            .map(|b| (b as f64, self.q_std[b]))
            .unzip();
        spearman(&x, &y)
    }
}

/// Groups per-sample statistics into `bins` equal-width distance bins.
pub fn bin_profile(
    distances: &[f64],
    stats: &[EnsembleStats],
    bins: usize,
    provenance: ProfileProvenance,
) -> Result<UncertaintyProfile> {
    if bins == 0 {
        return Err(Error::config("bin count must be positive"));
    }
    if distances.len() != stats.len() || distances.is_empty() {
        return Err(Error::config("distances and statistics must be non-empty and aligned"));
    }
    let lo = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|b| if b == bins { hi } else { lo + width * b as f64 })
        .collect();
    let mut counts = vec![0usize; bins];
    let mut sums = vec![[0.0f64; 4]; bins];
    for (d, s) in distances.iter().zip(stats) {
        let b = if width > 0.0 {
            (((d - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
        for (acc, v) in sums[b].iter_mut().zip([s.q_std, s.q_clip, s.q_min, s.q_mean]) {
            *acc += v;
        }
    }
    let avg = |k: usize| -> Vec<f64> {
        (0..bins)
            .map(|b| {
                if counts[b] == 0 {
                    f64::NAN
                } else {
                    sums[b][k] / counts[b] as f64
                }
            })
            .collect()
    };
    Ok(UncertaintyProfile {
        edges,
        q_std: avg(0),
        q_clip: avg(1),
        q_min: avg(2),
        q_mean: avg(3),
        counts,
        provenance,
        invalid: false,
    })
}

/// Dataset states paired with uniform random actions, plus the distance of
/// each random action to the data action.
pub struct RandomActionProbe {
    /// Normalized states.
    pub states: Array2<f64>,
    pub random_actions: Array2<f64>,
    pub distances: Vec<f64>,
}

pub fn random_action_probe<R: Rng + ?Sized>(
    dataset: &Dataset,
    normalizer: &StateNormalizer,
    budget: usize,
    rng: &mut R,
) -> Result<RandomActionProbe> {
    if dataset.is_empty() {
        return Err(Error::State("diagnostics need a non-empty dataset".into()));
    }
    let env = dataset.env();
    let picks = sample_indices(dataset.len(), budget, rng);
    let mut states = Array2::zeros((budget, env.state_dim));
    let mut random_actions = Array2::zeros((budget, env.action_dim));
    let mut distances = Vec::with_capacity(budget);
    for (k, &i) in picks.iter().enumerate() {
        let t = &dataset.transitions[i];
        for (j, v) in normalizer.normalize(&t.state).into_iter().enumerate() {
            states[[k, j]] = v;
        }
        let mut d2 = 0.0;
        for j in 0..env.action_dim {
            let a = rng.random_range(-1.0..=1.0);
            random_actions[[k, j]] = a;
            d2 += (a - t.action[j]) * (a - t.action[j]);
        }
        distances.push(d2.sqrt());
    }
    Ok(RandomActionProbe {
        states,
        random_actions,
        distances,
    })
}

/// Member values at the probe's random actions, shape `(budget, members)`.
pub fn member_values(critics: &CriticEnsemble, probe: &RandomActionProbe) -> Result<Array2<f64>> {
    let q = critics.q_values(critic_input(probe.states.view(), probe.random_actions.view()).view())?;
    Ok(q.reversed_axes())
}

/// Uncertainty of the ensemble as a function of distance from the data action.
pub fn distance_profile<R: Rng + ?Sized>(
    dataset: &Dataset,
    critics: &CriticEnsemble,
    normalizer: &StateNormalizer,
    budget: usize,
    bins: usize,
    provenance: ProfileProvenance,
    rng: &mut R,
) -> Result<UncertaintyProfile> {
    if budget < bins || bins == 0 {
        return Err(Error::config(format!("budget {budget} must be at least the bin count {bins}")));
    }
    let probe = random_action_probe(dataset, normalizer, budget, rng)?;
    let q = member_values(critics, &probe)?;
    let stats: Vec<EnsembleStats> = q
        .axis_iter(Axis(0))
        .map(|row| stats_of(&row.to_vec()))
        .collect();
    bin_profile(&probe.distances, &stats, bins, provenance)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn five_number(values: &[f64]) -> FiveNumber {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    FiveNumber {
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
    }
}

/// Which actions `policy_qmin_distribution` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeActions {
    Policy,
    Random,
}

/// Five-number summary of `min_i Q_i` divided by its mean absolute value.
pub fn policy_qmin_distribution<A: Agent + ?Sized, R: Rng + ?Sized>(
    dataset: &Dataset,
    agent: &A,
    budget: usize,
    actions: ProbeActions,
    rng: &mut R,
) -> Result<FiveNumber> {
    if budget == 0 {
        return Err(Error::config("budget must be positive"));
    }
    let mut probe = random_action_probe(dataset, agent.normalizer(), budget, rng)?;
    if actions == ProbeActions::Policy {
        probe.random_actions = agent.policy_actions(probe.states.view())?;
    }
    let q = member_values(agent.critics(), &probe)?;
    let mins: Vec<f64> = q
        .axis_iter(Axis(0))
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let scale = mins.iter().map(|v| v.abs()).sum::<f64>() / mins.len() as f64;
    let scale = scale.max(crate::critic::Q_SCALE_FLOOR);
    let normalized: Vec<f64> = mins.iter().map(|v| v / scale).collect();
    Ok(five_number(&normalized))
}

/// Ranks with ties sharing their average rank (1-based).
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation; NaN for fewer than two points or constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    pearson(&ranks(x), &ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvSpec, Tier};
    use crate::data::generate_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn prov(bins: usize) -> ProfileProvenance {
        ProfileProvenance {
            beta: 0.0,
            ensemble_size: 1,
            target_mode: TargetMode::Shared,
            budget: 0,
            bins,
        }
    }

    #[test]
    fn quantile_matches_statrs() {
        let n = Normal::new(0.0, 1.0).unwrap();
        for k in 1..2000 {
            let p = k as f64 / 2000.0;
            assert!((normal_quantile(p) - n.inverse_cdf(p)).abs() < 1e-9, "p = {p}");
        }
        for &p in &[1e-300, 1e-20, 1e-10, 1e-5, 0.02, 0.98, 1.0 - 1e-10] {
            let (a, b) = (normal_quantile(p), n.inverse_cdf(p));
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "p = {p}: {a} vs {b}");
        }
        assert_eq!(normal_quantile(0.5), 0.0);
    }

    #[test]
    fn expected_min_degenerate_cases() {
        assert_eq!(expected_min_gaussian(1.5, 2.0, 1).unwrap(), 1.5);
        for n in [1, 2, 10, 50] {
            assert_eq!(expected_min_gaussian(-0.7, 0.0, n).unwrap(), -0.7);
        }
        assert!(expected_min_gaussian(0.0, -1.0, 3).is_err());
        assert!(expected_min_gaussian(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn expected_min_monotone_and_linear() {
        let mut prev = f64::INFINITY;
        for n in 1..200 {
            let v = expected_min_gaussian(0.0, 1.0, n).unwrap();
            assert!(v <= prev);
            prev = v;
            let w = expected_min_gaussian(2.0, 3.0, n).unwrap();
            assert!((w - (2.0 + 3.0 * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_of_two_values() {
        let s = stats_of(&[1.0, 3.0]);
        assert_eq!((s.q_mean, s.q_min, s.q_clip, s.q_std), (2.0, 1.0, 1.0, 1.0));
        let s = stats_of(&[0.4; 5]);
        assert_eq!((s.q_std, s.q_clip), (0.0, 0.0));
    }

    #[test]
    fn one_pair_per_bin_reports_raw_values() {
        let d = [0.0, 1.0, 2.0, 3.0];
        let st: Vec<_> = d.iter().map(|&x| stats_of(&[x, x + 2.0])).collect();
        let p = bin_profile(&d, &st, 4, prov(4)).unwrap();
        assert_eq!(p.counts, vec![1, 1, 1, 1]);
        for b in 0..4 {
            assert_eq!(p.q_min[b], d[b]);
            assert_eq!(p.q_std[b], 1.0);
        }
        assert_eq!(p.edges, vec![0.0, 0.75, 1.5, 2.25, 3.0]);
    }

    #[test]
    fn empty_bins_are_nan_not_zero() {
        let d = [0.0, 0.1, 3.0];
        let st: Vec<_> = d.iter().map(|&x| stats_of(&[x])).collect();
        let p = bin_profile(&d, &st, 3, prov(3)).unwrap();
        assert_eq!(p.counts, vec![2, 0, 1]);
        assert!(p.q_mean[1].is_nan());
        assert_eq!(p.counts.iter().sum::<usize>(), 3);
    }

    #[test]
    fn constant_ensemble_gives_flat_profile() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut e = CriticEnsemble::new(3, 2, 2, 4, 1, 1e-3, &mut rng).unwrap();
        for m in &mut e.members {
            m.params_mut().iter_mut().for_each(|p| *p = 0.0);
            let n = m.num_params();
            m.params_mut()[n - 1] = 2.5;
        }
        let ds = generate_dataset(&EnvSpec::point_dense(), Tier::Medium, 500, 1).unwrap();
        let p = distance_profile(&ds, &e, &ds.normalizer, 1000, 10, prov(10), &mut rng).unwrap();
        assert_eq!(p.counts.iter().sum::<usize>(), 1000);
        for b in 0..10 {
            if p.counts[b] > 0 {
                assert_eq!(p.q_std[b], 0.0);
                assert_eq!(p.q_mean[b], 2.5);
            }
        }
    }

    #[test]
    fn profile_is_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = CriticEnsemble::new(4, 2, 2, 8, 2, 1e-3, &mut rng).unwrap();
        let ds = generate_dataset(&EnvSpec::point_dense(), Tier::Medium, 500, 1).unwrap();
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            distance_profile(&ds, &e, &ds.normalizer, 2000, 20, prov(20), &mut r).unwrap()
        };
        let (a, b) = (run(9), run(9));
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn invalid_profile_is_all_nan() {
        let p = UncertaintyProfile::invalid(prov(5));
        assert!(p.q_std.iter().chain(&p.q_min).all(|v| v.is_nan()));
        let mut out = Vec::new();
        p.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "bin_lo,bin_hi,count,q_std,q_clip,q_min,q_mean");
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0], &[1.0]).is_nan());
    }

    #[test]
    fn five_number_of_range() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        let f = five_number(&v);
        assert_eq!((f.min, f.q1, f.median, f.q3, f.max), (0.0, 25.0, 50.0, 75.0, 100.0));
    }
}
