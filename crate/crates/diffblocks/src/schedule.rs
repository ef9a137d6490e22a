//! The log-normal noise law and its equi-probability partitioning.
//!
//! Noise levels are sampled as `log sigma ~ N(p_mean, p_std^2)` truncated to
//! `[sigma_min, sigma_max]`. Block boundaries are placed so every block's
//! interval carries probability mass `1/B`:
//!
//! ```text
//! sigma_b = exp(p_mean + p_std * inv_cdf(q_b)),
//! q_b     = q_min + (b/B) * (q_max - q_min)
//! ```
//!
//! with `q_{min,max}` the CDF values of the range endpoints. Boundaries are
//! stored descending (`boundaries[0] = sigma_max`), so block 0 owns the
//! highest-noise interval and is applied first at inference.
//!
//! The normal CDF is built from exact expansions of the complementary error
//! function (power series below 1.5, Laplace continued fraction above), and
//! the inverse CDF refines a rational initial guess with Newton steps against
//! that CDF, so the pair is self-consistent to machine precision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const SQRT_PI: f64 = 1.772453850905516;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// The truncated log-normal noise distribution.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Mean of `log sigma`.
    pub p_mean: f64,
    /// Standard deviation of `log sigma`.
    pub p_std: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Data standard deviation used by the weighting and preconditioning.
    pub sigma_data: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            p_mean: -1.2,
            p_std: 1.2,
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_data: 0.5,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(crate::Error::config(format!(
                "need 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.p_std <= 0.0 {
            return Err(crate::Error::config("p_std must be positive"));
        }
        if self.sigma_data <= 0.0 {
            return Err(crate::Error::config("sigma_data must be positive"));
        }
        Ok(())
    }

    /// Standardized log-noise coordinate `(ln sigma - p_mean) / p_std`.
    fn u(&self, sigma: f64) -> f64 {
        (sigma.ln() - self.p_mean) / self.p_std
    }

    fn quantile_range(&self) -> (f64, f64) {
        (normal_cdf(self.u(self.sigma_min)), normal_cdf(self.u(self.sigma_max)))
    }

    /// Noise level at quantile `q` of the untruncated log-normal.
    fn sigma_at_quantile(&self, q: f64) -> f64 {
        (self.p_mean + self.p_std * normal_inv_cdf(q)).exp()
    }
}

/// Descending block boundaries plus the per-block training ranges after
/// overlap expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    boundaries: Vec<f64>,
    gamma: f64,
    expanded: Vec<(f64, f64)>,
}

impl Partition {
    fn from_boundaries(boundaries: Vec<f64>, gamma: f64) -> Partition {
        assert!(boundaries.len() >= 2, "need at least one block");
        assert!(
            boundaries.windows(2).all(|w| w[0] > w[1]),
            "boundaries must be strictly descending: {boundaries:?}"
        );
        let expanded = (0..boundaries.len() - 1)
            .map(|b| (boundaries[b + 1], boundaries[b]))
            .collect();
        let mut p = Partition {
            boundaries,
            gamma: 0.0,
            expanded,
        };
        if gamma > 0.0 {
            p = expand_overlap(&p, gamma);
        }
        p
    }

    pub fn num_blocks(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// All `B + 1` boundaries, descending from `sigma_max` to `sigma_min`.
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn sigma_max(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn sigma_min(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// Unexpanded `(lo, hi)` range of block `b` (0-based, descending noise).
    pub fn range(&self, b: usize) -> (f64, f64) {
        (self.boundaries[b + 1], self.boundaries[b])
    }

    /// Training range of block `b` after overlap expansion.
    pub fn expanded_range(&self, b: usize) -> (f64, f64) {
        self.expanded[b]
    }
}

// ── normal distribution primitives ──────────────────────────────────

/// erf by its alternating power series; accurate for small arguments.
fn erf_series(x: f64) -> f64 {
    let s = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0u32;
    loop {
        let nf = n as f64;
        term *= -s * (2.0 * nf + 1.0) / ((nf + 1.0) * (2.0 * nf + 3.0));
        sum += term;
        n += 1;
        if term.abs() <= 1e-18 * sum.abs() || n > 200 {
            break;
        }
    }
    sum * 2.0 / SQRT_PI
}

/// erfc for `x >= 1.5` by the Laplace continued fraction
/// `erfc(x) = exp(-x^2) / (sqrt(pi) * (x + K_{n>=1}((n/2) / x)))`,
/// evaluated with the modified Lentz algorithm.
fn erfc_continued_fraction(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for n in 1..300 {
        let a = n as f64 / 2.0;
        d = x + a * d;
        if d == 0.0 {
            d = tiny;
        }
        c = x + a / c;
        if c == 0.0 {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (-x * x).exp() / (SQRT_PI * f)
}

/// Complementary error function, accurate to ~1e-15 relative in the tail.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        2.0 - erfc(-x)
    } else if x < 1.0 {
        1.0 - erf_series(x)
    } else if x > 27.0 {
        // exp(-x^2) underflows near 27^2 = 729
        0.0
    } else {
        erfc_continued_fraction(x)
    }
}

pub fn erf(x: f64) -> f64 {
    if x.abs() < 1.0 {
        erf_series(x)
    } else {
        1.0 - erfc(x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    assert!(x.is_finite(), "normal_cdf of non-finite input");
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (SQRT_PI * SQRT_2)
}

/// Inverse standard normal CDF for `0 < q < 1`.
///
/// A rational approximation supplies the initial value, then two Newton
/// iterations against [`normal_cdf`] pin the result, making
/// `normal_cdf(normal_inv_cdf(q)) = q` hold to machine precision.
pub fn normal_inv_cdf(q: f64) -> f64 {
    assert!(q > 0.0 && q < 1.0, "quantile must be in (0, 1), got {q}");
    let mut x = rational_inv_cdf_guess(q);
    for _ in 0..2 {
        let pdf = normal_pdf(x);
        if pdf <= 1e-300 {
            break;
        }
        x -= (normal_cdf(x) - q) / pdf;
    }
    x
}

/// Peter Acklam's rational approximation to the normal quantile
/// (absolute error below 1.2e-9 over the full open interval).
fn rational_inv_cdf_guess(q: f64) -> f64 {
    const A1: f64 = -39.6968302866538;
    const A2: f64 = 220.946098424521;
    const A3: f64 = -275.928510446969;
    const A4: f64 = 138.357751867269;
    const A5: f64 = -30.6647980661472;
    const A6: f64 = 2.50662827745924;

    const B1: f64 = -54.4760987982241;
    const B2: f64 = 161.585836858041;
    const B3: f64 = -155.698979859887;
    const B4: f64 = 66.8013118877197;
    const B5: f64 = -13.2806815528857;

    const C1: f64 = -7.78489400243029E-03;
    const C2: f64 = -0.322396458041136;
    const C3: f64 = -2.40075827716184;
    const C4: f64 = -2.54973253934373;
    const C5: f64 = 4.37466414146497;
    const C6: f64 = 2.93816398269878;

    const D1: f64 = 7.78469570904146E-03;
    const D2: f64 = 0.32246712907004;
    const D3: f64 = 2.445134137143;
    const D4: f64 = 3.75440866190742;

    const P_LOW: f64 = 0.02425;

    if q < P_LOW {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C1 * r + C2) * r + C3) * r + C4) * r + C5) * r + C6)
            / ((((D1 * r + D2) * r + D3) * r + D4) * r + 1.0)
    } else if q <= 1.0 - P_LOW {
        let r = q - 0.5;
        let s = r * r;
        (((((A1 * s + A2) * s + A3) * s + A4) * s + A5) * s + A6) * r
            / (((((B1 * s + B2) * s + B3) * s + B4) * s + B5) * s + 1.0)
    } else {
        let r = (-2.0 * (1.0 - q).ln()).sqrt();
        -(((((C1 * r + C2) * r + C3) * r + C4) * r + C5) * r + C6)
            / ((((D1 * r + D2) * r + D3) * r + D4) * r + 1.0)
    }
}

// ── partitioning ─────────────────────────────────────────────────────

/// Equi-probability boundaries: `B + 1` descending noise levels with the
/// endpoints exactly at `sigma_max` and `sigma_min`, each interval carrying
/// truncated mass `1/B`.
pub fn partition_boundaries(cfg: &NoiseConfig, num_blocks: usize) -> Partition {
    assert!(num_blocks >= 1, "need at least one block");
    let (q_min, q_max) = cfg.quantile_range();
    let mut boundaries = Vec::with_capacity(num_blocks + 1);
    boundaries.push(cfg.sigma_max);
    for j in 1..num_blocks {
        let frac = j as f64 / num_blocks as f64;
        let q = q_max - frac * (q_max - q_min);
        boundaries.push(cfg.sigma_at_quantile(q));
    }
    boundaries.push(cfg.sigma_min);
    Partition::from_boundaries(boundaries, 0.0)
}

/// The naive alternative: boundaries uniform in `log sigma`, for contrast
/// against the equi-probability placement.
pub fn log_uniform_boundaries(cfg: &NoiseConfig, num_blocks: usize) -> Partition {
    assert!(num_blocks >= 1, "need at least one block");
    let (lmin, lmax) = (cfg.sigma_min.ln(), cfg.sigma_max.ln());
    let mut boundaries = Vec::with_capacity(num_blocks + 1);
    boundaries.push(cfg.sigma_max);
    for j in 1..num_blocks {
        let frac = j as f64 / num_blocks as f64;
        boundaries.push((lmax - frac * (lmax - lmin)).exp());
    }
    boundaries.push(cfg.sigma_min);
    Partition::from_boundaries(boundaries, 0.0)
}

/// Truncated log-normal mass of `[lo, hi]`, in closed form through the CDF.
pub fn interval_mass(cfg: &NoiseConfig, lo: f64, hi: f64) -> f64 {
    assert!(lo < hi, "inverted interval [{lo}, {hi}]");
    assert!(
        lo >= cfg.sigma_min * (1.0 - 1e-12) && hi <= cfg.sigma_max * (1.0 + 1e-12),
        "interval [{lo}, {hi}] outside noise range [{}, {}]",
        cfg.sigma_min,
        cfg.sigma_max
    );
    let (q_min, q_max) = cfg.quantile_range();
    (normal_cdf(cfg.u(hi)) - normal_cdf(cfg.u(lo))) / (q_max - q_min)
}

/// Widen every block's training range by the multiplicative factor
/// `alpha_b = (hi_b / lo_b)^gamma`, clamped to the overall noise range.
/// `gamma = 0` leaves the intervals untouched.
pub fn expand_overlap(partition: &Partition, gamma: f64) -> Partition {
    assert!(gamma >= 0.0, "overlap exponent must be nonnegative");
    let (smin, smax) = (partition.sigma_min(), partition.sigma_max());
    let expanded = (0..partition.num_blocks())
        .map(|b| {
            let (lo, hi) = partition.range(b);
            let alpha = (hi / lo).powf(gamma);
            ((lo / alpha).max(smin), (hi * alpha).min(smax))
        })
        .collect();
    Partition {
        boundaries: partition.boundaries.clone(),
        gamma,
        expanded,
    }
}

/// Draw from the noise law restricted to `[lo, hi]` and renormalized, by
/// inverse-CDF on the truncated quantile range. The draw always lies inside
/// the interval; a degenerate interval returns its single point.
pub fn sample_sigma(cfg: &NoiseConfig, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    assert!(lo <= hi, "inverted range [{lo}, {hi}]");
    assert!(lo > 0.0, "noise level must be positive");
    if lo == hi {
        return lo;
    }
    let (u_lo, u_hi) = (normal_cdf(cfg.u(lo)), normal_cdf(cfg.u(hi)));
    let u = rng.gen_range(u_lo..u_hi);
    cfg.sigma_at_quantile(u).clamp(lo, hi)
}

/// EDM loss weighting `w(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`,
/// which cancels the sampling bias of the log-normal noise law.
pub fn loss_weight(cfg: &NoiseConfig, sigma: f64) -> f64 {
    assert!(sigma > 0.0, "noise level must be positive");
    let s2 = sigma * sigma;
    let d2 = cfg.sigma_data * cfg.sigma_data;
    (s2 + d2) / (s2 * d2)
}

/// EDM preconditioning coefficients for one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    /// Input scale applied to the noisy tokens.
    pub c_in: f64,
    /// Skip weight on the noisy input.
    pub c_skip: f64,
    /// Output scale on the network contribution.
    pub c_out: f64,
    /// Conditioning value fed to the noise embedding, `ln(sigma) / 4`.
    pub c_noise: f64,
}

pub fn precondition_coeffs(cfg: &NoiseConfig, sigma: f64) -> Precond {
    assert!(sigma > 0.0, "noise level must be positive");
    let s2 = sigma * sigma;
    let d2 = cfg.sigma_data * cfg.sigma_data;
    Precond {
        c_in: 1.0 / (s2 + d2).sqrt(),
        c_skip: d2 / (s2 + d2),
        c_out: sigma * cfg.sigma_data / (s2 + d2).sqrt(),
        c_noise: sigma.ln() / 4.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn cdf_at_zero_is_half() {
        assert_eq!(normal_cdf(0.0), 0.5);
    }

    #[test]
    fn cdf_symmetry() {
        for &x in &[0.1, 0.7, 1.3, 2.9, 4.4, 6.0, 0.013] {
            let s = normal_cdf(x) + normal_cdf(-x);
            assert!((s - 1.0).abs() < 1e-14, "asymmetry at {x}: {s}");
        }
    }

    #[test]
    fn cdf_known_quantile() {
        // 1.959964 is the 97.5% point of the standard normal
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-7);
    }

    #[test]
    fn erf_series_and_fraction_agree_at_crossover() {
        // The series route computes 1 - erf and loses a couple of digits to
        // cancellation, so compare with an absolute floor at f64 noise level.
        for i in 0..60 {
            let x = 0.7 + 0.02 * i as f64; // straddles the 1.0 threshold
            let a = 1.0 - erf_series(x);
            let b = erfc_continued_fraction(x);
            assert!(
                (a - b).abs() < 1e-15 + 1e-13 * b,
                "mismatch at {x}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn inv_cdf_at_half_is_zero() {
        assert!(normal_inv_cdf(0.5).abs() < 1e-15);
    }

    #[test]
    fn inv_cdf_round_trip() {
        // In the upper tail the quantile saturates toward 1.0, where one ulp
        // of q corresponds to ulp(1)/pdf(x) in x; no f64 implementation can
        // beat that, so the tolerance carries the quantization term.
        let mut x = -6.0;
        while x <= 6.0 {
            let q = normal_cdf(x);
            let back = normal_inv_cdf(q);
            let quantization = 2.0 * f64::EPSILON / normal_pdf(x);
            assert!(
                (back - x).abs() < 1e-9 + quantization,
                "round trip at {x}: {back}"
            );
            x += 0.173;
        }
    }

    #[test]
    fn inv_cdf_forward_round_trip() {
        for &q in &[1e-6, 0.001, 0.02, 0.3333, 0.5, 0.77, 0.999, 1.0 - 1e-7] {
            let x = normal_inv_cdf(q);
            assert!((normal_cdf(x) - q).abs() < 1e-10, "cdf(inv({q})) off");
        }
    }

    #[test]
    fn inv_cdf_one_third() {
        assert!((normal_inv_cdf(1.0 / 3.0) - (-0.43073)).abs() < 1e-4);
    }

    #[test]
    #[should_panic(expected = "quantile must be in")]
    fn inv_cdf_rejects_endpoint() {
        normal_inv_cdf(1.0);
    }

    #[test]
    fn single_block_partition_is_the_whole_range() {
        let cfg = NoiseConfig::default();
        let p = partition_boundaries(&cfg, 1);
        assert_eq!(p.boundaries(), &[80.0, 0.002]);
    }

    #[test]
    fn default_three_block_boundaries() {
        let cfg = NoiseConfig::default();
        let p = partition_boundaries(&cfg, 3);
        assert!((p.boundaries()[1] - 0.5051).abs() < 1e-3, "got {}", p.boundaries()[1]);
        assert!((p.boundaries()[2] - 0.1796).abs() < 1e-3, "got {}", p.boundaries()[2]);
    }

    #[test]
    fn every_interval_carries_equal_mass() {
        let cfg = NoiseConfig::default();
        for b in 1..=8 {
            let p = partition_boundaries(&cfg, b);
            for i in 0..b {
                let (lo, hi) = p.range(i);
                let mass = interval_mass(&cfg, lo, hi);
                assert!(
                    (mass - 1.0 / b as f64).abs() < 1e-10,
                    "B={b} block {i}: mass {mass}"
                );
            }
        }
    }

    #[test]
    fn full_range_mass_is_one() {
        let cfg = NoiseConfig::default();
        assert_eq!(interval_mass(&cfg, cfg.sigma_min, cfg.sigma_max), 1.0);
    }

    #[test]
    fn halves_sum_to_full_mass() {
        let cfg = NoiseConfig::default();
        let mid = 0.4;
        let a = interval_mass(&cfg, cfg.sigma_min, mid);
        let b = interval_mass(&cfg, mid, cfg.sigma_max);
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spec_interval_has_one_third_mass() {
        let cfg = NoiseConfig::default();
        assert!((interval_mass(&cfg, 0.1796, 0.5051) - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    #[should_panic(expected = "inverted interval")]
    fn inverted_interval_panics() {
        interval_mass(&NoiseConfig::default(), 0.5, 0.1);
    }

    #[test]
    fn overlap_matches_hand_evaluation() {
        // Middle block spans 0.25..1.0: alpha = 4^0.05 ~ 1.0718 and the
        // expanded range [0.25/alpha, 1.0*alpha] stays clear of the clamps.
        let p = Partition::from_boundaries(vec![3.0, 1.0, 0.25, 0.05], 0.0);
        let e = expand_overlap(&p, 0.05);
        let alpha = 4.0f64.powf(0.05);
        assert!((alpha - 1.0718).abs() < 1e-4);
        let (lo, hi) = e.expanded_range(1);
        assert!((lo - 0.25 / alpha).abs() < 1e-12);
        assert!((lo - 0.2333).abs() < 1e-4);
        assert!((hi - alpha).abs() < 1e-12);
        assert!((hi - 1.0718).abs() < 1e-4);
    }

    #[test]
    fn zero_gamma_keeps_intervals() {
        let cfg = NoiseConfig::default();
        let p = partition_boundaries(&cfg, 4);
        let e = expand_overlap(&p, 0.0);
        for b in 0..4 {
            assert_eq!(p.range(b), e.expanded_range(b));
        }
    }

    #[test]
    fn overlap_clamps_to_range() {
        let cfg = NoiseConfig::default();
        let p = partition_boundaries(&cfg, 3);
        let e = expand_overlap(&p, 0.5);
        assert_eq!(e.expanded_range(0).1, cfg.sigma_max);
        assert_eq!(e.expanded_range(2).0, cfg.sigma_min);
        for b in 0..3 {
            let (lo, hi) = p.range(b);
            let (elo, ehi) = e.expanded_range(b);
            assert!(elo <= lo && ehi >= hi, "expanded range must contain block range");
        }
    }

    #[test]
    fn sample_sigma_degenerate_interval() {
        let cfg = NoiseConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_sigma(&cfg, 0.7, 0.7, &mut rng), 0.7);
    }

    #[test]
    fn samples_stay_in_range_and_split_by_mass() {
        let cfg = NoiseConfig::default();
        let p = partition_boundaries(&cfg, 3);
        let (lo, hi) = p.range(1);
        let mid = (lo * hi).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut below = 0usize;
        for _ in 0..n {
            let s = sample_sigma(&cfg, lo, hi, &mut rng);
            assert!(s >= lo && s <= hi);
            if s < mid {
                below += 1;
            }
        }
        let expected = interval_mass(&cfg, lo, mid) / interval_mass(&cfg, lo, hi);
        let got = below as f64 / n as f64;
        assert!((got - expected).abs() < 0.01, "got {got}, expected {expected}");
    }

    #[test]
    fn loss_weight_hand_values() {
        let cfg = NoiseConfig::default();
        assert!((loss_weight(&cfg, 0.5) - 8.0).abs() < 1e-12);
        assert!((loss_weight(&cfg, 1.0) - 5.0).abs() < 1e-12);
        let w80 = loss_weight(&cfg, 80.0);
        assert!((w80 - 4.0).abs() / 4.0 < 0.001, "w(80) = {w80}");
    }

    #[test]
    fn preconditioning_hand_values() {
        let cfg = NoiseConfig::default();
        let p = precondition_coeffs(&cfg, 0.5);
        assert!((p.c_skip - 0.5).abs() < 1e-15);
        assert!((p.c_in - 1.0 / 0.5f64.sqrt()).abs() < 1e-12);
        assert!((p.c_out - 0.25 / 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(precondition_coeffs(&cfg, 1.0).c_noise, 0.0);
    }

    #[test]
    fn preconditioning_identities() {
        let cfg = NoiseConfig::default();
        for &sigma in &[0.002, 0.01, 0.33, 0.5, 1.7, 12.0, 80.0] {
            let p = precondition_coeffs(&cfg, sigma);
            let s2 = sigma * sigma;
            let d2 = cfg.sigma_data * cfg.sigma_data;
            assert!((p.c_in * p.c_in * (s2 + d2) - 1.0).abs() < 1e-12);
            assert!((p.c_skip * (s2 + d2) - d2).abs() < 1e-12);
            assert!((p.c_out * p.c_out - s2 * d2 / (s2 + d2)).abs() < 1e-12);
        }
    }

    #[test]
    fn refined_partition_mass_is_consistent() {
        let cfg = NoiseConfig::default();
        let coarse = partition_boundaries(&cfg, 3);
        let fine = partition_boundaries(&cfg, 6);
        for b in 0..3 {
            let (clo, chi) = coarse.range(b);
            let m_coarse = interval_mass(&cfg, clo, chi);
            let m_fine = interval_mass(&cfg, fine.range(2 * b).0, fine.range(2 * b).1)
                + interval_mass(&cfg, fine.range(2 * b + 1).0, fine.range(2 * b + 1).1);
            assert!((m_coarse - m_fine).abs() < 1e-10);
        }
    }
}
