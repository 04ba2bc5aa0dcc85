//! Field-comparison metrics and rank histograms.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};
use crate::scores::{Ensemble, Observation};
use crate::stochastic::stream_rng;

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch("rmse operand length", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidParameter("rmse of empty vectors".into()));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl SsimConstants {
    /// `(0.01 L)²`, `(0.03 L)²`, `c₂/2` for dynamic range `L`.
    pub fn for_range(l: f64) -> Self {
        let c2 = (0.03 * l).powi(2);
        Self {
            c1: (0.01 * l).powi(2),
            c2,
            c3: c2 / 2.0,
        }
    }

    /// Constants for the range `max − min` of the two inputs together.
    pub fn for_pair(a: &[f64], b: &[f64]) -> Self {
        let (lo, hi) = a
            .iter()
            .chain(b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Self::for_range(hi - lo)
    }

    pub fn zero() -> Self {
        Self {
            c1: 0.0,
            c2: 0.0,
            c3: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimReport {
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
    pub ssim: f64,
}

/// Global SSIM with sample (n−1) statistics. `None` selects
/// [`SsimConstants::for_pair`].
pub fn ssim(a: &[f64], b: &[f64], constants: Option<SsimConstants>) -> Result<SsimReport> {
    if a.len() != b.len() {
        return Err(Error::mismatch("ssim operand length", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidParameter("ssim needs at least two values".into()));
    }
    let c = constants.unwrap_or_else(|| SsimConstants::for_pair(a, b));
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mu_a, y - mu_b);
        vaa += dx * dx;
        vbb += dy * dy;
        vab += dx * dy;
    }
    let (sa, sb, sab) = ((vaa / (n - 1.0)).sqrt(), (vbb / (n - 1.0)).sqrt(), vab / (n - 1.0));
    let ratio = |num: f64, den: f64| {
        if den == 0.0 {
            Err(Error::DegenerateSsim)
        } else {
            Ok(num / den)
        }
    };
    let luminance = ratio(2.0 * mu_a * mu_b + c.c1, mu_a * mu_a + mu_b * mu_b + c.c1)?;
    let contrast = ratio(2.0 * sa * sb + c.c2, sa * sa + sb * sb + c.c2)?;
    let structure = ratio(sab + c.c3, sa * sb + c.c3)?;
    Ok(SsimReport {
        luminance,
        contrast,
        structure,
        ssim: luminance * contrast * structure,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    /// `Ns + 1` bins; bin `r` counts observations with `r` members below.
    pub counts: Vec<u64>,
    /// 95% binomial interval for each bin count under uniformity.
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

impl RankHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Pearson statistic against the uniform histogram (`Ns` degrees of freedom).
    pub fn chi_square(&self) -> f64 {
        let e = self.total() as f64 / self.counts.len() as f64;
        self.counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
    }

    /// Upper-tail probability of [`Self::chi_square`] under uniformity.
    pub fn p_value(&self) -> f64 {
        chi_square_sf(self.chi_square(), (self.counts.len() - 1) as f64)
    }
}

/// Upper-tail probability of a chi-square variable with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    ChiSquared::new(df).expect("positive degrees of freedom").sf(x)
}

/// Quantile of the chi-square distribution.
pub fn chi_square_quantile(p: f64, df: f64) -> f64 {
    ChiSquared::new(df).expect("positive degrees of freedom").inverse_cdf(p)
}

/// Ranks every observed scalar among the matching ensemble values; ties are
/// broken uniformly at random from `seed`.
pub fn rank_histogram(ens: &[Ensemble], obs: &[Observation], seed: u64) -> Result<RankHistogram> {
    if ens.len() != obs.len() {
        return Err(Error::mismatch("observation batches", ens.len(), obs.len()));
    }
    let first = ens.first().ok_or(Error::EmptyEnsemble)?;
    let ns = first.members();
    let mut counts = vec![0u64; ns + 1];
    let mut rng = stream_rng(seed, 0);
    for (e, o) in ens.iter().zip(obs) {
        if e.members() != ns {
            return Err(Error::mismatch("ensemble size", ns, e.members()));
        }
        if e.dim() != o.dim() {
            return Err(Error::mismatch("observation length", e.dim(), o.dim()));
        }
        let v = e.values();
        for (k, &y) in o.values().iter().enumerate() {
            let row = v.row(k);
            let below = row.iter().filter(|&&x| x < y).count();
            let ties = row.iter().filter(|&&x| x == y).count();
            let r = if ties == 0 { below } else { below + rng.random_range(0..=ties) };
            counts[r] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let (lo, hi) = if total == 0 {
        (0.0, 0.0)
    } else {
        let bin = Binomial::new(1.0 / (ns + 1) as f64, total).expect("valid binomial");
        (bin.inverse_cdf(0.025) as f64, bin.inverse_cdf(0.975) as f64)
    };
    Ok(RankHistogram {
        counts,
        ci_low: vec![lo; ns + 1],
        ci_high: vec![hi; ns + 1],
    })
}
