//! Mean-variance frontier over the training-asset mix: SFT, DPO, and online
//! RL as token-investment assets, with verifier tokens acting as risk
//! capital on the RL leg.

use super::{CapitalError, GainFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AssetKind {
    Sft,
    Dpo,
    Rl,
}

/// One training asset: mean capability return per token and its variance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AssetProfile {
    pub kind: AssetKind,
    pub mean_return: f64,
    pub variance: f64,
}

/// Assets plus their pairwise return correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetPortfolio {
    pub assets: Vec<AssetProfile>,
    pub correlation: Vec<Vec<f64>>,
}

impl AssetPortfolio {
    pub fn new(
        assets: Vec<AssetProfile>,
        correlation: Vec<Vec<f64>>,
    ) -> Result<Self, CapitalError> {
        let n = assets.len();
        if correlation.len() != n || correlation.iter().any(|row| row.len() != n) {
            return Err(CapitalError::BadCorrelation);
        }
        for i in 0..n {
            if (correlation[i][i] - 1.0).abs() > 1e-9 {
                return Err(CapitalError::BadCorrelation);
            }
            for j in 0..n {
                if (correlation[i][j] - correlation[j][i]).abs() > 1e-9 {
                    return Err(CapitalError::BadCorrelation);
                }
            }
        }
        if assets.iter().any(|a| a.variance < 0.0) {
            return Err(CapitalError::BadCorrelation);
        }
        let p = Self {
            assets,
            correlation,
        };
        if !p.is_psd() {
            return Err(CapitalError::BadCorrelation);
        }
        Ok(p)
    }

    /// All principal minors nonnegative; exact for the small matrices used
    /// here.
    fn is_psd(&self) -> bool {
        let n = self.assets.len();
        for mask in 1u32..(1 << n) {
            let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let k = idx.len();
            let mut m = vec![vec![0.0; k]; k];
            for (r, &i) in idx.iter().enumerate() {
                for (c, &j) in idx.iter().enumerate() {
                    m[r][c] = self.correlation[i][j];
                }
            }
            if determinant(&m) < -1e-9 {
                return false;
            }
        }
        true
    }

    pub fn mean(&self, weights: &[f64]) -> f64 {
        self.assets
            .iter()
            .zip(weights)
            .map(|(a, w)| a.mean_return * w)
            .sum()
    }

    pub fn variance(&self, weights: &[f64]) -> f64 {
        let n = self.assets.len();
        let mut var = 0.0;
        for i in 0..n {
            for j in 0..n {
                var += weights[i]
                    * weights[j]
                    * self.correlation[i][j]
                    * self.assets[i].variance.sqrt()
                    * self.assets[j].variance.sqrt();
            }
        }
        var.max(0.0)
    }
}

fn determinant(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-15 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
        }
    }
    det
}

/// One frontier point: minimal variance attainable at (approximately) this
/// mean return, with the weights achieving it.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FrontierPoint {
    pub mean: f64,
    pub variance: f64,
    pub weights: Vec<f64>,
}

/// Exhaustive simplex-grid frontier: for each target mean bucket, the
/// minimum-variance weight vector. The grid step bounds the resolution of
/// both the weights and the mean buckets.
pub fn efficient_frontier(
    portfolio: &AssetPortfolio,
    grid_step: f64,
) -> Result<Vec<FrontierPoint>, CapitalError> {
    let n = portfolio.assets.len();
    if n < 1 {
        return Err(CapitalError::TooFewAssets { needed: 1, got: n });
    }
    if n == 1 {
        return Ok(vec![FrontierPoint {
            mean: portfolio.assets[0].mean_return,
            variance: portfolio.assets[0].variance,
            weights: vec![1.0],
        }]);
    }
    let m = (1.0 / grid_step).round().max(1.0) as usize;
    let mut points: Vec<(f64, f64, Vec<f64>)> = Vec::new();
    let mut counts = vec![0usize; n];
    enumerate_compositions(&mut counts, 0, m, &mut |c: &[usize]| {
        let weights: Vec<f64> = c.iter().map(|&x| x as f64 / m as f64).collect();
        points.push((
            portfolio.mean(&weights),
            portfolio.variance(&weights),
            weights,
        ));
    });

    let min_mean = points.iter().map(|p| p.0).fold(f64::MAX, f64::min);
    let max_mean = points.iter().map(|p| p.0).fold(f64::MIN, f64::max);
    let buckets = 101usize;
    let mut best: Vec<Option<(f64, f64, Vec<f64>)>> = vec![None; buckets];
    let width = (max_mean - min_mean).max(1e-12);
    for (mean, var, w) in points {
        let b = (((mean - min_mean) / width) * (buckets - 1) as f64).round() as usize;
        let replace = match &best[b] {
            None => true,
            Some((_, v, _)) => var < *v,
        };
        if replace {
            best[b] = Some((mean, var, w));
        }
    }
    Ok(best
        .into_iter()
        .flatten()
        .map(|(mean, variance, weights)| FrontierPoint {
            mean,
            variance,
            weights,
        })
        .collect())
}

/// Minimum variance attainable at a specific target mean (nearest grid
/// bucket); errors when the target lies outside the attainable range.
pub fn min_variance_for_mean(
    portfolio: &AssetPortfolio,
    grid_step: f64,
    target_mean: f64,
) -> Result<FrontierPoint, CapitalError> {
    let frontier = efficient_frontier(portfolio, grid_step)?;
    let lo = frontier.iter().map(|p| p.mean).fold(f64::MAX, f64::min);
    let hi = frontier.iter().map(|p| p.mean).fold(f64::MIN, f64::max);
    if target_mean < lo - 1e-9 || target_mean > hi + 1e-9 {
        return Err(CapitalError::InfeasibleTargetMean(target_mean));
    }
    Ok(frontier
        .into_iter()
        .min_by(|a, b| {
            (a.mean - target_mean)
                .abs()
                .partial_cmp(&(b.mean - target_mean).abs())
                .unwrap()
        })
        .expect("frontier non-empty"))
}

/// Global minimum-variance point on the weight grid.
pub fn min_variance_point(
    portfolio: &AssetPortfolio,
    grid_step: f64,
) -> Result<FrontierPoint, CapitalError> {
    let frontier = efficient_frontier(portfolio, grid_step)?;
    Ok(frontier
        .into_iter()
        .min_by(|a, b| a.variance.partial_cmp(&b.variance).unwrap())
        .expect("frontier non-empty"))
}

fn enumerate_compositions(
    counts: &mut Vec<usize>,
    pos: usize,
    remaining: usize,
    f: &mut impl FnMut(&[usize]),
) {
    if pos == counts.len() - 1 {
        counts[pos] = remaining;
        f(counts);
        return;
    }
    for v in 0..=remaining {
        counts[pos] = v;
        enumerate_compositions(counts, pos + 1, remaining - v, f);
    }
}

/// RL-asset variance along an ascending verifier-token sweep: the gain
/// function's coupling scales the base variance down toward its floor.
pub fn verifier_risk_capital(
    portfolio: &AssetPortfolio,
    gain: &GainFunction,
    sweep: &[f64],
) -> Result<Vec<(f64, f64)>, CapitalError> {
    if sweep.windows(2).any(|w| w[1] < w[0]) {
        return Err(CapitalError::UnsortedSweep);
    }
    let rl = portfolio
        .assets
        .iter()
        .find(|a| a.kind == AssetKind::Rl)
        .ok_or(CapitalError::NoRlAsset)?;
    Ok(sweep
        .iter()
        .map(|&tv| (tv, rl.variance * gain.rl_variance(tv) / gain.variance_base))
        .collect())
}
