//! Trace summaries: per-tenant tail latency, the congestion fingerprint
//! comparison between regimes, and a Little's-law consistency check of the
//! event engine itself.

use std::collections::BTreeMap;

use super::sim::Trace;
use super::ServingRequest;

/// p95 sojourn time per tenant over admitted requests.
pub fn tenant_p95(trace: &Trace) -> BTreeMap<String, f64> {
    let mut per_tenant: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in trace.records.iter().filter(|r| r.admitted) {
        per_tenant
            .entry(r.tenant.clone())
            .or_default()
            .push(r.sojourn);
    }
    per_tenant
        .into_iter()
        .map(|(tenant, mut xs)| {
            xs.sort_by(|a, b| a.total_cmp(b));
            let idx = ((0.95 * xs.len() as f64).ceil() as usize).clamp(1, xs.len()) - 1;
            (tenant, xs[idx])
        })
        .collect()
}

/// Pearson correlation; zero when either series is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return 0.0;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// The comparative fingerprint of unpriced congestion: how strongly the
/// short tenant's tail latency tracks the long tenant's offered volume, and
/// the tail latency itself, under each regime.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FingerprintComparison {
    pub short_p95_flat: f64,
    pub short_p95_priced: f64,
    pub correlation_flat: f64,
    pub correlation_priced: f64,
}

impl FingerprintComparison {
    /// Windows arrivals, correlates the long tenant's offered token volume
    /// per window with the short tenant's p95 sojourn per window.
    pub fn compute(
        workload: &[ServingRequest],
        flat_trace: &Trace,
        priced_trace: &Trace,
        short_tenant: &str,
        long_tenant: &str,
        window: f64,
    ) -> Self {
        let correlate = |trace: &Trace| {
            let horizon = workload.iter().map(|r| r.arrival).fold(0.0, f64::max);
            let buckets = (horizon / window).ceil().max(1.0) as usize;
            let mut volume = vec![0.0_f64; buckets];
            let mut short_sojourns: Vec<Vec<f64>> = vec![Vec::new(); buckets];
            for r in workload {
                let b = ((r.arrival / window) as usize).min(buckets - 1);
                if r.tenant == long_tenant {
                    volume[b] += r.prefill_tokens + r.decode_tokens;
                }
            }
            for rec in trace.records.iter().filter(|r| r.admitted) {
                if rec.tenant == short_tenant {
                    let b = ((rec.arrival / window) as usize).min(buckets - 1);
                    short_sojourns[b].push(rec.sojourn);
                }
            }
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (b, sojourns) in short_sojourns.iter_mut().enumerate() {
                if sojourns.is_empty() {
                    continue;
                }
                sojourns.sort_by(|a, b| a.total_cmp(b));
                let idx =
                    ((0.95 * sojourns.len() as f64).ceil() as usize).clamp(1, sojourns.len()) - 1;
                xs.push(volume[b]);
                ys.push(sojourns[idx]);
            }
            pearson(&xs, &ys)
        };
        let p95_of = |trace: &Trace| {
            tenant_p95(trace)
                .get(short_tenant)
                .copied()
                .unwrap_or(f64::NAN)
        };
        Self {
            short_p95_flat: p95_of(flat_trace),
            short_p95_priced: p95_of(priced_trace),
            correlation_flat: correlate(flat_trace),
            correlation_priced: correlate(priced_trace),
        }
    }
}

/// Relative gap between time-averaged occupancy integrated from the system
/// samples and arrival-rate times mean sojourn from the records. Both sides
/// come from independent bookkeeping inside the engine; a sound event loop
/// keeps them within a couple percent on long runs.
pub fn littles_law_gap(trace: &Trace) -> f64 {
    let admitted: Vec<_> = trace.records.iter().filter(|r| r.admitted).collect();
    if admitted.is_empty() || trace.system_samples.len() < 2 {
        return 0.0;
    }
    let t0 = trace.system_samples.first().unwrap().0;
    let t1 = trace.system_samples.last().unwrap().0;
    let span = (t1 - t0).max(1e-12);
    let mut area = 0.0;
    for w in trace.system_samples.windows(2) {
        area += w[0].1 as f64 * (w[1].0 - w[0].0);
    }
    let avg_occupancy = area / span;
    let arrival_rate = admitted.len() as f64 / span;
    let mean_sojourn = admitted.iter().map(|r| r.sojourn).sum::<f64>() / admitted.len() as f64;
    let rhs = arrival_rate * mean_sojourn;
    if rhs <= 0.0 {
        return 0.0;
    }
    (avg_occupancy - rhs).abs() / rhs
}
