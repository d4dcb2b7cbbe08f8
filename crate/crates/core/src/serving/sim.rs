//! The event engine. Three stages in series: a single prefill server, KV
//! slot residency (acquired after prefill, held through decode), and a
//! single decode server. Service times are deterministic (tokens over
//! capacity); randomness enters only through per-request priority noise
//! keyed by (seed, request id), so counterfactual runs see identical draws.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Regime, ResourcePool, ServingRequest, SimError};

/// Per-request timeline and assessed charges.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub tenant: String,
    pub admitted: bool,
    pub priority: f64,
    pub arrival: f64,
    pub prefill_start: f64,
    pub prefill_done: f64,
    pub kv_admit: f64,
    pub kv_loaded: f64,
    pub decode_start: f64,
    pub decode_done: f64,
    /// Waiting time summed over the three stage queues.
    pub queueing_delay: f64,
    pub sojourn: f64,
    /// Flat regime: per-token charge. Congestion regime: the exact
    /// externality price. Learned-priority: zero.
    pub assessed_charge: f64,
    /// The congestion component alone (zero outside the priced regime).
    pub congestion_charge: f64,
    /// What the admission controller believed the charge would be.
    pub admission_estimate: f64,
}

/// Deterministic event log of one simulation run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Trace {
    pub regime: String,
    pub seed: u64,
    pub records: Vec<RequestRecord>,
    /// (time, occupied slots) at every KV occupancy change.
    pub kv_samples: Vec<(f64, f64)>,
    /// (time, requests in system) at every admission or completion.
    pub system_samples: Vec<(f64, u32)>,
    pub rejected: Vec<u64>,
}

impl Trace {
    pub fn record(&self, id: u64) -> Option<&RequestRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    // Resource releases sort before acquisitions at equal (time, id).
    DecodeDone,
    KvLoaded,
    PrefillDone,
    Arrival,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    id: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.id.cmp(&other.id))
            .then(self.kind.cmp(&other.kind))
            .reverse() // max-heap -> earliest first
    }
}

/// Queue position: priority, then arrival, then id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueKey {
    priority: f64,
    arrival: f64,
    id: u64,
}

impl Eq for QueueKey {}
impl PartialOrd for QueueKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then(self.arrival.total_cmp(&other.arrival))
            .then(self.id.cmp(&other.id))
    }
}

struct Pending {
    request: ServingRequest,
    key: QueueKey,
    record: RequestRecord,
    prefill_service: f64,
    decode_service: f64,
}

struct Engine<'a> {
    pool: &'a ResourcePool,
    regime: &'a Regime,
    events: BinaryHeap<Event>,
    requests: BTreeMap<u64, Pending>,
    prefill_queue: BTreeSet<QueueKey>,
    prefill_busy: Option<u64>,
    kv_queue: BTreeSet<QueueKey>,
    kv_free: f64,
    decode_queue: BTreeSet<QueueKey>,
    decode_busy: Option<u64>,
    kv_samples: Vec<(f64, f64)>,
    system_samples: Vec<(f64, u32)>,
    in_system: u32,
    rejected: Vec<u64>,
    /// Smoothed system occupancy: the delay-seconds a second of service
    /// imposes on others. Sampled at every arrival and completion.
    pressure: f64,
}

fn priority_of(request: &ServingRequest, regime: &Regime, seed: u64) -> f64 {
    match regime {
        Regime::FlatFcfs { .. } | Regime::CongestionPriced { .. } => request.arrival,
        Regime::LearnedPriority { noise_sigma } => {
            // Keyed by (seed, id) so removing one request leaves every other
            // prediction untouched.
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ request.id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            request.decode_tokens * (noise_sigma * z).exp()
        }
    }
}

impl<'a> Engine<'a> {
    fn run(
        workload: &[ServingRequest],
        pool: &'a ResourcePool,
        regime: &'a Regime,
        seed: u64,
    ) -> Result<Trace, SimError> {
        pool.validate()?;
        if workload.windows(2).any(|w| w[1].arrival < w[0].arrival) {
            return Err(SimError::UnsortedWorkload);
        }
        for r in workload {
            if r.kv_footprint > pool.kv_slots {
                return Err(SimError::FootprintExceedsCapacity {
                    id: r.id,
                    footprint: r.kv_footprint,
                    capacity: pool.kv_slots,
                });
            }
        }

        let mut engine = Engine {
            pool,
            regime,
            events: BinaryHeap::new(),
            requests: BTreeMap::new(),
            prefill_queue: BTreeSet::new(),
            prefill_busy: None,
            kv_queue: BTreeSet::new(),
            kv_free: pool.kv_slots,
            decode_queue: BTreeSet::new(),
            decode_busy: None,
            kv_samples: vec![(0.0, 0.0)],
            system_samples: vec![(0.0, 0)],
            in_system: 0,
            rejected: Vec::new(),
            pressure: 0.0,
        };

        for r in workload {
            let key = QueueKey {
                priority: priority_of(r, regime, seed),
                arrival: r.arrival,
                id: r.id,
            };
            let record = RequestRecord {
                id: r.id,
                tenant: r.tenant.clone(),
                admitted: false,
                priority: key.priority,
                arrival: r.arrival,
                prefill_start: r.arrival,
                prefill_done: r.arrival,
                kv_admit: r.arrival,
                kv_loaded: r.arrival,
                decode_start: r.arrival,
                decode_done: r.arrival,
                queueing_delay: 0.0,
                sojourn: 0.0,
                assessed_charge: 0.0,
                congestion_charge: 0.0,
                admission_estimate: 0.0,
            };
            engine.requests.insert(
                r.id,
                Pending {
                    request: r.clone(),
                    key,
                    record,
                    prefill_service: r.prefill_tokens / pool.prefill_rate,
                    decode_service: r.decode_tokens / pool.decode_rate,
                },
            );
            engine.events.push(Event {
                time: r.arrival,
                id: r.id,
                kind: EventKind::Arrival,
            });
        }

        while let Some(ev) = engine.events.pop() {
            engine.dispatch(ev);
        }

        let mut records: Vec<RequestRecord> =
            engine.requests.into_values().map(|p| p.record).collect();
        records.sort_by_key(|r| r.id);
        for rec in &mut records {
            if rec.admitted {
                rec.queueing_delay = (rec.prefill_start - rec.arrival)
                    + (rec.kv_admit - rec.prefill_done)
                    + (rec.decode_start - rec.kv_loaded);
                rec.sojourn = rec.decode_done - rec.arrival;
                if let Regime::FlatFcfs { price_per_token } = regime {
                    let tokens = records_tokens(workload, rec.id);
                    rec.assessed_charge = price_per_token * tokens;
                }
            }
        }
        Ok(Trace {
            regime: regime.label().to_string(),
            seed,
            records,
            kv_samples: engine.kv_samples,
            system_samples: engine.system_samples,
            rejected: engine.rejected,
        })
    }

    fn dispatch(&mut self, ev: Event) {
        match ev.kind {
            EventKind::Arrival => self.on_arrival(ev.time, ev.id),
            EventKind::PrefillDone => self.on_prefill_done(ev.time, ev.id),
            EventKind::KvLoaded => self.on_kv_loaded(ev.time, ev.id),
            EventKind::DecodeDone => self.on_decode_done(ev.time, ev.id),
        }
    }

    fn observe_pressure(&mut self) {
        if let Regime::CongestionPriced { smoothing, .. } = self.regime {
            self.pressure = (1.0 - smoothing) * self.pressure + smoothing * self.in_system as f64;
        }
    }

    fn on_arrival(&mut self, now: f64, id: u64) {
        self.observe_pressure();
        let pending = self.requests.get_mut(&id).expect("known request");
        if let Regime::CongestionPriced { latency_price, .. } = self.regime {
            let estimate =
                latency_price * self.pressure * (pending.prefill_service + pending.decode_service);
            pending.record.admission_estimate = estimate;
            if pending.request.declared_surplus < estimate {
                self.rejected.push(id);
                return;
            }
        }
        pending.record.admitted = true;
        let key = pending.key;
        self.in_system += 1;
        self.system_samples.push((now, self.in_system));
        self.prefill_queue.insert(key);
        self.try_start_prefill(now);
    }

    fn try_start_prefill(&mut self, now: f64) {
        if self.prefill_busy.is_some() {
            return;
        }
        let Some(&head) = self.prefill_queue.iter().next() else {
            return;
        };
        self.prefill_queue.remove(&head);
        self.prefill_busy = Some(head.id);
        let pending = self.requests.get_mut(&head.id).expect("known request");
        pending.record.prefill_start = now;
        self.events.push(Event {
            time: now + pending.prefill_service,
            id: head.id,
            kind: EventKind::PrefillDone,
        });
    }

    fn on_prefill_done(&mut self, now: f64, id: u64) {
        let pending = self.requests.get_mut(&id).expect("known request");
        pending.record.prefill_done = now;
        let key = pending.key;
        self.prefill_busy = None;
        self.kv_queue.insert(key);
        self.try_admit_kv(now);
        self.try_start_prefill(now);
    }

    /// Head-of-line admission: grant slots to queue heads while they fit.
    fn try_admit_kv(&mut self, now: f64) {
        while let Some(&head) = self.kv_queue.iter().next() {
            let pending = self.requests.get_mut(&head.id).expect("known request");
            if pending.request.kv_footprint > self.kv_free {
                break;
            }
            self.kv_queue.remove(&head);
            self.kv_free -= pending.request.kv_footprint;
            pending.record.kv_admit = now;
            let load_time = pending.request.kv_footprint / self.pool.kv_bandwidth
                + pending.request.kv_footprint / self.pool.interconnect;
            self.kv_samples
                .push((now, self.pool.kv_slots - self.kv_free));
            self.events.push(Event {
                time: now + load_time,
                id: head.id,
                kind: EventKind::KvLoaded,
            });
        }
    }

    fn on_kv_loaded(&mut self, now: f64, id: u64) {
        let pending = self.requests.get_mut(&id).expect("known request");
        pending.record.kv_loaded = now;
        let key = pending.key;
        self.decode_queue.insert(key);
        self.try_start_decode(now);
    }

    fn try_start_decode(&mut self, now: f64) {
        if self.decode_busy.is_some() {
            return;
        }
        let Some(&head) = self.decode_queue.iter().next() else {
            return;
        };
        self.decode_queue.remove(&head);
        self.decode_busy = Some(head.id);
        let pending = self.requests.get_mut(&head.id).expect("known request");
        pending.record.decode_start = now;
        self.events.push(Event {
            time: now + pending.decode_service,
            id: head.id,
            kind: EventKind::DecodeDone,
        });
    }

    fn on_decode_done(&mut self, now: f64, id: u64) {
        let pending = self.requests.get_mut(&id).expect("known request");
        pending.record.decode_done = now;
        self.decode_busy = None;
        self.kv_free += pending.request.kv_footprint;
        self.kv_samples
            .push((now, self.pool.kv_slots - self.kv_free));
        self.in_system -= 1;
        self.system_samples.push((now, self.in_system));
        self.observe_pressure();
        self.try_admit_kv(now);
        self.try_start_decode(now);
    }
}

fn records_tokens(workload: &[ServingRequest], id: u64) -> f64 {
    workload
        .iter()
        .find(|r| r.id == id)
        .map(|r| r.prefill_tokens + r.decode_tokens)
        .unwrap_or(0.0)
}

fn total_delay_of_others(trace: &Trace, excluded: u64) -> f64 {
    trace
        .records
        .iter()
        .filter(|r| r.id != excluded && r.admitted)
        .map(|r| r.queueing_delay)
        .sum()
}

/// Runs the workload to completion and, under the congestion-priced regime,
/// prices every admitted request at its exact marginal external delay by
/// counterfactual re-simulation.
pub fn simulate(
    workload: &[ServingRequest],
    pool: &ResourcePool,
    regime: &Regime,
    seed: u64,
) -> Result<Trace, SimError> {
    let mut trace = Engine::run(workload, pool, regime, seed)?;
    if let Regime::CongestionPriced { latency_price, .. } = regime {
        let delays = external_delays_against(workload, pool, regime, seed, &trace)?;
        for rec in trace.records.iter_mut().filter(|r| r.admitted) {
            let med = delays.get(&rec.id).copied().unwrap_or(0.0);
            rec.congestion_charge = latency_price * med;
            rec.assessed_charge = rec.congestion_charge;
        }
    }
    Ok(trace)
}

/// Same schedule and timings as [`simulate`], but skips the exact
/// externality pricing pass; congestion charges stay at zero. Intended for
/// regime comparisons that only read the timeline.
pub fn simulate_timing(
    workload: &[ServingRequest],
    pool: &ResourcePool,
    regime: &Regime,
    seed: u64,
) -> Result<Trace, SimError> {
    Engine::run(workload, pool, regime, seed)
}

/// Marginal external delay of every admitted request, computed against one
/// shared base run (one counterfactual simulation per request).
pub fn external_delays(
    workload: &[ServingRequest],
    pool: &ResourcePool,
    regime: &Regime,
    seed: u64,
) -> Result<std::collections::BTreeMap<u64, f64>, SimError> {
    let base = Engine::run(workload, pool, regime, seed)?;
    external_delays_against(workload, pool, regime, seed, &base)
}

fn external_delays_against(
    workload: &[ServingRequest],
    pool: &ResourcePool,
    regime: &Regime,
    seed: u64,
    base: &Trace,
) -> Result<std::collections::BTreeMap<u64, f64>, SimError> {
    let mut out = std::collections::BTreeMap::new();
    for rec in base.records.iter().filter(|r| r.admitted) {
        out.insert(
            rec.id,
            external_delay(workload, pool, regime, rec.id, seed, Some(base))?,
        );
    }
    Ok(out)
}

fn external_delay(
    workload: &[ServingRequest],
    pool: &ResourcePool,
    regime: &Regime,
    id: u64,
    seed: u64,
    base: Option<&Trace>,
) -> Result<f64, SimError> {
    if !workload.iter().any(|r| r.id == id) {
        return Err(SimError::UnknownRequest(id));
    }
    let owned_base;
    let base = match base {
        Some(t) => t,
        None => {
            owned_base = Engine::run(workload, pool, regime, seed)?;
            &owned_base
        }
    };
    let without: Vec<ServingRequest> = workload.iter().filter(|r| r.id != id).cloned().collect();
    let counterfactual = Engine::run(&without, pool, regime, seed)?;
    Ok(total_delay_of_others(base, id) - total_delay_of_others(&counterfactual, id))
}

/// Sum over other requests of the queueing delay this request's presence
/// adds, measured by re-simulating the workload without it at the same seed.
pub fn marginal_external_delay(
    workload: &[ServingRequest],
    pool: &ResourcePool,
    regime: &Regime,
    id: u64,
    seed: u64,
) -> Result<f64, SimError> {
    external_delay(workload, pool, regime, id, seed, None)
}

/// The charge assessed to one request in a trace. The congestion-priced
/// regime prices the externality; the flat regime charges per token; the
/// learned-priority regime assesses nothing and errors.
pub fn congestion_charge(trace: &Trace, id: u64) -> Result<f64, SimError> {
    if trace.regime == "learned_priority" {
        return Err(SimError::NoChargesInRegime {
            regime: trace.regime.clone(),
        });
    }
    trace
        .record(id)
        .map(|r| r.assessed_charge)
        .ok_or(SimError::UnknownRequest(id))
}
