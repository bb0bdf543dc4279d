//! Event-driven simulation of the multiclass processor-sharing queue with
//! probabilistic feedback. Jobs pre-sample their whole route and every
//! per-visit service at creation, so the total-work and remaining-visit
//! descriptors are measurable at arrival time. Completions are scheduled
//! in cumulative-service coordinates: a visit finishes when the shared
//! service clock S reaches its threshold, which makes each event O(log n).

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measures::PointMeasure;
use crate::model::{QueueModel, RoutingMatrix};

pub const DEFAULT_EVENT_CAP: u64 = 100_000_000;
pub const ROUTE_CAP: usize = 1_000_000;

/// One job: entry class, pre-sampled route to absorption, per-visit
/// services and their prefix sums, and the current visit.
#[derive(Debug, Clone)]
pub struct Job {
    pub id: u64,
    pub entry_class: usize,
    pub arrival_time: f64,
    pub route: Vec<usize>,
    pub visit_services: Vec<f64>,
    /// cum_services[i] = visit_services[0..=i] summed.
    pub cum_services: Vec<f64>,
    pub visit_index: usize,
    /// Completion threshold of the current visit in S-coordinates.
    pub threshold: f64,
}

impl Job {
    fn future_after_current(&self) -> f64 {
        self.cum_services[self.route.len() - 1] - self.cum_services[self.visit_index]
    }

    pub fn total_service(&self) -> f64 {
        *self.cum_services.last().unwrap()
    }

    pub fn current_class(&self) -> usize {
        self.route[self.visit_index]
    }

    /// Remaining service of the current visit given the service clock.
    pub fn residual_current(&self, s: f64) -> f64 {
        self.threshold - s
    }
}

/// Markov route from entry class `l` under P until absorption.
pub fn sample_route<R: Rng + ?Sized>(
    l: usize,
    routing: &RoutingMatrix,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let k = routing.k();
    let mut route = vec![l];
    let mut current = l;
    loop {
        if route.len() >= ROUTE_CAP {
            return Err(Error::RouteCapExceeded(ROUTE_CAP));
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = None;
        for j in 0..k {
            acc += routing.entry(current, j);
            if u < acc {
                next = Some(j);
                break;
            }
        }
        match next {
            Some(j) => {
                route.push(j);
                current = j;
            }
            None => return Ok(route),
        }
    }
}

/// Which measure-valued descriptors to record at snapshots.
#[derive(Debug, Clone, Copy, Default)]
pub struct DescriptorSet {
    pub mu: bool,
    pub gamma: bool,
    pub queue: bool,
}

impl DescriptorSet {
    pub fn all() -> Self {
        DescriptorSet {
            mu: true,
            gamma: true,
            queue: true,
        }
    }
}

/// Prescribed initial job for deterministic scenarios: the route and the
/// per-visit services are given instead of sampled.
#[derive(Debug, Clone)]
pub struct InitialJob {
    pub route: Vec<usize>,
    pub services: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub horizon: f64,
    pub snapshot_times: Vec<f64>,
    pub descriptors: DescriptorSet,
    pub seed: u64,
    pub rep: u64,
    pub event_cap: u64,
    pub check_invariants: bool,
    /// When set, replaces the model-driven initial population.
    pub explicit_initial: Option<Vec<InitialJob>>,
}

impl SimOptions {
    pub fn new(horizon: f64, snapshot_times: Vec<f64>, seed: u64) -> Self {
        SimOptions {
            horizon,
            snapshot_times,
            descriptors: DescriptorSet::default(),
            seed,
            rep: 0,
            event_cap: DEFAULT_EVENT_CAP,
            check_invariants: true,
            explicit_initial: None,
        }
    }
}

/// State recorded at one snapshot time.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub z: Vec<u64>,
    pub workload: f64,
    pub s_value: f64,
    pub arrivals: Vec<u64>,
    pub departures: Vec<u64>,
    pub exogenous: Vec<u64>,
    pub total_visits: Vec<u64>,
    pub remaining_visits: Vec<u64>,
    pub mu: Option<Vec<PointMeasure>>,
    pub gamma: Option<PointMeasure>,
    pub queue_desc: Option<Vec<PointMeasure>>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub event_count: u64,
    pub invariant_violations: u64,
    pub seed: u64,
    pub rep: u64,
    pub horizon: f64,
}

impl Trajectory {
    pub fn k(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.z.len())
    }
}

#[derive(Clone, Copy, Debug)]
struct HeapKey {
    threshold: f64,
    id: u64,
}

impl PartialEq for HeapKey {
    fn eq(&self, other: &Self) -> bool {
        self.threshold == other.threshold && self.id == other.id
    }
}
impl Eq for HeapKey {}
impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse for earliest threshold first,
        // ties broken by ascending job id.
        other
            .threshold
            .total_cmp(&self.threshold)
            .then_with(|| other.id.cmp(&self.id))
    }
}

enum StreamPurpose {
    Interarrival = 0,
    Service = 1,
    Route = 2,
    InitialService = 3,
}

fn stream(seed: u64, rep: u64, purpose: StreamPurpose, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((rep << 20) | ((purpose as u64) << 8) | class as u64);
    rng
}

struct Engine<'m> {
    model: &'m QueueModel,
    opts: &'m SimOptions,
    t: f64,
    s: f64,
    live: HashMap<u64, Job>,
    heap: BinaryHeap<HeapKey>,
    next_job_id: u64,
    next_arrival: Vec<f64>,
    arrivals: Vec<u64>,
    departures: Vec<u64>,
    exogenous: Vec<u64>,
    /// phi[k][l]: jobs moved l -> k so far.
    phi: Vec<Vec<u64>>,
    z: Vec<u64>,
    z0: Vec<u64>,
    total_visits: Vec<u64>,
    remaining_visits: Vec<u64>,
    /// Work added minus busy time: incremental workload.
    w_incremental: f64,
    /// Sum over live jobs of threshold + future work after current visit.
    y_sum: f64,
    event_count: u64,
    violations: u64,
    svc_rngs: Vec<ChaCha8Rng>,
    init_rngs: Vec<ChaCha8Rng>,
    route_rngs: Vec<ChaCha8Rng>,
    arr_rngs: Vec<ChaCha8Rng>,
}

impl<'m> Engine<'m> {
    fn new(model: &'m QueueModel, opts: &'m SimOptions) -> Result<Self> {
        let k = model.k;
        let mut eng = Engine {
            model,
            opts,
            t: 0.0,
            s: 0.0,
            live: HashMap::new(),
            heap: BinaryHeap::new(),
            next_job_id: 0,
            next_arrival: vec![f64::INFINITY; k],
            arrivals: vec![0; k],
            departures: vec![0; k],
            exogenous: vec![0; k],
            phi: vec![vec![0; k]; k],
            z: vec![0; k],
            z0: vec![0; k],
            total_visits: vec![0; k],
            remaining_visits: vec![0; k],
            w_incremental: 0.0,
            y_sum: 0.0,
            event_count: 0,
            violations: 0,
            svc_rngs: (0..k)
                .map(|c| stream(opts.seed, opts.rep, StreamPurpose::Service, c))
                .collect(),
            init_rngs: (0..k)
                .map(|c| stream(opts.seed, opts.rep, StreamPurpose::InitialService, c))
                .collect(),
            route_rngs: (0..k)
                .map(|c| stream(opts.seed, opts.rep, StreamPurpose::Route, c))
                .collect(),
            arr_rngs: (0..k)
                .map(|c| stream(opts.seed, opts.rep, StreamPurpose::Interarrival, c))
                .collect(),
        };
        // initial jobs: first visit drawn from nu0, later visits from nu;
        // or a prescribed population when the caller fixed one
        match &opts.explicit_initial {
            Some(jobs) => {
                for ij in jobs {
                    eng.inject_job(ij)?;
                }
            }
            None => {
                for class in 0..k {
                    for _ in 0..model.initial_counts[class] {
                        eng.spawn_job(class, 0.0, true)?;
                    }
                }
            }
        }
        eng.z0 = eng.z.clone();
        // renewal processes start at phase zero: first interarrival has
        // the stationary law of the later ones
        for class in 0..k {
            if model.alpha[class] > 0.0 {
                let draw = model.interarrival[class]
                    .as_ref()
                    .unwrap()
                    .sample(&mut eng.arr_rngs[class]);
                eng.next_arrival[class] = draw;
            }
        }
        Ok(eng)
    }

    fn n_live(&self) -> usize {
        self.live.len()
    }

    fn inject_job(&mut self, ij: &InitialJob) -> Result<()> {
        if ij.route.is_empty()
            || ij.services.len() != ij.route.len()
            || ij.services.iter().any(|&v| !(v > 0.0))
            || ij.route.iter().any(|&c| c >= self.model.k)
        {
            return Err(Error::Validation(
                "explicit initial job needs a nonempty route with matching positive services"
                    .into(),
            ));
        }
        let mut cum_services = Vec::with_capacity(ij.route.len());
        let mut acc = 0.0;
        for &v in &ij.services {
            acc += v;
            cum_services.push(acc);
        }
        for &c in &ij.route {
            self.total_visits[c] += 1;
            self.remaining_visits[c] += 1;
        }
        let id = self.next_job_id;
        self.next_job_id += 1;
        let job = Job {
            id,
            entry_class: ij.route[0],
            arrival_time: 0.0,
            route: ij.route.clone(),
            visit_services: ij.services.clone(),
            cum_services,
            visit_index: 0,
            threshold: self.s + ij.services[0],
        };
        self.z[job.entry_class] += 1;
        self.w_incremental += job.total_service();
        self.y_sum += job.threshold + job.future_after_current();
        self.heap.push(HeapKey {
            threshold: job.threshold,
            id,
        });
        self.live.insert(id, job);
        Ok(())
    }

    fn spawn_job(&mut self, class: usize, arrival_time: f64, initial: bool) -> Result<()> {
        let route = {
            let rng = &mut self.route_rngs[class];
            sample_route(class, &self.model.routing, rng)?
        };
        let mut visit_services = Vec::with_capacity(route.len());
        for (n, &c) in route.iter().enumerate() {
            let v = if n == 0 && initial {
                self.model.initial_services[c].sample(&mut self.init_rngs[c])
            } else {
                self.model.services[c].sample(&mut self.svc_rngs[c])
            };
            visit_services.push(v);
        }
        let mut cum_services = Vec::with_capacity(route.len());
        let mut acc = 0.0;
        for &v in &visit_services {
            acc += v;
            cum_services.push(acc);
        }
        for &c in &route {
            self.total_visits[c] += 1;
            self.remaining_visits[c] += 1;
        }
        let id = self.next_job_id;
        self.next_job_id += 1;
        let threshold = self.s + visit_services[0];
        let job = Job {
            id,
            entry_class: class,
            arrival_time,
            route,
            visit_services,
            cum_services,
            visit_index: 0,
            threshold,
        };
        self.z[class] += 1;
        self.w_incremental += job.total_service();
        self.y_sum += job.threshold + job.future_after_current();
        self.heap.push(HeapKey {
            threshold: job.threshold,
            id,
        });
        self.live.insert(id, job);
        Ok(())
    }

    /// Advance the clock with no event in between; the server works at
    /// unit total rate whenever jobs are present.
    fn advance_to(&mut self, to: f64) {
        let dt = to - self.t;
        debug_assert!(dt >= -1e-12);
        let n = self.n_live();
        if n > 0 && dt > 0.0 {
            self.s += dt / n as f64;
            self.w_incremental -= dt;
        }
        self.t = to;
    }

    fn workload_from_thresholds(&self) -> f64 {
        self.y_sum - self.n_live() as f64 * self.s
    }

    fn check_invariants(&mut self) {
        if !self.opts.check_invariants {
            return;
        }
        let k = self.model.k;
        // Z(t) = Z(0) + A(t) - D(t) holds by counter construction only if
        // the per-class counts match the live set
        let mut live_by_class = vec![0u64; k];
        for job in self.live.values() {
            live_by_class[job.current_class()] += 1;
        }
        let mut ok = true;
        for c in 0..k {
            ok &= self.z[c] + self.departures[c] == self.z0[c] + self.arrivals[c];
            ok &= self.z[c] == live_by_class[c];
            // A_k = E_k + sum_l Phi_k^l(D_l)
            let fed: u64 = self.phi[c].iter().sum();
            ok &= self.arrivals[c] == self.exogenous[c] + fed;
            // D_k = N_k - <1, Q_k>
            ok &= self.departures[c] + self.remaining_visits[c] == self.total_visits[c];
        }
        // <1, gamma> = e.Z: one total-work atom per live job
        let total_z: u64 = self.z.iter().sum();
        ok &= total_z as usize == self.n_live();
        // workload double entry: thresholds vs busy-time integration
        let w_thr = self.workload_from_thresholds();
        let scale = 1.0 + w_thr.abs() + self.s.abs();
        ok &= (w_thr - self.w_incremental).abs() <= 1e-9 * scale;
        if !ok {
            self.violations += 1;
            debug_assert!(ok, "state invariant violated at t = {}", self.t);
        }
    }

    fn pop_completion(&mut self) {
        let key = self.heap.pop().unwrap();
        let mut job = self.live.remove(&key.id).unwrap();
        self.s = key.threshold; // exact, no drift
        let from = job.current_class();
        self.departures[from] += 1;
        self.remaining_visits[from] -= 1;
        self.y_sum -= job.threshold + job.future_after_current();
        if job.visit_index + 1 < job.route.len() {
            job.visit_index += 1;
            let to = job.current_class();
            self.phi[to][from] += 1;
            self.arrivals[to] += 1;
            self.z[to] += 1;
            self.z[from] -= 1;
            job.threshold = self.s + job.visit_services[job.visit_index];
            self.y_sum += job.threshold + job.future_after_current();
            self.heap.push(HeapKey {
                threshold: job.threshold,
                id: job.id,
            });
            self.live.insert(job.id, job);
        } else {
            self.z[from] -= 1;
        }
    }

    fn take_snapshot(&self, want: &DescriptorSet) -> Snapshot {
        let k = self.model.k;
        let mu = want.mu.then(|| {
            let mut per_class: Vec<Vec<(f64, f64)>> = vec![Vec::new(); k];
            for job in self.live.values() {
                per_class[job.current_class()].push((job.residual_current(self.s), 1.0));
            }
            per_class.into_iter().map(PointMeasure::new).collect()
        });
        let gamma = want.gamma.then(|| {
            PointMeasure::new(self.live.values().map(|job| {
                (
                    job.residual_current(self.s) + job.future_after_current(),
                    1.0,
                )
            }))
        });
        let queue_desc = want.queue.then(|| {
            let mut per_class: Vec<Vec<(f64, f64)>> = vec![Vec::new(); k];
            for job in self.live.values() {
                let res = job.residual_current(self.s);
                let base = job.cum_services[job.visit_index];
                for n in job.visit_index..job.route.len() {
                    per_class[job.route[n]].push((res + job.cum_services[n] - base, 1.0));
                }
            }
            per_class.into_iter().map(PointMeasure::new).collect()
        });
        Snapshot {
            t: self.t,
            z: self.z.clone(),
            workload: self.workload_from_thresholds(),
            s_value: self.s,
            arrivals: self.arrivals.clone(),
            departures: self.departures.clone(),
            exogenous: self.exogenous.clone(),
            total_visits: self.total_visits.clone(),
            remaining_visits: self.remaining_visits.clone(),
            mu,
            gamma,
            queue_desc,
        }
    }

    fn run(&mut self) -> Result<Vec<Snapshot>> {
        let mut snaps = self.opts.snapshot_times.clone();
        snaps.sort_by(f64::total_cmp);
        for &ts in &snaps {
            if ts > self.opts.horizon + 1e-12 {
                return Err(Error::Validation(format!(
                    "snapshot time {ts} beyond horizon {}",
                    self.opts.horizon
                )));
            }
        }
        let mut snap_idx = 0usize;
        let mut out = Vec::with_capacity(snaps.len());
        loop {
            let t_complete = match self.heap.peek() {
                Some(key) if self.n_live() > 0 => {
                    self.t + (key.threshold - self.s).max(0.0) * self.n_live() as f64
                }
                _ => f64::INFINITY,
            };
            let (mut t_arrival, mut arr_class) = (f64::INFINITY, usize::MAX);
            for (c, &ta) in self.next_arrival.iter().enumerate() {
                if ta < t_arrival {
                    t_arrival = ta;
                    arr_class = c;
                }
            }
            let t_event = t_complete.min(t_arrival);
            // snapshots strictly before the next event; at a tie the event
            // (a completion first) is processed before sampling
            while snap_idx < snaps.len() && snaps[snap_idx] < t_event {
                let ts = snaps[snap_idx];
                self.advance_to(ts);
                out.push(self.take_snapshot(&self.opts.descriptors));
                snap_idx += 1;
            }
            if t_event > self.opts.horizon || t_event.is_infinite() {
                // snapshots at or beyond the last event are already done
                while snap_idx < snaps.len() {
                    let ts = snaps[snap_idx];
                    self.advance_to(ts);
                    out.push(self.take_snapshot(&self.opts.descriptors));
                    snap_idx += 1;
                }
                break;
            }
            self.event_count += 1;
            if self.event_count > self.opts.event_cap {
                return Err(Error::EventCapExceeded(self.opts.event_cap));
            }
            if t_complete <= t_arrival {
                self.advance_to(t_complete);
                self.pop_completion();
            } else {
                self.advance_to(t_arrival);
                self.exogenous[arr_class] += 1;
                self.arrivals[arr_class] += 1;
                self.spawn_job(arr_class, t_arrival, false)?;
                let draw = self.model.interarrival[arr_class]
                    .as_ref()
                    .unwrap()
                    .sample(&mut self.arr_rngs[arr_class]);
                self.next_arrival[arr_class] = self.t + draw;
            }
            self.check_invariants();
        }
        Ok(out)
    }
}

/// Exact event-driven PS dynamics from time 0 to the horizon.
pub fn simulate(model: &QueueModel, opts: &SimOptions) -> Result<Trajectory> {
    model.validate()?;
    if !(opts.horizon > 0.0) {
        return Err(Error::Validation("horizon must be positive".into()));
    }
    let mut eng = Engine::new(model, opts)?;
    let snapshots = eng.run()?;
    Ok(Trajectory {
        snapshots,
        event_count: eng.event_count,
        invariant_violations: eng.violations,
        seed: opts.seed,
        rep: opts.rep,
        horizon: opts.horizon,
    })
}

/// Independent replications with per-rep derived streams. Results are
/// ordered by replication index, so the output is bitwise deterministic
/// for a fixed base seed regardless of the worker count. Per-replication
/// failures are reported, not fatal.
pub fn replicate(
    model: &QueueModel,
    base: &SimOptions,
    n_reps: u64,
) -> Vec<Result<Trajectory>> {
    (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let opts = SimOptions {
                rep,
                ..base.clone()
            };
            simulate(model, &opts)
        })
        .collect()
}

/// Workload samples at each snapshot across successful replications:
/// out[snapshot_index][rep].
pub fn workload_samples(trajectories: &[Trajectory]) -> Vec<Vec<f64>> {
    let n_snap = trajectories.first().map_or(0, |t| t.snapshots.len());
    let mut out = vec![Vec::with_capacity(trajectories.len()); n_snap];
    for traj in trajectories {
        for (i, s) in traj.snapshots.iter().enumerate() {
            out[i].push(s.workload);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{k2_exp_fixture, mm1_fixture};
    use crate::model::{derived_params, QueueModel, ServiceSpec};
    use nalgebra::DMatrix;

    fn no_arrivals_k1() -> QueueModel {
        QueueModel {
            k: 1,
            alpha: vec![0.0],
            interarrival: vec![None],
            services: vec![ServiceSpec::exponential(1.0)],
            routing: crate::model::RoutingMatrix::zeros(1),
            initial_counts: vec![0],
            initial_services: vec![ServiceSpec::exponential(1.0)],
            theta: 0.5,
        }
    }

    #[test]
    fn empty_system_stays_empty() {
        let m = no_arrivals_k1();
        let opts = SimOptions::new(10.0, vec![0.0, 5.0, 10.0], 3);
        let traj = simulate(&m, &opts).unwrap();
        assert_eq!(traj.event_count, 0);
        for s in &traj.snapshots {
            assert_eq!(s.z, vec![0]);
            assert_eq!(s.s_value, 0.0);
            assert_eq!(s.workload, 0.0);
            assert_eq!(s.arrivals, vec![0]);
        }
    }

    #[test]
    fn single_job_full_capacity() {
        let m = no_arrivals_k1();
        let v = 1.75;
        let opts = SimOptions {
            descriptors: DescriptorSet::all(),
            explicit_initial: Some(vec![InitialJob {
                route: vec![0],
                services: vec![v],
            }]),
            ..SimOptions::new(3.0, vec![0.0, 1.0, 2.0], 11)
        };
        let traj = simulate(&m, &opts).unwrap();
        // alone, the job is served at full rate: S(t) = t until t = v
        assert_eq!(traj.snapshots[0].z, vec![1]);
        assert_eq!(traj.snapshots[1].s_value, 1.0);
        assert_eq!(traj.snapshots[2].z, vec![0]);
        assert_eq!(traj.event_count, 1);
        assert!((traj.snapshots[1].workload - (v - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn two_initial_jobs_hand_computed() {
        // K = 1, services 1 and 2, no arrivals: with equal sharing the
        // first departure is at t = 2, the second at t = 3.
        let m = no_arrivals_k1();
        let opts = SimOptions {
            descriptors: DescriptorSet::all(),
            explicit_initial: Some(vec![
                InitialJob {
                    route: vec![0],
                    services: vec![1.0],
                },
                InitialJob {
                    route: vec![0],
                    services: vec![2.0],
                },
            ]),
            ..SimOptions::new(3.5, vec![0.0, 1.0, 1.999, 2.5, 3.1], 5)
        };
        let traj = simulate(&m, &opts).unwrap();
        assert_eq!(traj.invariant_violations, 0);
        let snaps = &traj.snapshots;
        // W(0) = 3 and decreases at unit rate while busy
        assert!((snaps[0].workload - 3.0).abs() < 1e-12);
        assert!((snaps[1].workload - 2.0).abs() < 1e-12);
        assert!((snaps[2].workload - (3.0 - 1.999)).abs() < 1e-9);
        // first departure at exactly t = 2 (z drops to 1), second at t = 3
        assert_eq!(snaps[2].z, vec![2]);
        assert_eq!(snaps[3].z, vec![1]);
        assert_eq!(snaps[4].z, vec![0]);
        assert!((snaps[3].workload - 0.5).abs() < 1e-12);
    }

    #[test]
    fn route_zero_feedback_is_singleton() {
        let routing = crate::model::RoutingMatrix::zeros(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for l in 0..3 {
            assert_eq!(sample_route(l, &routing, &mut rng).unwrap(), vec![l]);
        }
    }

    #[test]
    fn route_mean_visits_match_q() {
        let m = k2_exp_fixture();
        let dp = derived_params(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let reps = 200_000usize;
        for l in 0..2 {
            let mut counts = vec![0u64; 2];
            for _ in 0..reps {
                for c in sample_route(l, &m.routing, &mut rng).unwrap() {
                    counts[c] += 1;
                }
            }
            for k in 0..2 {
                let mean = counts[k] as f64 / reps as f64;
                let want = dp.q[(k, l)];
                // crude 5-sigma bound with variance <= Q_kl (geometric-ish)
                let se = (want.max(0.05) / reps as f64).sqrt();
                assert!(
                    (mean - want).abs() < 5.0 * se + 1e-3,
                    "l={l} k={k}: {mean} vs {want}"
                );
            }
        }
    }

    #[test]
    fn near_closed_routing_hits_route_cap() {
        let routing = crate::model::RoutingMatrix::new(DMatrix::from_row_slice(
            1,
            1,
            &[0.999_999_9],
        ))
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut hit = false;
        for _ in 0..50 {
            if matches!(
                sample_route(0, &routing, &mut rng),
                Err(Error::RouteCapExceeded(_))
            ) {
                hit = true;
                break;
            }
        }
        assert!(hit, "route cap never triggered at survival 1-1e-7");
    }

    #[test]
    fn descriptor_hand_example() {
        // single live job, route [0, 1], residual 0.4 on the first visit,
        // second visit service 1.0
        let m = k2_exp_fixture();
        let opts = SimOptions::new(1.0, vec![], 1);
        let mut eng = Engine::new(&m, &opts).unwrap();
        let job = Job {
            id: 0,
            entry_class: 0,
            arrival_time: 0.0,
            route: vec![0, 1],
            visit_services: vec![0.4, 1.0],
            cum_services: vec![0.4, 1.4],
            visit_index: 0,
            threshold: 0.4,
        };
        eng.live.insert(0, job);
        eng.z = vec![1, 0];
        let snap = eng.take_snapshot(&DescriptorSet::all());
        let mu = snap.mu.unwrap();
        assert_eq!(mu[0].atoms(), &[(0.4, 1.0)]);
        assert!(mu[1].is_zero());
        let gamma = snap.gamma.unwrap();
        assert_eq!(gamma.atoms(), &[(1.4, 1.0)]);
        let q = snap.queue_desc.unwrap();
        assert_eq!(q[0].atoms(), &[(0.4, 1.0)]);
        assert_eq!(q[1].atoms(), &[(1.4, 1.0)]);
    }

    #[test]
    fn conservation_on_fixture_run() {
        let m = k2_exp_fixture();
        let opts = SimOptions {
            descriptors: DescriptorSet::all(),
            ..SimOptions::new(200.0, (0..=20).map(|i| i as f64 * 10.0).collect(), 97)
        };
        let traj = simulate(&m, &opts).unwrap();
        assert_eq!(traj.invariant_violations, 0);
        assert!(traj.event_count > 250, "events: {}", traj.event_count);
        for s in &traj.snapshots {
            // remaining visits recounted from the live descriptors
            if let Some(q) = &s.queue_desc {
                for (k, qk) in q.iter().enumerate() {
                    assert_eq!(qk.atoms().len() as u64, s.remaining_visits[k]);
                }
            }
            if let Some(g) = &s.gamma {
                let total: u64 = s.z.iter().sum();
                assert_eq!(g.atoms().len() as u64, total);
            }
        }
    }

    #[test]
    fn replications_are_deterministic() {
        let m = k2_exp_fixture();
        let base = SimOptions::new(50.0, vec![25.0, 50.0], 1234);
        let a = replicate(&m, &base, 4);
        let b = replicate(&m, &base, 4);
        for (ra, rb) in a.iter().zip(&b) {
            let (ta, tb) = (ra.as_ref().unwrap(), rb.as_ref().unwrap());
            assert_eq!(ta.event_count, tb.event_count);
            for (sa, sb) in ta.snapshots.iter().zip(&tb.snapshots) {
                assert_eq!(sa.workload, sb.workload);
                assert_eq!(sa.z, sb.z);
            }
        }
        // single replication equals simulate with rep 0
        let lone = simulate(&m, &SimOptions { rep: 0, ..base.clone() }).unwrap();
        assert_eq!(lone.event_count, a[0].as_ref().unwrap().event_count);
    }
}
