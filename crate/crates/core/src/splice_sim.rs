//! Discrete-event simulation of parallel trajectory splicing.
//!
//! Workers generate segments (one Markov step each) in chosen start states. Completed
//! segments go to a database, and the trajectory grows by splicing any stored segment
//! that starts where it currently ends. Scheduling policies decide which start states
//! to run and with how many resources; wall-clock time per segment follows the
//! [`CostModel`].

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{self, AllocError, AllocatorOptions, ScanStrategy};
use crate::cost_model::CostModel;
use crate::markov::{self, MarkovChain, MarkovError, MaxPOptions, SegmentInventory, TaskProbabilityTable};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("budget must be at least one resource, got {0}")]
    InvalidBudget(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Virtual-end speculation, one resource per task.
    Ve,
    /// Tasks drawn from the probability table in order, one resource each, never paused.
    #[serde(rename = "maxp")]
    MaxP,
    /// Preemptive, probability-blind uniform shares.
    #[serde(rename = "maxp-const")]
    MaxPConst,
    /// Preemptive, `⌊N/w_max⌋` tasks at `w_max`.
    #[serde(rename = "maxp-wmax")]
    MaxPWmax,
    /// Preemptive, throughput-optimal shares over the table.
    #[serde(rename = "maxp-opt")]
    MaxPOpt,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] =
        [PolicyKind::Ve, PolicyKind::MaxP, PolicyKind::MaxPConst, PolicyKind::MaxPWmax, PolicyKind::MaxPOpt];

    pub fn is_preemptive(self) -> bool {
        matches!(self, PolicyKind::MaxPConst | PolicyKind::MaxPWmax | PolicyKind::MaxPOpt)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Ve => "ve",
            PolicyKind::MaxP => "maxp",
            PolicyKind::MaxPConst => "maxp-const",
            PolicyKind::MaxPWmax => "maxp-wmax",
            PolicyKind::MaxPOpt => "maxp-opt",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| SimError::InvalidConfig(format!("unknown policy `{s}`")))
    }
}

/// When preemptive policies rebuild their allocation and `MaxP` refreshes its table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    /// A completed segment leaves its start state, or the trajectory head moves.
    pub on_transition: bool,
    /// Also rebuild when this much WCT has passed since the last rebuild; checked at
    /// completion events.
    pub interval: Option<f64>,
}

impl Default for Trigger {
    fn default() -> Self {
        Trigger { on_transition: true, interval: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    pub budget: f64,
    pub trigger: Trigger,
}

impl Policy {
    pub fn new(kind: PolicyKind, budget: f64) -> Self {
        Policy { kind, budget, trigger: Trigger::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub policy: Policy,
    pub wct_limit: f64,
    pub seed: u64,
    /// Table horizon in segments; defaults to twice the budget.
    pub horizon: Option<usize>,
    pub n_samples: usize,
    pub cutoff: f64,
    /// WCT lost by a task each time its share changes.
    pub preemption_penalty: f64,
    /// Metric samples are taken at `sample_points + 1` evenly spaced times.
    pub sample_points: usize,
    pub initial_state: usize,
}

impl SimConfig {
    pub fn new(policy: Policy, wct_limit: f64, seed: u64) -> Self {
        SimConfig {
            policy,
            wct_limit,
            seed,
            horizon: None,
            n_samples: markov::DEFAULT_SAMPLES,
            cutoff: markov::DEFAULT_CUTOFF,
            preemption_penalty: 0.0,
            sample_points: 200,
            initial_state: 0,
        }
    }

    pub fn table_options(&self) -> TableOptions {
        TableOptions {
            horizon: self.horizon.unwrap_or_else(|| (2.0 * self.policy.budget).ceil() as usize).max(1),
            n_samples: self.n_samples,
            cutoff: self.cutoff,
            max_entries: None,
        }
    }

    fn validate(&self, chain: &MarkovChain) -> Result<()> {
        let b = self.policy.budget;
        if !(b.is_finite() && b >= 1.0) {
            return Err(SimError::InvalidBudget(b));
        }
        if !(self.wct_limit.is_finite() && self.wct_limit > 0.0) {
            return Err(SimError::InvalidConfig(format!("wct limit {} must be positive", self.wct_limit)));
        }
        if !(self.preemption_penalty.is_finite() && self.preemption_penalty >= 0.0) {
            return Err(SimError::InvalidConfig("preemption penalty must be non-negative".into()));
        }
        if let Some(i) = self.policy.trigger.interval {
            if !(i.is_finite() && i > 0.0) {
                return Err(SimError::InvalidConfig("trigger interval must be positive".into()));
            }
        }
        if self.n_samples == 0 || self.sample_points == 0 {
            return Err(SimError::InvalidConfig("sample counts must be positive".into()));
        }
        chain.check_state(self.initial_state)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableOptions {
    pub horizon: usize,
    pub n_samples: usize,
    pub cutoff: f64,
    /// Entries beyond what the budget could ever fund are dropped.
    pub max_entries: Option<usize>,
}

pub type TaskId = usize;

/// A segment being generated. Its endpoint is drawn at creation and revealed on
/// completion.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingTask {
    pub id: TaskId,
    pub start_state: usize,
    pub w: f64,
    pub progress: f64,
    endpoint: usize,
    last_update: f64,
    stall_until: f64,
    epoch: u32,
}

impl PendingTask {
    pub fn new(id: TaskId, start_state: usize, endpoint: usize) -> Self {
        PendingTask { id, start_state, w: 0.0, progress: 0.0, endpoint, last_update: 0.0, stall_until: 0.0, epoch: 0 }
    }

    /// WCT still needed at the current share.
    pub fn remaining_time(&self, model: &CostModel) -> f64 {
        if self.w > 0.0 {
            (1.0 - self.progress) * model.time_unchecked(self.w)
        } else {
            f64::INFINITY
        }
    }

    fn catch_up(&mut self, clock: f64, model: &CostModel) {
        if self.w > 0.0 {
            let dt = clock - self.last_update.max(self.stall_until);
            if dt > 0.0 {
                self.progress = (self.progress + dt / model.time_unchecked(self.w)).min(1.0);
            }
        }
        self.last_update = clock;
    }
}

/// Linear progress: `progress += dt / T(w)`, capped at completion.
pub fn advance_task(task: &PendingTask, dt: f64, model: &CostModel) -> PendingTask {
    let mut t = task.clone();
    if t.w > 0.0 && dt > 0.0 {
        t.progress = (t.progress + dt / model.time_unchecked(t.w)).min(1.0);
    }
    t
}

/// Completed, unspliced segments keyed by start state, consumed first-in first-out.
#[derive(Debug, Clone, Default)]
pub struct SegmentDatabase {
    queues: BTreeMap<usize, VecDeque<usize>>,
    len: usize,
}

impl SegmentDatabase {
    pub fn push(&mut self, start: usize, end: usize) {
        self.queues.entry(start).or_default().push_back(end);
        self.len += 1;
    }

    fn pop(&mut self, start: usize) -> Option<usize> {
        let q = self.queues.get_mut(&start)?;
        let end = q.pop_front();
        if q.is_empty() {
            self.queues.remove(&start);
        }
        if end.is_some() {
            self.len -= 1;
        }
        end
    }

    pub fn count(&self, start: usize) -> usize {
        self.queues.get(&start).map_or(0, VecDeque::len)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &VecDeque<usize>)> {
        self.queues.iter().map(|(&k, q)| (k, q))
    }
}

/// The simulated world.
#[derive(Debug, Clone)]
pub struct SimState {
    pub clock: f64,
    pub head: usize,
    pub database: SegmentDatabase,
    tasks: Vec<PendingTask>,
    /// Unfinished task ids per start state, in creation order.
    active: BTreeMap<usize, Vec<TaskId>>,
    running: BTreeSet<TaskId>,
    pub spliced: u64,
    /// Spliced segments that changed the head state.
    pub escapes: u64,
    pub completed: u64,
}

impl SimState {
    pub fn new(head: usize) -> Self {
        SimState {
            clock: 0.0,
            head,
            database: SegmentDatabase::default(),
            tasks: Vec::new(),
            active: BTreeMap::new(),
            running: BTreeSet::new(),
            spliced: 0,
            escapes: 0,
            completed: 0,
        }
    }

    /// Unfinished tasks, running or paused, grouped by start state.
    pub fn pending(&self) -> impl Iterator<Item = &PendingTask> {
        self.active.values().flatten().map(|&id| &self.tasks[id])
    }

    pub fn task(&self, id: TaskId) -> &PendingTask {
        &self.tasks[id]
    }

    /// Total share held by running tasks.
    pub fn running_resources(&self) -> f64 {
        self.running.iter().map(|&id| self.tasks[id].w).sum()
    }

    pub fn running_count(&self) -> usize {
        self.running.len()
    }

    fn set_w(&mut self, id: TaskId, w: f64) {
        self.tasks[id].w = w;
        if w > 0.0 {
            self.running.insert(id);
        } else {
            self.running.remove(&id);
        }
    }

    /// Adds a paused task; returns its id.
    pub fn add_task(&mut self, start_state: usize, endpoint: usize) -> TaskId {
        let id = self.tasks.len();
        let mut t = PendingTask::new(id, start_state, endpoint);
        t.last_update = self.clock;
        self.tasks.push(t);
        self.active.entry(start_state).or_default().push(id);
        id
    }

    fn finish(&mut self, id: TaskId) -> (usize, usize) {
        self.set_w(id, 0.0);
        let t = &mut self.tasks[id];
        t.progress = 1.0;
        t.epoch += 1;
        let (s, e) = (t.start_state, t.endpoint);
        if let Some(ids) = self.active.get_mut(&s) {
            ids.retain(|&x| x != id);
            if ids.is_empty() {
                self.active.remove(&s);
            }
        }
        self.database.push(s, e);
        self.completed += 1;
        (s, e)
    }

    fn inventory(&self, with_pending: bool) -> SegmentInventory {
        let mut inv = SegmentInventory::new();
        for (k, q) in self.database.iter() {
            for &e in q {
                inv.add_known(k, e);
            }
        }
        if with_pending {
            for (&k, ids) in &self.active {
                inv.add_pending(k, ids.len() as u32);
            }
        }
        inv
    }
}

/// Splices stored segments onto the trajectory until none starts at the head.
pub fn splice_available(sim: &mut SimState) -> u64 {
    let mut n = 0;
    while let Some(end) = sim.database.pop(sim.head) {
        if end != sim.head {
            sim.escapes += 1;
        }
        sim.head = end;
        n += 1;
    }
    sim.spliced += n;
    n
}

/// Start states for `idle_slots` new tasks under virtual-end speculation.
///
/// Pending tasks get sampled virtual endpoints; the trajectory is extended virtually
/// through the database and those segments, and each new task is placed where the
/// virtual trajectory stops. The new task's own virtual endpoint is then sampled and the
/// walk continues from it.
pub fn ve_schedule<R: Rng + ?Sized>(
    sim: &SimState,
    chain: &MarkovChain,
    idle_slots: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut virt: HashMap<usize, VecDeque<usize>> = HashMap::new();
    for (&k, ids) in &sim.active {
        let q = virt.entry(k).or_default();
        for _ in ids {
            q.push_back(chain.sample_step(k, rng));
        }
    }
    let mut used: HashMap<usize, usize> = HashMap::new();
    let mut pos = sim.head;
    let mut out = Vec::with_capacity(idle_slots);
    while out.len() < idle_slots {
        loop {
            if let Some(q) = sim.database.queues.get(&pos) {
                let u = used.entry(pos).or_default();
                if *u < q.len() {
                    *u += 1;
                    pos = q[*u - 1];
                    continue;
                }
            }
            if let Some(e) = virt.get_mut(&pos).and_then(VecDeque::pop_front) {
                pos = e;
                continue;
            }
            break;
        }
        out.push(pos);
        pos = chain.sample_step(pos, rng);
    }
    out
}

/// A scheduling decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Directive {
    Start { state: usize, w: f64 },
    /// Sets a pending task's share; `w = 0` pauses it with its progress kept.
    SetShare { task: TaskId, w: f64 },
}

#[derive(Debug, Clone)]
pub struct Schedule {
    pub table: TaskProbabilityTable,
    pub directives: Vec<Directive>,
}

/// Builds the consumption-probability table for the current state of the world.
/// Preemptive policies treat pending tasks as candidates, so only stored segments count
/// as inventory; `MaxP` also counts pending tasks.
pub fn build_table(
    sim: &SimState,
    chain: &MarkovChain,
    kind: PolicyKind,
    opts: &TableOptions,
    seed: u64,
) -> Result<TaskProbabilityTable> {
    let inv = sim.inventory(!kind.is_preemptive());
    let mopts = MaxPOptions { cutoff: opts.cutoff, max_entries: opts.max_entries, ..MaxPOptions::new(opts.horizon) };
    Ok(markov::maxp_monte_carlo(chain, sim.head, &inv, &mopts, opts.n_samples, seed)?)
}

/// Probability-driven scheduling: builds the table and turns it into directives.
pub fn maxp_schedule(
    sim: &SimState,
    chain: &MarkovChain,
    model: &CostModel,
    policy: &Policy,
    opts: &TableOptions,
    seed: u64,
) -> Result<Schedule> {
    let table = build_table(sim, chain, policy.kind, opts, seed)?;
    let directives = plan_from_table(sim, &table, model, policy)?;
    Ok(Schedule { table, directives })
}

/// Shares per table entry under the given policy.
pub fn table_shares(table: &TaskProbabilityTable, model: &CostModel, policy: &Policy) -> Result<Vec<f64>> {
    let Some(dist) = table.to_distribution() else {
        return Ok(vec![0.0; table.len()]);
    };
    let n = policy.budget;
    let mut w = match policy.kind {
        PolicyKind::Ve | PolicyKind::MaxP => {
            let slots = (n.floor() as usize).min(dist.len());
            let mut w = vec![0.0; dist.len()];
            w[..slots].iter_mut().for_each(|x| *x = 1.0);
            w
        }
        PolicyKind::MaxPConst => allocator::naive_allocation(&dist, n, model)?.w,
        PolicyKind::MaxPWmax => {
            let w_max = model.w_max();
            let (count, share) = if n >= w_max { ((n / w_max).floor() as usize, w_max) } else { (1, n) };
            let mut w = vec![0.0; dist.len()];
            w.iter_mut().take(count).for_each(|x| *x = share);
            w
        }
        PolicyKind::MaxPOpt => {
            let opts = AllocatorOptions { scan: ScanStrategy::Unimodal, ..AllocatorOptions::default() };
            allocator::optimal_allocation_with(&dist, n, model, &opts)?.w
        }
    };
    w.resize(table.len(), 0.0);
    Ok(w)
}

/// Turns a table into directives.
///
/// Non-preemptive `MaxP` starts one task per idle unit slot from the top of the table.
/// Preemptive policies compute shares for every entry; within a state, pending tasks
/// ranked by progress take the funded ordinals in order, surplus tasks are paused, and
/// unmatched funded entries become new tasks.
pub fn plan_from_table(
    sim: &SimState,
    table: &TaskProbabilityTable,
    model: &CostModel,
    policy: &Policy,
) -> Result<Vec<Directive>> {
    if !policy.kind.is_preemptive() {
        let idle = (policy.budget.floor() as usize).saturating_sub(sim.running_count());
        return Ok(table.entries.iter().take(idle).map(|e| Directive::Start { state: e.state, w: 1.0 }).collect());
    }
    let shares = table_shares(table, model, policy)?;
    let mut funded: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut order: Vec<(usize, u32, f64)> =
        table.entries.iter().zip(&shares).filter(|(_, &w)| w > 0.0).map(|(e, &w)| (e.state, e.ordinal, w)).collect();
    order.sort_by_key(|&(s, j, _)| (s, j));
    for (s, _, w) in order {
        funded.entry(s).or_default().push(w);
    }
    let mut states: BTreeSet<usize> = funded.keys().copied().collect();
    states.extend(sim.running.iter().map(|&id| sim.tasks[id].start_state));
    let mut out = Vec::new();
    for state in states {
        let Some(ids) = sim.active.get(&state) else {
            continue;
        };
        let mut ranked: Vec<&PendingTask> = ids.iter().map(|&id| &sim.tasks[id]).collect();
        ranked.sort_by(|a, b| b.progress.total_cmp(&a.progress).then(a.id.cmp(&b.id)));
        let ws = funded.get(&state).map_or(&[][..], Vec::as_slice);
        for (r, t) in ranked.iter().enumerate() {
            let w = ws.get(r).copied().unwrap_or(0.0);
            if w != t.w {
                out.push(Directive::SetShare { task: t.id, w });
            }
        }
    }
    for (&state, ws) in &funded {
        let have = sim.active.get(&state).map_or(0, Vec::len);
        for &w in ws.iter().skip(have) {
            out.push(Directive::Start { state, w });
        }
    }
    // Pauses first so the budget is never exceeded mid-update.
    out.sort_by_key(|d| match d {
        Directive::SetShare { w, .. } if *w == 0.0 => 0,
        _ => 1,
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    /// `(clock_s, spliced)` on the sampling grid.
    pub series: Vec<(f64, u64)>,
    pub spliced: u64,
    pub escapes: u64,
    pub completed: u64,
    pub reallocations: u64,
}

#[derive(PartialEq)]
struct Event(f64, TaskId, u32);

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1)).then(self.2.cmp(&other.2))
    }
}

struct Engine<'a> {
    chain: &'a MarkovChain,
    model: &'a CostModel,
    cfg: SimConfig,
    table_opts: TableOptions,
    sim: SimState,
    heap: BinaryHeap<Reverse<Event>>,
    /// Endpoint stream per start state, shared by all policies for a given seed.
    world: HashMap<usize, ChaCha8Rng>,
    sched: ChaCha8Rng,
    table: Option<TaskProbabilityTable>,
    cursor: usize,
    last_rebuild: f64,
    reallocations: u64,
}

const SCHED_STREAM: u64 = 1;
const WORLD_STREAM_BASE: u64 = 2;

impl<'a> Engine<'a> {
    fn new(chain: &'a MarkovChain, model: &'a CostModel, cfg: SimConfig) -> Self {
        let mut sched = ChaCha8Rng::seed_from_u64(cfg.seed);
        sched.set_stream(SCHED_STREAM);
        // No policy funds more than N / w_lo tasks.
        let fundable = (cfg.policy.budget / model.w_lo()).ceil() as usize;
        Engine {
            chain,
            model,
            table_opts: TableOptions { max_entries: Some(fundable.max(1)), ..cfg.table_options() },
            cfg,
            sim: SimState::new(cfg.initial_state),
            heap: BinaryHeap::new(),
            world: HashMap::new(),
            sched,
            table: None,
            cursor: 0,
            last_rebuild: 0.0,
            reallocations: 0,
        }
    }

    fn spawn(&mut self, state: usize, w: f64) {
        let seed = self.cfg.seed;
        let rng = self.world.entry(state).or_insert_with(|| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(WORLD_STREAM_BASE + state as u64);
            r
        });
        let end = self.chain.sample_step(state, rng);
        let id = self.sim.add_task(state, end);
        self.set_share(id, w, false);
    }

    fn set_share(&mut self, id: TaskId, w: f64, penalize: bool) {
        let clock = self.sim.clock;
        self.sim.tasks[id].catch_up(clock, self.model);
        if w == self.sim.tasks[id].w {
            return;
        }
        self.sim.set_w(id, w);
        let t = &mut self.sim.tasks[id];
        t.epoch += 1;
        if w > 0.0 {
            if penalize && self.cfg.preemption_penalty > 0.0 {
                t.stall_until = clock + self.cfg.preemption_penalty;
            }
            let finish = clock.max(t.stall_until) + t.remaining_time(self.model);
            self.heap.push(Reverse(Event(finish, id, t.epoch)));
        }
    }

    fn apply(&mut self, directives: &[Directive]) {
        for d in directives {
            match *d {
                Directive::Start { state, w } => self.spawn(state, w),
                Directive::SetShare { task, w } => self.set_share(task, w, true),
            }
        }
    }

    fn next_seed(&mut self) -> u64 {
        self.sched.next_u64()
    }

    fn rebuild(&mut self) -> Result<()> {
        let seed = self.next_seed();
        let policy = self.cfg.policy;
        self.reallocations += 1;
        self.last_rebuild = self.sim.clock;
        if policy.kind.is_preemptive() {
            let s = maxp_schedule(&self.sim, self.chain, self.model, &policy, &self.table_opts, seed)?;
            self.apply(&s.directives);
        } else {
            self.table = Some(build_table(&self.sim, self.chain, policy.kind, &self.table_opts, seed)?);
            self.cursor = 0;
        }
        Ok(())
    }

    fn idle_slots(&self) -> usize {
        (self.cfg.policy.budget.floor() as usize).saturating_sub(self.sim.running_count())
    }

    fn fill_from_table(&mut self) -> Result<()> {
        let mut idle = self.idle_slots();
        let mut refreshed = false;
        while idle > 0 {
            let next = self.table.as_ref().and_then(|t| t.entries.get(self.cursor)).map(|e| e.state);
            match next {
                Some(state) => {
                    self.cursor += 1;
                    self.spawn(state, 1.0);
                    idle -= 1;
                }
                None if !refreshed => {
                    refreshed = true;
                    self.rebuild()?;
                }
                None => {
                    let head = self.sim.head;
                    for _ in 0..idle {
                        self.spawn(head, 1.0);
                    }
                    idle = 0;
                }
            }
        }
        Ok(())
    }

    fn schedule(&mut self, trigger: bool, completed: &[(usize, f64)]) -> Result<()> {
        match self.cfg.policy.kind {
            PolicyKind::Ve => {
                let idle = self.idle_slots();
                if idle > 0 {
                    let states = ve_schedule(&self.sim, self.chain, idle, &mut self.sched);
                    for s in states {
                        self.spawn(s, 1.0);
                    }
                }
            }
            PolicyKind::MaxP => {
                if trigger || self.table.is_none() {
                    self.rebuild()?;
                }
                self.fill_from_table()?;
            }
            _ => {
                if trigger {
                    self.rebuild()?;
                } else {
                    for &(state, w) in completed {
                        self.replace(state, w);
                    }
                }
            }
        }
        Ok(())
    }

    /// Hands a finished task's share to the most advanced paused task in the same state,
    /// or to a new one.
    fn replace(&mut self, state: usize, w: f64) {
        let paused = self.sim.active.get(&state).and_then(|ids| {
            ids.iter()
                .map(|&id| &self.sim.tasks[id])
                .filter(|t| t.w == 0.0)
                .max_by(|a, b| a.progress.total_cmp(&b.progress).then(b.id.cmp(&a.id)))
                .map(|t| t.id)
        });
        match paused {
            Some(id) => self.set_share(id, w, true),
            None => self.spawn(state, w),
        }
    }

    fn next_event_time(&mut self) -> Option<f64> {
        while let Some(Reverse(Event(t, id, epoch))) = self.heap.peek() {
            if self.sim.tasks[*id].epoch == *epoch {
                return Some(*t);
            }
            self.heap.pop();
        }
        None
    }

    fn run(mut self) -> Result<SimOutcome> {
        let limit = self.cfg.wct_limit;
        let dt = limit / self.cfg.sample_points as f64;
        let mut series = Vec::with_capacity(self.cfg.sample_points + 1);
        let mut grid = 0usize;
        self.schedule(true, &[])?;
        while let Some(t) = self.next_event_time() {
            if t > limit {
                break;
            }
            while grid <= self.cfg.sample_points && (grid as f64) * dt < t {
                series.push((grid as f64 * dt, self.sim.spliced));
                grid += 1;
            }
            self.sim.clock = t;
            let mut batch = Vec::new();
            while let Some(Reverse(Event(te, id, epoch))) = self.heap.peek() {
                if *te != t {
                    break;
                }
                let (id, epoch) = (*id, *epoch);
                self.heap.pop();
                if self.sim.tasks[id].epoch == epoch {
                    batch.push(id);
                }
            }
            batch.sort_unstable();
            let mut transition = false;
            let mut completed = Vec::with_capacity(batch.len());
            for id in batch {
                let w = self.sim.tasks[id].w;
                let (s, e) = self.sim.finish(id);
                transition |= s != e;
                completed.push((s, w));
            }
            let head = self.sim.head;
            splice_available(&mut self.sim);
            let trigger = self.cfg.policy.trigger;
            let fired = (trigger.on_transition && (transition || head != self.sim.head))
                || trigger.interval.is_some_and(|i| t - self.last_rebuild >= i);
            self.schedule(fired, &completed)?;
        }
        while grid <= self.cfg.sample_points {
            series.push((grid as f64 * dt, self.sim.spliced));
            grid += 1;
        }
        Ok(SimOutcome {
            series,
            spliced: self.sim.spliced,
            escapes: self.sim.escapes,
            completed: self.sim.completed,
            reallocations: self.reallocations,
        })
    }
}

/// Runs one replica until `wct_limit` and returns the spliced-segment series.
pub fn run_simulation(chain: &MarkovChain, model: &CostModel, cfg: &SimConfig) -> Result<SimOutcome> {
    cfg.validate(chain)?;
    Engine::new(chain, model, *cfg).run()
}

/// Pointwise mean of several series sampled on the same grid.
pub fn ensemble_mean(outcomes: &[SimOutcome]) -> Vec<(f64, f64)> {
    let Some(first) = outcomes.first() else {
        return Vec::new();
    };
    let n = outcomes.len() as f64;
    first
        .series
        .iter()
        .enumerate()
        .map(|(i, &(t, _))| (t, outcomes.iter().map(|o| o.series[i].1 as f64).sum::<f64>() / n))
        .collect()
}
