//! Discrete-event simulation of a team of asynchronous search agents.
//!
//! Each agent loops: finish a sensing action, broadcast the measurement,
//! fold every measurement it has received into its own model, pick the next
//! action from that model alone, start it. Teammates' measurements travel
//! over a lossy channel and never make an agent wait. Events are ordered by
//! `(time, insertion sequence)`, so a trial is a pure function of its seed.
//!
//! Randomness comes from independent ChaCha streams of the trial seed: one
//! for the ground truth, one for the channel, and per agent one each for
//! action choice, sensing noise and durations. Two methods run on the same
//! seed therefore see the same targets, and random-action methods the same
//! action sequence.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::baseline::{lu_estimate, lu_recovered_support, lu_step, LuState};
use crate::config::{DurationModel, ExperimentConfig, InferenceKind, PolicyKind};
use crate::environment::{make_ground_truth, sense, GroundTruth, Measurement};
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Pose};
use crate::inference::{initial_belief, recovered_support, unik_step_in_place, Belief};
use crate::policy::{random_action, select_action, ActionSpace};

const TRUTH_STREAM: u64 = 0;
const COMM_STREAM: u64 = 1;
const STREAMS_PER_AGENT: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Ground truth drawn from the trial seed's truth stream.
pub fn trial_truth(config: &ExperimentConfig, seed: u64) -> Result<GroundTruth> {
    make_ground_truth(config.grid()?, config.k, &mut stream(seed, TRUTH_STREAM))
}

#[derive(Clone, Debug)]
pub enum AgentModel {
    Unik(Belief),
    Lu(LuState),
}

impl AgentModel {
    fn new(config: &ExperimentConfig, grid: GridSpec) -> Result<Self> {
        Ok(match config.inference {
            InferenceKind::Unik => AgentModel::Unik(initial_belief(grid, config.prior_var)?),
            InferenceKind::Lu => AgentModel::Lu(LuState::new(config.c_lu())?),
        })
    }

    fn apply(&mut self, m: &Measurement, config: &ExperimentConfig, grid: GridSpec) -> Result<()> {
        match self {
            AgentModel::Unik(b) => unik_step_in_place(b, m, &config.noise, config.lambda, grid),
            AgentModel::Lu(s) => lu_step(s, m, &config.noise, grid),
        }
    }

    pub fn recovered_support(&self, config: &ExperimentConfig, grid: GridSpec) -> BTreeSet<usize> {
        match self {
            AgentModel::Unik(b) => recovered_support(b, config.decision_threshold),
            AgentModel::Lu(s) => lu_recovered_support(s, grid, config.lu_density_fraction),
        }
    }

    /// Posterior mean for UnIK, summed track density for LU.
    pub fn estimate(&self, grid: GridSpec) -> Vec<f64> {
        match self {
            AgentModel::Unik(b) => b.mean.iter().copied().collect(),
            AgentModel::Lu(s) => lu_estimate(s, grid),
        }
    }
}

pub struct AgentState {
    pub id: usize,
    /// Every measurement this agent holds, own and received, in arrival
    /// order.
    pub log: Vec<Measurement>,
    /// Prefix of `log` already folded into `model`.
    pub applied: usize,
    seen: HashSet<(usize, u64)>,
    pub model: AgentModel,
    pub busy_until: f64,
    pub own_count: u64,
    pub inference_passes: usize,
    pub selections: usize,
    current: usize,
    action_rng: ChaCha8Rng,
    sense_rng: ChaCha8Rng,
    duration_rng: ChaCha8Rng,
}

impl AgentState {
    fn new(id: usize, config: &ExperimentConfig, grid: GridSpec, seed: u64) -> Result<Self> {
        let base = 2 + STREAMS_PER_AGENT * id as u64;
        Ok(Self {
            id,
            log: Vec::new(),
            applied: 0,
            seen: HashSet::new(),
            model: AgentModel::new(config, grid)?,
            busy_until: 0.0,
            own_count: 0,
            inference_passes: 0,
            selections: 0,
            current: 0,
            action_rng: stream(seed, base),
            sense_rng: stream(seed, base + 1),
            duration_rng: stream(seed, base + 2),
        })
    }

    fn receive(&mut self, m: Measurement) {
        if self.seen.insert(m.key()) {
            self.log.push(m);
        }
    }

    fn apply_pending(&mut self, config: &ExperimentConfig, grid: GridSpec) -> Result<()> {
        for m in &self.log[self.applied..] {
            self.model.apply(m, config, grid)?;
        }
        self.applied = self.log.len();
        self.inference_passes += 1;
        Ok(())
    }

    fn choose(&mut self, config: &ExperimentConfig, space: &ActionSpace) -> Result<usize> {
        self.selections += 1;
        let index = match (config.policy, &self.model) {
            (PolicyKind::Random, _) => random_action(space, &mut self.action_rng)?,
            (PolicyKind::Ts, AgentModel::Unik(b)) => select_action(
                b,
                space,
                &config.noise,
                config.lambda,
                &mut self.action_rng,
                config.reward_mode,
            )?,
            (PolicyKind::Ts, AgentModel::Lu(_)) => {
                return Err(Error::config("the ts policy requires unik inference"));
            }
        };
        self.current = index;
        Ok(index)
    }

    fn duration(&mut self, model: DurationModel) -> f64 {
        match model {
            DurationModel::Fixed { value } => value,
            DurationModel::Uniform { low, high } => self.duration_rng.random_range(low..=high),
            DurationModel::Exponential { mean } => Exp::new(1.0 / mean)
                .expect("validated mean")
                .sample(&mut self.duration_rng),
        }
    }
}

/// True iff some agent's recovered support equals the true support.
pub fn recovery_status(agents: &[AgentState], truth: &GroundTruth, config: &ExperimentConfig, grid: GridSpec) -> bool {
    agents
        .iter()
        .any(|a| a.model.recovered_support(config, grid) == truth.support)
}

#[derive(Debug)]
enum EventKind {
    ActionComplete(usize),
    MessageDelivery(usize, Box<Measurement>),
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap and we want the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    fn push(&mut self, time: f64, kind: EventKind) {
        self.heap.push(Event {
            time,
            seq: self.next_seq,
            kind,
        });
        self.next_seq += 1;
    }
}

/// One completed sensing action.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Team-wide measurement count after this step.
    pub t: usize,
    pub time: f64,
    pub agent: usize,
    pub pose: Pose,
    /// Team recovery status after this step.
    pub recovered: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentSummary {
    pub id: usize,
    pub log_keys: Vec<(usize, u64)>,
    pub applied: usize,
    pub own_count: u64,
    pub inference_passes: usize,
    pub selections: usize,
    pub estimate: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialTrace {
    pub support: Vec<usize>,
    pub steps: Vec<StepRecord>,
    /// First team measurement count at which some agent recovered the
    /// support; `Some(0)` if the prior already does.
    pub recovered_at: Option<usize>,
    pub agents: Vec<AgentSummary>,
}

/// Runs one trial with the truth drawn from `seed`.
pub fn run_episode(config: &ExperimentConfig, space: &ActionSpace, seed: u64) -> Result<TrialTrace> {
    let truth = trial_truth(config, seed)?;
    run_episode_with_truth(config, space, &truth, seed)
}

pub fn run_episode_with_truth(
    config: &ExperimentConfig,
    space: &ActionSpace,
    truth: &GroundTruth,
    seed: u64,
) -> Result<TrialTrace> {
    let grid = config.grid()?;
    if space.grid != grid {
        return Err(Error::domain("action space was built for a different grid"));
    }
    if truth.beta.len() != grid.len() {
        return Err(Error::domain("ground truth does not match the grid"));
    }
    if config.agents == 0 || config.budget == 0 {
        return Err(Error::domain("need at least one agent and one measurement"));
    }
    let mut agents = (0..config.agents)
        .map(|j| AgentState::new(j, config, grid, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut comm_rng = stream(seed, COMM_STREAM);
    let mut queue = EventQueue::default();
    let mut steps = Vec::new();
    let mut t = 0usize;
    let mut now = 0.0;

    let mut recovered_at = recovery_status(&agents, truth, config, grid).then_some(0);
    if recovered_at.is_none() || !config.early_stop {
        for agent in agents.iter_mut() {
            agent.choose(config, space)?;
            agent.busy_until = agent.duration(config.duration);
            queue.push(agent.busy_until, EventKind::ActionComplete(agent.id));
        }
    }
    // per-agent recovery, so the team status needs no full rescan
    let mut solved: Vec<bool> = agents
        .iter()
        .map(|a| a.model.recovered_support(config, grid) == truth.support)
        .collect();

    while let Some(event) = queue.heap.pop() {
        now = event.time;
        let j = match event.kind {
            EventKind::MessageDelivery(to, m) => {
                agents[to].receive(*m);
                continue;
            }
            EventKind::ActionComplete(j) => j,
        };
        t += 1;
        let agent = &mut agents[j];
        let action = space.action(agent.current).clone();
        let y = sense(truth, &action, &config.noise, grid, &mut agent.sense_rng)?;
        let pose = action.pose;
        let m = Measurement::new(action, y, j, agent.own_count)?;
        agent.own_count += 1;
        agent.receive(m.clone());
        for to in (0..config.agents).filter(|&to| to != j) {
            let draw: f64 = comm_rng.random();
            if draw < config.comm.delivery_prob {
                queue.push(now + config.comm.delay, EventKind::MessageDelivery(to, Box::new(m.clone())));
            }
        }

        let agent = &mut agents[j];
        agent.apply_pending(config, grid)?;
        solved[j] = agent.model.recovered_support(config, grid) == truth.support;
        let recovered = solved.iter().any(|&s| s);
        if recovered && recovered_at.is_none() {
            recovered_at = Some(t);
        }
        steps.push(StepRecord {
            t,
            time: now,
            agent: j,
            pose,
            recovered,
        });
        if t >= config.budget || (recovered && config.early_stop) {
            break;
        }
        agent.choose(config, space)?;
        agent.busy_until = now + agent.duration(config.duration);
        queue.push(agent.busy_until, EventKind::ActionComplete(j));
    }

    // messages already due when the trial ends still reach their logs
    while queue.heap.peek().is_some_and(|e| e.time <= now) {
        if let Some(Event {
            kind: EventKind::MessageDelivery(to, m),
            ..
        }) = queue.heap.pop()
        {
            agents[to].receive(*m);
        }
    }

    log::debug!("trial seed {seed}: {t} measurements, recovered at {recovered_at:?}");
    Ok(TrialTrace {
        support: truth.support.iter().copied().collect(),
        steps,
        recovered_at,
        agents: agents
            .iter()
            .map(|a| AgentSummary {
                id: a.id,
                log_keys: a.log.iter().map(Measurement::key).collect(),
                applied: a.applied,
                own_count: a.own_count,
                inference_passes: a.inference_passes,
                selections: a.selections,
                estimate: a.model.estimate(grid),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::NoiseParams;

    fn small(agents: usize) -> (ExperimentConfig, ActionSpace) {
        let config = ExperimentConfig {
            rows: 8,
            cols: 8,
            k: 2,
            agents,
            budget: 40,
            early_stop: false,
            ..Default::default()
        };
        let space = ActionSpace::new(config.grid().unwrap(), config.max_range, &config.noise);
        (config, space)
    }

    #[test]
    fn event_order_is_time_then_sequence() {
        let mut q = EventQueue::default();
        q.push(2.0, EventKind::ActionComplete(0));
        q.push(1.0, EventKind::ActionComplete(1));
        q.push(1.0, EventKind::ActionComplete(2));
        let order: Vec<usize> = std::iter::from_fn(|| q.heap.pop())
            .map(|e| match e.kind {
                EventKind::ActionComplete(j) => j,
                EventKind::MessageDelivery(..) => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    #[test]
    fn single_agent_is_sequential() {
        let (config, space) = small(1);
        let trace = run_episode(&config, &space, 3).unwrap();
        assert_eq!(trace.steps.len(), config.budget);
        for (i, s) in trace.steps.iter().enumerate() {
            assert_eq!(s.t, i + 1);
            assert_eq!(s.agent, 0);
            assert_eq!(s.time, (i + 1) as f64);
        }
        let a = &trace.agents[0];
        assert_eq!(a.own_count as usize, config.budget);
        assert_eq!(a.applied, config.budget);
    }

    #[test]
    fn no_delivery_keeps_logs_private() {
        let (mut config, space) = small(3);
        config.comm.delivery_prob = 0.0;
        let trace = run_episode(&config, &space, 5).unwrap();
        for a in &trace.agents {
            assert!(a.log_keys.iter().all(|&(origin, _)| origin == a.id));
        }
    }

    #[test]
    fn full_delivery_two_agents() {
        let (config, space) = small(2);
        let trace = run_episode(&config, &space, 9).unwrap();
        // equal fixed durations: agents alternate 0, 1, 0, 1, ...
        for (i, s) in trace.steps.iter().enumerate() {
            assert_eq!(s.agent, i % 2);
        }
        let sets: Vec<BTreeSet<_>> = trace
            .agents
            .iter()
            .map(|a| a.log_keys.iter().copied().collect())
            .collect();
        assert_eq!(sets[0], sets[1]);
        assert_eq!(sets[0].len(), config.budget);
        let own: Vec<u64> = trace.agents.iter().map(|a| a.own_count).collect();
        assert!(own[0].abs_diff(own[1]) <= 1);
    }

    #[test]
    fn deterministic() {
        let (mut config, space) = small(3);
        config.comm.delivery_prob = 0.6;
        config.comm.delay = 0.5;
        config.duration = DurationModel::Exponential { mean: 1.0 };
        let a = run_episode(&config, &space, 11).unwrap();
        let b = run_episode(&config, &space, 11).unwrap();
        assert_eq!(a, b);
        let c = run_episode(&config, &space, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn conservation_and_no_blocking() {
        let (mut config, space) = small(3);
        config.comm.delivery_prob = 0.5;
        config.duration = DurationModel::Uniform { low: 0.5, high: 2.0 };
        let trace = run_episode(&config, &space, 2).unwrap();
        let own: u64 = trace.agents.iter().map(|a| a.own_count).sum();
        assert_eq!(own as usize, trace.steps.len());
        let total: usize = trace.agents.iter().map(|a| a.log_keys.len()).sum();
        assert!(total <= config.agents * config.budget);
        for a in &trace.agents {
            let unique: HashSet<_> = a.log_keys.iter().collect();
            assert_eq!(unique.len(), a.log_keys.len());
            assert_eq!(a.inference_passes as u64, a.own_count);
            assert!(a.selections as u64 == a.own_count || a.selections as u64 == a.own_count + 1);
        }
    }

    #[test]
    fn empty_truth_recovers_immediately() {
        let (mut config, space) = small(1);
        config.k = 0;
        config.early_stop = true;
        let trace = run_episode(&config, &space, 0).unwrap();
        assert_eq!(trace.recovered_at, Some(0));
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn unseen_target_is_not_recovered() {
        let (config, _) = small(1);
        let grid = config.grid().unwrap();
        let agents = vec![AgentState::new(0, &config, grid, 0).unwrap()];
        let truth = GroundTruth::from_support(grid.len(), [10]).unwrap();
        assert!(!recovery_status(&agents, &truth, &config, grid));
    }

    #[test]
    fn noiseless_random_search_recovers() {
        let (mut config, space) = small(1);
        config.noise = NoiseParams::noiseless();
        config.lambda = 0.1;
        config.budget = 300;
        config.early_stop = true;
        let trace = run_episode(&config, &space, 4).unwrap();
        assert!(trace.recovered_at.is_some());
        assert!(trace.steps.last().unwrap().recovered);
    }

    #[test]
    fn lu_runs_and_ts_requires_unik() {
        let (mut config, space) = small(2);
        config.inference = InferenceKind::Lu;
        let trace = run_episode(&config, &space, 1).unwrap();
        assert_eq!(trace.steps.len(), config.budget);
        config.policy = PolicyKind::Ts;
        assert!(run_episode(&config, &space, 1).is_err());
    }

    #[test]
    fn ts_policy_runs() {
        let (mut config, space) = small(2);
        config.policy = PolicyKind::Ts;
        config.budget = 10;
        let trace = run_episode(&config, &space, 1).unwrap();
        assert_eq!(trace.steps.len(), 10);
    }

    #[test]
    fn paired_seeds_share_truth_and_actions() {
        let (config, space) = small(1);
        let lu = ExperimentConfig {
            inference: InferenceKind::Lu,
            ..config.clone()
        };
        let a = run_episode(&config, &space, 8).unwrap();
        let b = run_episode(&lu, &space, 8).unwrap();
        assert_eq!(a.support, b.support);
        let poses = |t: &TrialTrace| t.steps.iter().map(|s| s.pose).collect::<Vec<_>>();
        assert_eq!(poses(&a), poses(&b));
    }
}
