//! Online Q-learning against the live process environment.
//!
//! The agent interacts step by step: at every revealed event it either waits
//! or intervenes, pushes the observed transition into a FIFO replay memory,
//! and (neural mode) re-fits its Q-network on the entire memory after each
//! transition, or (tabular mode) nudges the visited cell toward the
//! bootstrapped target. Timing decisions are extracted greedily under the
//! one-intervention guard and evaluated exactly against the enumerable trace
//! distribution, which doubles as a noise-free early-stopping signal.
//!
//! Two modes share the loop:
//! - **neural** — a [`SequenceRegressor`] with a 2-output head (wait,
//!   intervene), trained on 1,024-sample batches (= the whole memory);
//! - **tabular** — an exact Q-map keyed by observed prefix and
//!   intervention flag, updated per transition with a constant or
//!   1/visit-count learning rate; verifiable against Bellman expectations.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::regressor::SequenceRegressor;
use crate::nn::{encode, feature_dim, side_dim, EncodeMode, EncodedPrefix, Standardizer};
use crate::policies::{enumerate_prefixes, evaluate_policy_exact, MapPolicy, PrefixKey};
use crate::process::{Action, Episode, ProcessSpec};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// Output-column convention of the Q-head: wait first, so exact ties
/// resolved by `>` fall back to waiting.
pub const WAIT: usize = 0;
pub const INTERVENE: usize = 1;

pub fn action_index(action: Action) -> usize {
    match action {
        Action::Wait => WAIT,
        Action::Intervene => INTERVENE,
    }
}

/// One observed environment step.
#[derive(Debug, Clone)]
pub struct Transition {
    /// The prefix the decision was taken on, encoded for the Q-network.
    pub state: EncodedPrefix,
    /// The same prefix's exact identity (drives the tabular mode).
    pub key: PrefixKey,
    /// Event index of the episode's earlier intervention, if any. Part of
    /// the agent's own action history, so the tabular mode may key on it;
    /// the network encoding deliberately does not carry it.
    pub intervened_at: Option<usize>,
    pub action: Action,
    /// Raw reward in outcome units; terminal transitions carry the full
    /// terminal outcome component.
    pub reward: i64,
    /// Successor observation; `None` once the episode is over.
    pub next: Option<NextState>,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct NextState {
    pub state: EncodedPrefix,
    pub key: PrefixKey,
    pub intervened_at: Option<usize>,
}

/// Fixed-capacity FIFO buffer of transitions: once full, every insertion
/// evicts the oldest entry.
#[derive(Debug)]
pub struct ReplayMemory {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> ReplayMemory {
        ReplayMemory { items: VecDeque::with_capacity(capacity + 1), capacity }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    /// Insertion-ordered iteration (oldest first).
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn latest(&self) -> Option<&Transition> {
        self.items.back()
    }

    /// The `i`-th oldest transition.
    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }
}

/// Exploration schedule: linear from `initial` to `floor` over the first
/// `decay_transitions` transitions, constant afterwards.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub initial: f64,
    pub floor: f64,
    pub decay_transitions: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule { initial: 1.0, floor: 0.05, decay_transitions: 5_000 }
    }
}

impl EpsilonSchedule {
    /// A flat schedule: explore at rate `epsilon` forever. The tabular
    /// verification runs use `constant(1.0)` — a uniform behavior policy —
    /// since Q-learning is off-policy and exact recovery of the decision
    /// table needs every prefix visited, not just the greedy path.
    pub fn constant(epsilon: f64) -> EpsilonSchedule {
        EpsilonSchedule { initial: epsilon, floor: epsilon, decay_transitions: 1 }
    }

    pub fn value(&self, transitions: u64) -> f64 {
        if transitions >= self.decay_transitions {
            self.floor
        } else {
            let frac = transitions as f64 / self.decay_transitions as f64;
            self.initial - (self.initial - self.floor) * frac
        }
    }
}

/// ε-greedy action selection; exact ties go to waiting.
pub fn act(q_wait: f64, q_intervene: f64, epsilon: f64, rng: &mut impl Rng) -> Action {
    if rng.random::<f64>() < epsilon {
        if rng.random::<f64>() < 0.5 {
            Action::Wait
        } else {
            Action::Intervene
        }
    } else if q_intervene > q_wait {
        Action::Intervene
    } else {
        Action::Wait
    }
}

/// Learning-rate rule for the tabular update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LearningRate {
    Constant(f64),
    /// α = max(1/n, floor) on the n-th visit of a cell: the first visit
    /// adopts its target outright and early visits average, while the floor
    /// keeps late updates recency-weighted so a cell tracks its children as
    /// they converge instead of carrying their warm-up values in a
    /// permanent average. Deterministic terminal cells are exact under any
    /// rate once visited.
    VisitDecay { floor: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QCell {
    pub q: f64,
    pub visits: u64,
}

/// Exact Q-table keyed by the agent's full information state: the observed
/// prefix plus the event index of its own earlier intervention (if any);
/// each cell holds the wait/intervene values. Unvisited cells read as 0.
///
/// Keying on the position rather than a had-intervened flag keeps every
/// cell's target well-defined: a flag would pool post-intervention states
/// whose eventual outcomes differ by where the intervention landed.
#[derive(Debug, Clone)]
pub struct TabularQ {
    pub rate: LearningRate,
    cells: BTreeMap<(PrefixKey, Option<usize>), [QCell; 2]>,
}

impl TabularQ {
    pub fn new(rate: LearningRate) -> TabularQ {
        TabularQ { rate, cells: BTreeMap::new() }
    }

    pub fn q(&self, key: &PrefixKey, intervened_at: Option<usize>, action: usize) -> f64 {
        self.cells
            .get(&(key.clone(), intervened_at))
            .map_or(0.0, |pair| pair[action].q)
    }

    pub fn q_pair(&self, key: &PrefixKey, intervened_at: Option<usize>) -> (f64, f64) {
        (self.q(key, intervened_at, WAIT), self.q(key, intervened_at, INTERVENE))
    }

    fn update(&mut self, key: &PrefixKey, intervened_at: Option<usize>, action: usize, target: f64) {
        let cell = &mut self.cells.entry((key.clone(), intervened_at)).or_default()[action];
        cell.visits += 1;
        let alpha = match self.rate {
            LearningRate::Constant(a) => a,
            LearningRate::VisitDecay { floor } => (1.0 / cell.visits as f64).max(floor),
        };
        cell.q += alpha * (target - cell.q);
    }

    /// One online Q-learning update from an observed transition.
    pub fn learn(&mut self, t: &Transition, gamma: f64) {
        let bootstrap = match &t.next {
            None => 0.0,
            Some(n) => {
                let (w, i) = self.q_pair(&n.key, n.intervened_at);
                gamma * w.max(i)
            }
        };
        let target = t.reward as f64 + bootstrap;
        self.update(&t.key, t.intervened_at, action_index(t.action), target);
    }

    /// Stored cells in key order: `((key, intervened_at), [wait, intervene])`.
    pub fn iter(&self) -> impl Iterator<Item = (&(PrefixKey, Option<usize>), &[QCell; 2])> {
        self.cells.iter()
    }

    /// The stored cell pair for a state, if any update ever touched it.
    pub fn cells(&self, key: &PrefixKey, intervened_at: Option<usize>) -> Option<&[QCell; 2]> {
        self.cells.get(&(key.clone(), intervened_at))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn insert_cells(&mut self, key: PrefixKey, intervened_at: Option<usize>, pair: [QCell; 2]) {
        self.cells.insert((key, intervened_at), pair);
    }
}

/// The trainable value function plus everything needed to act on raw
/// observations.
pub enum QAgent {
    Neural(SequenceRegressor),
    Tabular(TabularQ),
}

enum AgentSnapshot {
    Neural(Vec<ndarray::Array2<f64>>),
    Tabular(TabularQ),
}

impl QAgent {
    fn q_values(&self, state: &EncodedPrefix, key: &PrefixKey, intervened_at: Option<usize>) -> Result<(f64, f64)> {
        match self {
            QAgent::Neural(model) => {
                let preds = model.forward_refs(&[state])?;
                Ok((preds[[0, WAIT]], preds[[0, INTERVENE]]))
            }
            QAgent::Tabular(tab) => Ok(tab.q_pair(key, intervened_at)),
        }
    }

    fn snapshot(&self) -> AgentSnapshot {
        match self {
            QAgent::Neural(model) => AgentSnapshot::Neural(model.snapshot()),
            QAgent::Tabular(tab) => AgentSnapshot::Tabular(tab.clone()),
        }
    }

    fn restore(&mut self, snap: &AgentSnapshot) {
        match (self, snap) {
            (QAgent::Neural(model), AgentSnapshot::Neural(values)) => model.restore(values),
            (QAgent::Tabular(tab), AgentSnapshot::Tabular(saved)) => *tab = saved.clone(),
            _ => unreachable!("snapshot kind matches agent kind"),
        }
    }
}

/// Hyper-parameters of the training loop. `Default` gives the standard lab
/// settings; tests override individual fields.
#[derive(Debug, Clone)]
pub struct RlConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub replay_capacity: usize,
    /// Undiscounted by default: episodes are short and finite.
    pub gamma: f64,
    pub eval_interval: u64,
    /// Stop after this many consecutive non-improving evaluations; `None`
    /// runs to `max_transitions` unconditionally.
    pub patience: Option<u32>,
    /// Hard cap on environment transitions.
    pub max_transitions: u64,
    pub epsilon: EpsilonSchedule,
    /// Tabular-mode learning rate.
    pub tabular_rate: LearningRate,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            hidden: 16,
            learning_rate: 1e-3,
            replay_capacity: 1_024,
            gamma: 1.0,
            eval_interval: 500,
            patience: Some(5),
            max_transitions: 60_000,
            epsilon: EpsilonSchedule::default(),
            tabular_rate: LearningRate::Constant(0.05),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RlMode {
    Neural,
    Tabular,
}

/// One point of the training curve: exact greedy-policy uplift measured
/// every `eval_interval` transitions.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub transitions: u64,
    pub eval_uplift: f64,
    pub epsilon: f64,
}

pub struct RlOutcome {
    pub agent: QAgent,
    pub standardizer: Standardizer,
    /// Environment transitions consumed (= optimization steps once the
    /// memory is full, in neural mode).
    pub transitions: u64,
    pub episodes: u64,
    pub curve: Vec<CurvePoint>,
    /// Exact uplift of the restored (best) parameters.
    pub best_uplift: f64,
}

/// Train an agent online. Sampling, exploration, and initialization draw
/// from per-purpose RNG streams of `seed`, so runs are reproducible and the
/// two modes see identical episode streams.
pub fn train_rl(spec: &ProcessSpec, mode: RlMode, config: &RlConfig, seed: u64) -> Result<RlOutcome> {
    let standardizer = Standardizer::from_enumeration(spec);
    let mut env_rng = stream_rng(seed, Stream::RlEnv);
    let mut explore_rng = stream_rng(seed, Stream::RlExplore);
    let mut agent = match mode {
        RlMode::Neural => {
            let mut init_rng = stream_rng(seed, Stream::RlInit);
            QAgent::Neural(SequenceRegressor::new(
                feature_dim(spec),
                config.hidden,
                side_dim(spec),
                2,
                spec.num_events,
                config.learning_rate,
                &mut init_rng,
            ))
        }
        RlMode::Tabular => QAgent::Tabular(TabularQ::new(config.tabular_rate)),
    };

    // Evaluation works on the fixed universe of observable prefixes; encode
    // them once.
    let eval_prefixes = encoded_prefix_universe(spec, &standardizer)?;

    let mut memory = ReplayMemory::new(config.replay_capacity);
    let mut curve = Vec::new();
    let mut transitions: u64 = 0;
    let mut episodes: u64 = 0;
    let mut best: Option<(f64, AgentSnapshot)> = None;
    let mut stale_evals: u32 = 0;
    let mut has_trained = false;

    'training: loop {
        let (mut episode, mut obs) = Episode::reset(spec, &mut env_rng);
        episodes += 1;
        // The agent's own action history: where (if anywhere) it has already
        // intervened in this episode.
        let mut intervened_at: Option<usize> = None;
        loop {
            debug_assert_eq!(obs.intervened_before, intervened_at.is_some());
            let state = encode(&obs, &standardizer, EncodeMode::Rl { intervened_at })?;
            let key = PrefixKey::of(&obs);
            let epsilon = config.epsilon.value(transitions);
            let (q_wait, q_intervene) = agent.q_values(&state, &key, intervened_at)?;
            let action = act(q_wait, q_intervene, epsilon, &mut explore_rng);
            let decided_at = obs.observed_events.len();
            let (next_obs, reward, done) = episode.step(action)?;
            let next_intervened_at = match (intervened_at, action) {
                (None, Action::Intervene) => Some(decided_at),
                (prior, _) => prior,
            };
            let next = next_obs
                .as_ref()
                .map(|o| -> Result<NextState> {
                    Ok(NextState {
                        state: encode(o, &standardizer, EncodeMode::Rl { intervened_at: next_intervened_at })?,
                        key: PrefixKey::of(o),
                        intervened_at: next_intervened_at,
                    })
                })
                .transpose()?;
            memory.push(Transition { state, key, intervened_at, action, reward, next, done });
            intervened_at = next_intervened_at;
            transitions += 1;

            match &mut agent {
                QAgent::Tabular(tab) => {
                    // One Q-update per environment transition, on the
                    // transition just observed.
                    tab.learn(memory.latest().expect("just pushed"), config.gamma);
                    has_trained = true;
                }
                QAgent::Neural(model) => {
                    if memory.is_full() {
                        replay_train_step(model, &memory, config.gamma)?;
                        has_trained = true;
                    }
                }
            }

            // Evaluations gate early stopping, so they only start once
            // optimization has begun (the neural learner idles until the
            // replay memory first fills); evaluating the untouched init
            // would burn the patience budget before any learning.
            if has_trained && transitions % config.eval_interval == 0 {
                let uplift = exact_uplift_of(spec, &agent, &eval_prefixes)?;
                if !uplift.is_finite() {
                    return Err(Error::Diverged(format!("non-finite evaluation uplift {uplift}")));
                }
                curve.push(CurvePoint { transitions, eval_uplift: uplift, epsilon });
                let improved = best.as_ref().is_none_or(|(b, _)| uplift > *b);
                if improved {
                    best = Some((uplift, agent.snapshot()));
                    stale_evals = 0;
                } else {
                    stale_evals += 1;
                    if config.patience.is_some_and(|p| stale_evals >= p) {
                        break 'training;
                    }
                }
            }
            if transitions >= config.max_transitions {
                break 'training;
            }
            match next_obs {
                Some(o) if !done => obs = o,
                _ => break,
            }
        }
    }

    // Short runs can end before the first scheduled evaluation.
    if best.is_none() {
        let uplift = exact_uplift_of(spec, &agent, &eval_prefixes)?;
        curve.push(CurvePoint {
            transitions,
            eval_uplift: uplift,
            epsilon: config.epsilon.value(transitions),
        });
        best = Some((uplift, agent.snapshot()));
    }
    let (best_uplift, snap) = best.expect("at least one evaluation");
    agent.restore(&snap);

    Ok(RlOutcome { agent, standardizer, transitions, episodes, curve, best_uplift })
}

/// One optimization step on the whole memory: targets are `r` for terminal
/// transitions, else `r + γ·max_a' Q(s', a')` under the current parameters
/// (no separate target network).
fn replay_train_step(model: &mut SequenceRegressor, memory: &ReplayMemory, gamma: f64) -> Result<f64> {
    let mut next_refs: Vec<&EncodedPrefix> = Vec::with_capacity(memory.len());
    let mut next_slot: Vec<Option<usize>> = Vec::with_capacity(memory.len());
    for t in memory.iter() {
        match &t.next {
            Some(n) => {
                next_slot.push(Some(next_refs.len()));
                next_refs.push(&n.state);
            }
            None => next_slot.push(None),
        }
    }
    let next_q = if next_refs.is_empty() {
        None
    } else {
        Some(model.forward_refs(&next_refs)?)
    };

    let mut states = Vec::with_capacity(memory.len());
    let mut actions = Vec::with_capacity(memory.len());
    let mut targets = Vec::with_capacity(memory.len());
    for (i, t) in memory.iter().enumerate() {
        states.push(&t.state);
        actions.push(action_index(t.action));
        let bootstrap = match next_slot[i] {
            Some(j) => {
                let q = next_q.as_ref().expect("non-terminal rows were batched");
                gamma * q[[j, WAIT]].max(q[[j, INTERVENE]])
            }
            None => 0.0,
        };
        targets.push(t.reward as f64 + bootstrap);
    }
    model.train_step_q(&states, &actions, &targets)
}

/// Every observable no-prior-intervention prefix with its RL encoding.
fn encoded_prefix_universe(
    spec: &ProcessSpec,
    standardizer: &Standardizer,
) -> Result<Vec<(PrefixKey, EncodedPrefix)>> {
    enumerate_prefixes(spec)
        .into_iter()
        .map(|(key, obs)| Ok((key, encode(&obs, standardizer, EncodeMode::Rl { intervened_at: None })?)))
        .collect()
}

fn decisions_from_q<'a>(
    pairs: impl Iterator<Item = (&'a PrefixKey, f64, f64)>,
) -> BTreeMap<PrefixKey, Action> {
    pairs
        .map(|(key, q_wait, q_intervene)| {
            let action = if q_intervene > q_wait { Action::Intervene } else { Action::Wait };
            (key.clone(), action)
        })
        .collect()
}

fn decision_map(agent: &QAgent, universe: &[(PrefixKey, EncodedPrefix)]) -> Result<MapPolicy> {
    let decisions = match agent {
        QAgent::Neural(model) => {
            let refs: Vec<&EncodedPrefix> = universe.iter().map(|(_, e)| e).collect();
            let preds = model.forward_refs(&refs)?;
            decisions_from_q(
                universe
                    .iter()
                    .enumerate()
                    .map(|(i, (key, _))| (key, preds[[i, WAIT]], preds[[i, INTERVENE]])),
            )
        }
        QAgent::Tabular(tab) => decisions_from_q(universe.iter().map(|(key, _)| {
            let (w, i) = tab.q_pair(key, None);
            (key, w, i)
        })),
    };
    Ok(MapPolicy { decisions })
}

fn exact_uplift_of(
    spec: &ProcessSpec,
    agent: &QAgent,
    universe: &[(PrefixKey, EncodedPrefix)],
) -> Result<f64> {
    evaluate_policy_exact(spec, &decision_map(agent, universe)?)
}

/// Freeze the agent's greedy timing decisions into a guarded lookup policy
/// usable by both the exact and the sampled evaluators.
pub fn extract_policy(
    spec: &ProcessSpec,
    agent: &QAgent,
    standardizer: &Standardizer,
) -> Result<MapPolicy> {
    decision_map(agent, &encoded_prefix_universe(spec, standardizer)?)
}

/// Write the training curve as `transitions,eval_uplift,epsilon`.
pub fn export_rl_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
    writer
        .write_record(["transitions", "eval_uplift", "epsilon"])
        .map_err(|e| Error::io(path, e))?;
    for point in curve {
        writer
            .write_record([
                point.transitions.to_string(),
                point.eval_uplift.to_string(),
                point.epsilon.to_string(),
            ])
            .map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Mean absolute Bellman residual of a tabular agent over the enumeration:
/// for every stored state-action, `|Q(s,a) − E[r + γ·max_a' Q(s',a')]|`, the
/// expectation taken over the exact conditional trace distribution given the
/// observed prefix. Because cells are keyed by the full information state,
/// every cell has a behavior-independent expected target.
pub fn bellman_residual_tabular(spec: &ProcessSpec, tab: &TabularQ, gamma: f64) -> Result<f64> {
    let enumeration = crate::enumerate_state_space(spec);
    // Group trace weights by observable prefix at every level.
    let mut groups: BTreeMap<PrefixKey, (usize, Vec<(usize, u64)>)> = BTreeMap::new();
    for (i, (trace, w)) in enumeration.iter().enumerate() {
        for len in 1..=spec.num_events {
            let obs = trace.prefix(spec, len, false);
            let entry = groups.entry(PrefixKey::of(&obs)).or_insert((len, Vec::new()));
            entry.1.push((i, w));
        }
    }

    let mut total_residual = 0.0;
    let mut cells_checked = 0u64;
    for ((key, intervened_at), pair) in tab.iter() {
        let (len, members) = groups
            .get(key)
            .ok_or_else(|| Error::PolicyUndefined(key.as_str().to_owned()))?;
        let total_w: u64 = members.iter().map(|&(_, w)| w).sum();
        for (action, cell) in pair.iter().enumerate() {
            if cell.visits == 0 {
                continue;
            }
            // The option in force after taking this action here, plus the
            // immediate reward component the environment pays for it.
            let (option_after, step_reward) = match (*intervened_at, action) {
                (Some(k), WAIT) => (crate::InterventionOption::AtEvent(k), 0.0),
                (Some(k), _) => {
                    (crate::InterventionOption::AtEvent(k), -(spec.repeat_penalty as f64))
                }
                (None, INTERVENE) => {
                    (crate::InterventionOption::AtEvent(*len), -(spec.intervention_cost as f64))
                }
                (None, _) => (crate::InterventionOption::Never, 0.0),
            };
            let next_intervened_at = match option_after {
                crate::InterventionOption::AtEvent(k) => Some(k),
                crate::InterventionOption::Never => None,
            };
            let mut expected = 0.0;
            for &(i, w) in members {
                let trace = &enumeration.traces[i];
                let p = w as f64 / total_w as f64;
                let target = if *len == spec.num_events {
                    // Terminal step: the gross outcome of the option in
                    // force lands on top of the action's own reward.
                    step_reward + crate::outcome_gross(spec, trace, option_after) as f64
                } else {
                    let next_obs = trace.prefix(spec, len + 1, next_intervened_at.is_some());
                    let (w_q, i_q) = tab.q_pair(&PrefixKey::of(&next_obs), next_intervened_at);
                    step_reward + gamma * w_q.max(i_q)
                };
                expected += p * target;
            }
            total_residual += (cell.q - expected).abs();
            cells_checked += 1;
        }
    }
    if cells_checked == 0 {
        return Err(Error::NoData);
    }
    Ok(total_residual / cells_checked as f64)
}
