//! The two synthetic intervention-timing processes.
//!
//! A process generates short traces of events; at every event a running case
//! may receive at most one (timed) intervention that deterministically
//! modifies the remaining outcome. Everything here is small enough to
//! enumerate exactly, which is what makes exact counterfactuals, an exact
//! perfect policy, and exact policy evaluation possible downstream.
//!
//! Process 1: three events, each activity `A` (p = 0.25) or `B` (p = 0.75)
//! with an attribute uniform on {0, 1, 2, 5}. Intervening at event `n`
//! multiplies that event's attribute by 2 if an `A` occurs anywhere in the
//! whole trace (including later events), by −2 otherwise. The outcome is the
//! attribute sum; intervening is free.
//!
//! Process 2: five events. Event 1 is the start `S` and event 5 the end `E`
//! (attribute 0). Events 2–4 interleave one XOR event — `B` (p = 0.2) or `C`
//! (p = 0.8), attribute 0 — with the ordered pair `D1` (attribute uniform on
//! {1,2,3}) then `D2` (uniform on {1,2,3,4}); the three valid orders are
//! equally likely. A case variable, uniform on 1..=10 and visible from the
//! start, scales the outcome. Intervening at event `k` (cost 5) multiplies the
//! attribute of every D event strictly after position `k` by 2 when the case
//! went through its `B` branch, by −4 otherwise. The outcome is
//! `case_var × Σ attributes − cost`.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Identifier of one of the two generative processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProcessId {
    P1,
    P2,
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProcessId::P1 => write!(f, "p1"),
            ProcessId::P2 => write!(f, "p2"),
        }
    }
}

impl std::str::FromStr for ProcessId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p1" | "process_1" | "1" => Ok(ProcessId::P1),
            "p2" | "process_2" | "2" => Ok(ProcessId::P2),
            other => Err(Error::Config(format!("unknown process id {other:?}"))),
        }
    }
}

/// Static description of a process: length, cost, and repeat penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessSpec {
    pub id: ProcessId,
    /// Events per case (3 for P1, 5 for P2); also the number of decisions.
    pub num_events: usize,
    /// Cost charged once, at the first intervention (0 for P1, 5 for P2).
    pub intervention_cost: i64,
    /// Penalty for each intervention after the first (no process effect).
    pub repeat_penalty: i64,
}

impl ProcessSpec {
    pub fn new(id: ProcessId) -> Self {
        match id {
            ProcessId::P1 => ProcessSpec {
                id,
                num_events: 3,
                intervention_cost: 0,
                repeat_penalty: 100,
            },
            ProcessId::P2 => ProcessSpec {
                id,
                num_events: 5,
                intervention_cost: 5,
                repeat_penalty: 100,
            },
        }
    }

    pub fn p1() -> Self {
        Self::new(ProcessId::P1)
    }

    pub fn p2() -> Self {
        Self::new(ProcessId::P2)
    }

    /// Activity alphabet, in one-hot encoding order.
    pub fn alphabet(&self) -> &'static [Activity] {
        match self.id {
            ProcessId::P1 => &[Activity::A, Activity::B],
            ProcessId::P2 => &[
                Activity::S,
                Activity::B,
                Activity::C,
                Activity::D1,
                Activity::D2,
                Activity::E,
            ],
        }
    }

    /// Position of `activity` in this process's one-hot block.
    pub fn one_hot_index(&self, activity: Activity) -> usize {
        self.alphabet()
            .iter()
            .position(|&a| a == activity)
            .unwrap_or_else(|| panic!("activity {activity} not in {} alphabet", self.id))
    }
}

/// Activity labels across both processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Activity {
    A,
    B,
    C,
    D1,
    D2,
    S,
    E,
}

impl Activity {
    pub fn label(&self) -> &'static str {
        match self {
            Activity::A => "A",
            Activity::B => "B",
            Activity::C => "C",
            Activity::D1 => "D1",
            Activity::D2 => "D2",
            Activity::S => "S",
            Activity::E => "E",
        }
    }

    /// True for the AND-branch events whose attributes interventions modify.
    pub fn is_d(&self) -> bool {
        matches!(self, Activity::D1 | Activity::D2)
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One event of a trace: an activity and its integer attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Event {
    pub activity: Activity,
    pub attribute: i64,
}

impl Event {
    pub fn new(activity: Activity, attribute: i64) -> Self {
        Event { activity, attribute }
    }
}

/// A fully realized case before any intervention: the unit of counterfactual
/// reasoning. `probability` is the generator's chance of this exact
/// realization (an exact dyadic/ratio value, stored as `f64`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrace {
    pub events: Vec<Event>,
    /// Case variable: uniform 1..=10 for P2, fixed 1 for P1.
    pub case_var: i64,
    pub probability: f64,
}

impl LatentTrace {
    /// Number of events (= decision steps).
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Observation of the first `len` events, with an intervention flag.
    pub fn prefix(&self, spec: &ProcessSpec, len: usize, intervened_before: bool) -> PrefixObservation {
        debug_assert!(len >= 1 && len <= self.events.len());
        PrefixObservation {
            spec_id: spec.id,
            observed_events: self.events[..len].to_vec(),
            case_var: self.case_var,
            intervened_before,
        }
    }
}

/// "Never" or "at event k" (1-based); applying one to a trace gives a
/// deterministic outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InterventionOption {
    Never,
    AtEvent(usize),
}

impl InterventionOption {
    /// All options for a process, in canonical order: never, at 1, …, at T.
    pub fn all(spec: &ProcessSpec) -> Vec<InterventionOption> {
        let mut opts = vec![InterventionOption::Never];
        opts.extend((1..=spec.num_events).map(InterventionOption::AtEvent));
        opts
    }

    /// Event index of the intervention, or 0 for never.
    pub fn index(&self) -> usize {
        match self {
            InterventionOption::Never => 0,
            InterventionOption::AtEvent(k) => *k,
        }
    }
}

impl fmt::Display for InterventionOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterventionOption::Never => write!(f, "never"),
            InterventionOption::AtEvent(k) => write!(f, "at_{k}"),
        }
    }
}

/// What a decision-maker sees mid-case.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixObservation {
    pub spec_id: ProcessId,
    pub observed_events: Vec<Event>,
    pub case_var: i64,
    pub intervened_before: bool,
}

impl PrefixObservation {
    /// Prefix length, i.e. the index of the newest observed event.
    pub fn len(&self) -> usize {
        self.observed_events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed_events.is_empty()
    }
}

/// All `num_events + 1` counterfactual outcomes of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualTable {
    pub trace: LatentTrace,
    /// Indexed by `InterventionOption::index()`: `[0]` = never, `[k]` = at k.
    outcomes: Vec<i64>,
}

impl CounterfactualTable {
    pub fn outcome(&self, option: InterventionOption) -> i64 {
        self.outcomes[option.index()]
    }

    pub fn never(&self) -> i64 {
        self.outcomes[0]
    }

    /// Number of entries (options), i.e. `num_events + 1`.
    pub fn num_options(&self) -> usize {
        self.outcomes.len()
    }
}

/// Sample one latent trace.
///
/// Draw order is part of the reproducibility contract:
/// P1 — per event: activity, then attribute.
/// P2 — case_var, interleaving order, XOR activity, D1 attribute, D2 attribute.
pub fn sample_trace(spec: &ProcessSpec, rng: &mut impl Rng) -> LatentTrace {
    match spec.id {
        ProcessId::P1 => {
            let mut events = Vec::with_capacity(3);
            let mut probability = 1.0;
            for _ in 0..3 {
                let is_a = rng.random::<f64>() < 0.25;
                let attr = P1_ATTRIBUTES[rng.random_range(0..P1_ATTRIBUTES.len())];
                probability *= if is_a { 0.25 } else { 0.75 } * 0.25;
                events.push(Event::new(if is_a { Activity::A } else { Activity::B }, attr));
            }
            LatentTrace { events, case_var: 1, probability }
        }
        ProcessId::P2 => {
            let case_var = rng.random_range(1..=10);
            let order = rng.random_range(0..MIDDLE_ORDERS.len());
            let is_b = rng.random::<f64>() < 0.2;
            let d1 = rng.random_range(1..=3);
            let d2 = rng.random_range(1..=4);
            let probability = (1.0 / 10.0)
                * (1.0 / 3.0)
                * if is_b { 0.2 } else { 0.8 }
                * (1.0 / 3.0)
                * (1.0 / 4.0);
            LatentTrace {
                events: assemble_p2(MIDDLE_ORDERS[order], is_b, d1, d2),
                case_var,
                probability,
            }
        }
    }
}

const P1_ATTRIBUTES: [i64; 4] = [0, 1, 2, 5];

/// The three interleavings of the XOR event with the ordered pair (D1, D2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MiddleOrder {
    XorFirst,  // X D1 D2
    XorMiddle, // D1 X D2
    XorLast,   // D1 D2 X
}

const MIDDLE_ORDERS: [MiddleOrder; 3] =
    [MiddleOrder::XorFirst, MiddleOrder::XorMiddle, MiddleOrder::XorLast];

fn assemble_p2(order: MiddleOrder, is_b: bool, d1: i64, d2: i64) -> Vec<Event> {
    let x = Event::new(if is_b { Activity::B } else { Activity::C }, 0);
    let d1 = Event::new(Activity::D1, d1);
    let d2 = Event::new(Activity::D2, d2);
    let middle = match order {
        MiddleOrder::XorFirst => [x, d1, d2],
        MiddleOrder::XorMiddle => [d1, x, d2],
        MiddleOrder::XorLast => [d1, d2, x],
    };
    let mut events = Vec::with_capacity(5);
    events.push(Event::new(Activity::S, 0));
    events.extend_from_slice(&middle);
    events.push(Event::new(Activity::E, 0));
    events
}

/// Deterministic outcome of applying `option` to a fully realized trace.
///
/// P1: the intervened event's attribute is multiplied by 2 if any event in
/// the whole trace (past or future) has activity `A`, by −2 otherwise.
/// P2: every D event strictly after the intervention index has its attribute
/// multiplied by 2 if the case's XOR event is `B`, by −4 if `C`; the result is
/// `case_var × Σ attributes`, minus the cost when an intervention was made.
pub fn outcome(spec: &ProcessSpec, trace: &LatentTrace, option: InterventionOption) -> Result<i64> {
    let k = option.index();
    if k > spec.num_events {
        return Err(Error::InvalidOption { index: k, max: spec.num_events });
    }
    let value = match spec.id {
        ProcessId::P1 => {
            let has_a = trace.events.iter().any(|e| e.activity == Activity::A);
            let mult = if has_a { 2 } else { -2 };
            trace
                .events
                .iter()
                .enumerate()
                .map(|(i, e)| if i + 1 == k { e.attribute * mult } else { e.attribute })
                .sum::<i64>()
        }
        ProcessId::P2 => {
            let is_b = trace.events.iter().any(|e| e.activity == Activity::B);
            let mult = if is_b { 2 } else { -4 };
            let sum = trace
                .events
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    if k > 0 && i + 1 > k && e.activity.is_d() {
                        e.attribute * mult
                    } else {
                        e.attribute
                    }
                })
                .sum::<i64>();
            let cost = if k > 0 { spec.intervention_cost } else { 0 };
            trace.case_var * sum - cost
        }
    };
    Ok(value)
}

/// The outcome before the intervention cost is charged; this is the terminal
/// reward component of an episode (the cost itself is charged at the
/// intervention step, so episode totals telescope to `outcome` exactly).
pub fn outcome_gross(spec: &ProcessSpec, trace: &LatentTrace, option: InterventionOption) -> i64 {
    let net = outcome(spec, trace, option).expect("option validated by the episode");
    if option.index() > 0 {
        net + spec.intervention_cost
    } else {
        net
    }
}

/// All counterfactual outcomes of one trace.
pub fn counterfactual_table(spec: &ProcessSpec, trace: &LatentTrace) -> CounterfactualTable {
    let outcomes = InterventionOption::all(spec)
        .into_iter()
        .map(|opt| outcome(spec, trace, opt).expect("enumerated options are valid"))
        .collect();
    CounterfactualTable { trace: trace.clone(), outcomes }
}

/// Exhaustive state space with exact probabilities.
///
/// `weights[i] / weight_denom` is the exact rational probability of
/// `traces[i]`; the float `probability` field is that same ratio.
#[derive(Debug, Clone)]
pub struct Enumeration {
    pub traces: Vec<LatentTrace>,
    pub weights: Vec<u64>,
    pub weight_denom: u64,
}

impl Enumeration {
    /// Iterate `(trace, weight)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&LatentTrace, u64)> {
        self.traces.iter().zip(self.weights.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

/// Enumerate every distinct trace with its exact probability.
///
/// P1: (2 activities × 4 attributes)³ = 512 traces over denominator 4096.
/// P2: 3 orders × 2 XOR × 3 × 4 attributes × 10 case vars = 720 traces over
/// denominator 1800.
pub fn enumerate_state_space(spec: &ProcessSpec) -> Enumeration {
    let mut traces = Vec::new();
    let mut weights = Vec::new();
    let weight_denom;
    match spec.id {
        ProcessId::P1 => {
            // Per event: activity weight A=1, B=3 over 4; attribute weight 1 over 4.
            weight_denom = 4096; // (4 × 4)³
            let choices: Vec<(Event, u64)> = [(Activity::A, 1u64), (Activity::B, 3u64)]
                .iter()
                .flat_map(|&(act, w)| P1_ATTRIBUTES.iter().map(move |&attr| (Event::new(act, attr), w)))
                .collect();
            for &(e1, w1) in &choices {
                for &(e2, w2) in &choices {
                    for &(e3, w3) in &choices {
                        let w = w1 * w2 * w3;
                        traces.push(LatentTrace {
                            events: vec![e1, e2, e3],
                            case_var: 1,
                            probability: w as f64 / weight_denom as f64,
                        });
                        weights.push(w);
                    }
                }
            }
        }
        ProcessId::P2 => {
            // order (1/3) × XOR (B=1, C=4 over 5) × D1 (1/3) × D2 (1/4) × cv (1/10).
            weight_denom = 1800;
            for order in MIDDLE_ORDERS {
                for (is_b, xw) in [(true, 1u64), (false, 4u64)] {
                    for d1 in 1..=3 {
                        for d2 in 1..=4 {
                            for cv in 1..=10 {
                                traces.push(LatentTrace {
                                    events: assemble_p2(order, is_b, d1, d2),
                                    case_var: cv,
                                    probability: xw as f64 / weight_denom as f64,
                                });
                                weights.push(xw);
                            }
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(weights.iter().sum::<u64>(), weight_denom);
    Enumeration { traces, weights, weight_denom }
}

/// Action available at every step of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Wait,
    Intervene,
}

/// A live episode: the step-wise environment interface for RL.
///
/// `reset` reveals a 1-event prefix; each `step` decides for the newest event
/// and then reveals the next one. Rewards: −cost at the first intervention,
/// −repeat_penalty at every further intervention (which has no process
/// effect), and the gross outcome as the terminal component, so that the
/// episode total equals `outcome(trace, chosen option)` exactly, minus 100
/// per repeat.
#[derive(Debug, Clone)]
pub struct Episode {
    spec: ProcessSpec,
    trace: LatentTrace,
    /// Index (1-based) of the newest revealed event = pending decision.
    cursor: usize,
    intervened_at: Option<usize>,
    done: bool,
}

impl Episode {
    /// Start an episode on a freshly sampled trace.
    pub fn reset(spec: &ProcessSpec, rng: &mut impl Rng) -> (Episode, PrefixObservation) {
        Self::from_trace(spec, sample_trace(spec, rng))
    }

    /// Start an episode that replays a fixed latent trace (used by the
    /// counterfactual-equivalence oracle and paired-comparison tests).
    pub fn from_trace(spec: &ProcessSpec, trace: LatentTrace) -> (Episode, PrefixObservation) {
        let episode = Episode {
            spec: *spec,
            trace,
            cursor: 1,
            intervened_at: None,
            done: false,
        };
        let obs = episode.observation();
        (episode, obs)
    }

    fn observation(&self) -> PrefixObservation {
        self.trace.prefix(&self.spec, self.cursor, self.intervened_at.is_some())
    }

    /// The latent trace being replayed (visible for logging and tests only;
    /// policies must not peek).
    pub fn trace(&self) -> &LatentTrace {
        &self.trace
    }

    /// The intervention option this episode's actions amount to so far.
    pub fn option(&self) -> InterventionOption {
        match self.intervened_at {
            Some(k) => InterventionOption::AtEvent(k),
            None => InterventionOption::Never,
        }
    }

    /// Apply `action` at the current event. Returns the next observation
    /// (`None` once terminal), the reward for this step, and the done flag.
    pub fn step(&mut self, action: Action) -> Result<(Option<PrefixObservation>, i64, bool)> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let mut reward = 0;
        if action == Action::Intervene {
            if self.intervened_at.is_none() {
                self.intervened_at = Some(self.cursor);
                reward -= self.spec.intervention_cost;
            } else {
                reward -= self.spec.repeat_penalty;
            }
        }
        if self.cursor == self.spec.num_events {
            self.done = true;
            reward += outcome_gross(&self.spec, &self.trace, self.option());
            Ok((None, reward, true))
        } else {
            self.cursor += 1;
            Ok((Some(self.observation()), reward, false))
        }
    }
}

/// One case of an exported event log.
#[derive(Debug, Clone)]
pub struct LoggedCase {
    pub case_id: u64,
    pub trace: LatentTrace,
    pub option: InterventionOption,
    pub final_outcome: i64,
}

/// Write an event log: one row per event, deterministic order by
/// `(case_id, event_index)`. The `intervened` column marks the event at which
/// the case's intervention (if any) happened.
pub fn export_event_log(cases: &[LoggedCase], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
    writer
        .write_record([
            "case_id",
            "event_index",
            "activity",
            "attribute",
            "case_var",
            "intervened",
            "final_outcome",
        ])
        .map_err(|e| Error::io(path, e))?;
    let mut sorted: Vec<&LoggedCase> = cases.iter().collect();
    sorted.sort_by_key(|c| c.case_id);
    for case in sorted {
        for (i, event) in case.trace.events.iter().enumerate() {
            let index = i + 1;
            writer
                .write_record([
                    case.case_id.to_string(),
                    index.to_string(),
                    event.activity.label().to_string(),
                    event.attribute.to_string(),
                    case.trace.case_var.to_string(),
                    u8::from(case.option.index() == index).to_string(),
                    case.final_outcome.to_string(),
                ])
                .map_err(|e| Error::io(path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn trace_p1(spec: &[(Activity, i64)]) -> LatentTrace {
        LatentTrace {
            events: spec.iter().map(|&(a, v)| Event::new(a, v)).collect(),
            case_var: 1,
            probability: 0.0,
        }
    }

    fn trace_p2(middle: [(Activity, i64); 3], case_var: i64) -> LatentTrace {
        let mut events = vec![Event::new(Activity::S, 0)];
        events.extend(middle.iter().map(|&(a, v)| Event::new(a, v)));
        events.push(Event::new(Activity::E, 0));
        LatentTrace { events, case_var, probability: 0.0 }
    }

    #[test]
    fn sampled_traces_stay_on_support() {
        let spec = ProcessSpec::p1();
        let mut rng = stream_rng(11, Stream::Generate);
        for _ in 0..200 {
            let t = sample_trace(&spec, &mut rng);
            assert_eq!(t.len(), 3);
            assert_eq!(t.case_var, 1);
            for e in &t.events {
                assert!(matches!(e.activity, Activity::A | Activity::B));
                assert!(P1_ATTRIBUTES.contains(&e.attribute));
            }
        }
        let spec = ProcessSpec::p2();
        for _ in 0..200 {
            let t = sample_trace(&spec, &mut rng);
            assert_eq!(t.len(), 5);
            assert!((1..=10).contains(&t.case_var));
            assert_eq!(t.events[0].activity, Activity::S);
            assert_eq!(t.events[4].activity, Activity::E);
            let mid: Vec<Activity> = t.events[1..4].iter().map(|e| e.activity).collect();
            let d1 = mid.iter().position(|&a| a == Activity::D1).unwrap();
            let d2 = mid.iter().position(|&a| a == Activity::D2).unwrap();
            assert!(d1 < d2, "D1 must precede D2");
            assert!(mid.iter().any(|&a| matches!(a, Activity::B | Activity::C)));
        }
    }

    #[test]
    fn p1_first_event_activity_rate() {
        let spec = ProcessSpec::p1();
        let mut rng = stream_rng(12, Stream::Generate);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_trace(&spec, &mut rng).events[0].activity == Activity::A)
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.25).abs() < 0.01, "P(A at event 1) = {rate}");
    }

    #[test]
    fn p2_xor_branch_rate() {
        let spec = ProcessSpec::p2();
        let mut rng = stream_rng(13, Stream::Generate);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                sample_trace(&spec, &mut rng)
                    .events
                    .iter()
                    .any(|e| e.activity == Activity::B)
            })
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.2).abs() < 0.01, "P(XOR = B) = {rate}");
    }

    #[test]
    fn p1_outcome_examples() {
        let spec = ProcessSpec::p1();
        let t = trace_p1(&[(Activity::B, 2), (Activity::A, 5), (Activity::B, 0)]);
        assert_eq!(outcome(&spec, &t, InterventionOption::AtEvent(2)).unwrap(), 12);
        assert_eq!(outcome(&spec, &t, InterventionOption::Never).unwrap(), 7);

        let t = trace_p1(&[(Activity::B, 5), (Activity::B, 1), (Activity::B, 2)]);
        assert_eq!(outcome(&spec, &t, InterventionOption::AtEvent(1)).unwrap(), -7);
    }

    #[test]
    fn p2_outcome_examples() {
        let spec = ProcessSpec::p2();
        // S, (C, D1:3, D2:4), E with case_var 10: intervening at event 3
        // flips D2 to −16: 10 × (3 − 16) − 5 = −135.
        let t = trace_p2([(Activity::C, 0), (Activity::D1, 3), (Activity::D2, 4)], 10);
        assert_eq!(outcome(&spec, &t, InterventionOption::AtEvent(3)).unwrap(), -135);
        assert_eq!(outcome(&spec, &t, InterventionOption::Never).unwrap(), 70);
        // Intervening at the last event leaves no D to modify: pure cost.
        assert_eq!(outcome(&spec, &t, InterventionOption::AtEvent(5)).unwrap(), 65);
    }

    #[test]
    fn p2_intervening_at_last_event_costs_exactly_the_fee_everywhere() {
        let spec = ProcessSpec::p2();
        for trace in &enumerate_state_space(&spec).traces {
            let never = outcome(&spec, trace, InterventionOption::Never).unwrap();
            let last = outcome(&spec, trace, InterventionOption::AtEvent(5)).unwrap();
            assert_eq!(last, never - spec.intervention_cost);
        }
    }

    #[test]
    fn p2_outcome_bounded_by_best_possible_effect() {
        // Doubling both D attributes adds at most their sum (3 + 4) once,
        // scaled by the case variable.
        let spec = ProcessSpec::p2();
        for trace in &enumerate_state_space(&spec).traces {
            let never = outcome(&spec, trace, InterventionOption::Never).unwrap();
            for opt in InterventionOption::all(&spec) {
                let v = outcome(&spec, trace, opt).unwrap();
                assert!(v <= never + trace.case_var * 7);
            }
        }
    }

    #[test]
    fn counterfactual_table_examples() {
        let spec = ProcessSpec::p1();
        let t = trace_p1(&[(Activity::B, 2), (Activity::A, 5), (Activity::B, 0)]);
        let table = counterfactual_table(&spec, &t);
        assert_eq!(table.num_options(), 4);
        assert_eq!(table.outcome(InterventionOption::Never), 7);
        assert_eq!(table.outcome(InterventionOption::AtEvent(1)), 9);
        assert_eq!(table.outcome(InterventionOption::AtEvent(2)), 12);
        assert_eq!(table.outcome(InterventionOption::AtEvent(3)), 7);

        let spec = ProcessSpec::p2();
        let t = trace_p2([(Activity::B, 0), (Activity::D1, 1), (Activity::D2, 1)], 1);
        assert_eq!(counterfactual_table(&spec, &t).num_options(), 6);
    }

    #[test]
    fn counterfactual_never_is_plain_weighted_sum() {
        for spec in [ProcessSpec::p1(), ProcessSpec::p2()] {
            for trace in &enumerate_state_space(&spec).traces {
                let plain: i64 = trace.events.iter().map(|e| e.attribute).sum();
                assert_eq!(
                    counterfactual_table(&spec, trace).never(),
                    trace.case_var * plain
                );
            }
        }
    }

    #[test]
    fn enumeration_counts_and_total_probability() {
        let e1 = enumerate_state_space(&ProcessSpec::p1());
        assert_eq!(e1.len(), 512);
        assert_eq!(e1.weights.iter().sum::<u64>(), e1.weight_denom);
        assert!((e1.traces.iter().map(|t| t.probability).sum::<f64>() - 1.0).abs() < 1e-12);

        let e2 = enumerate_state_space(&ProcessSpec::p2());
        assert_eq!(e2.len(), 720);
        assert_eq!(e2.weights.iter().sum::<u64>(), e2.weight_denom);
        assert!((e2.traces.iter().map(|t| t.probability).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_has_no_duplicates() {
        for spec in [ProcessSpec::p1(), ProcessSpec::p2()] {
            let en = enumerate_state_space(&spec);
            let mut keys: Vec<(Vec<Event>, i64)> =
                en.traces.iter().map(|t| (t.events.clone(), t.case_var)).collect();
            keys.sort();
            let before = keys.len();
            keys.dedup();
            assert_eq!(keys.len(), before);
        }
    }

    #[test]
    fn empirical_frequencies_match_enumeration() {
        // Multinomial check: with 10⁵ draws every cell should sit within 4σ,
        // and at least 99% within 3σ (≈0.3% of cells may exceed 3σ by chance).
        for spec in [ProcessSpec::p1(), ProcessSpec::p2()] {
            let en = enumerate_state_space(&spec);
            let index: std::collections::BTreeMap<(Vec<Event>, i64), usize> = en
                .traces
                .iter()
                .enumerate()
                .map(|(i, t)| ((t.events.clone(), t.case_var), i))
                .collect();
            let mut counts = vec![0u64; en.len()];
            let n = 100_000;
            let mut rng = stream_rng(14, Stream::Generate);
            for _ in 0..n {
                let t = sample_trace(&spec, &mut rng);
                counts[index[&(t.events, t.case_var)]] += 1;
            }
            let mut within3 = 0;
            for (i, trace) in en.traces.iter().enumerate() {
                let p = trace.probability;
                let mean = n as f64 * p;
                let sd = (n as f64 * p * (1.0 - p)).sqrt();
                let dev = (counts[i] as f64 - mean).abs();
                assert!(dev <= 4.0 * sd, "{} trace {i}: dev {dev:.1} > 4σ={:.1}", spec.id, 4.0 * sd);
                if dev <= 3.0 * sd {
                    within3 += 1;
                }
            }
            assert!(within3 as f64 >= 0.99 * en.len() as f64);
        }
    }

    #[test]
    fn episode_all_wait_returns_never_outcome() {
        let spec = ProcessSpec::p1();
        let mut rng = stream_rng(15, Stream::Generate);
        for _ in 0..50 {
            let (mut ep, _obs) = Episode::reset(&spec, &mut rng);
            let expected = outcome(&spec, ep.trace(), InterventionOption::Never).unwrap();
            let mut total = 0;
            loop {
                let (_, r, done) = ep.step(Action::Wait).unwrap();
                total += r;
                if done {
                    break;
                }
            }
            assert_eq!(total, expected);
        }
    }

    #[test]
    fn episode_double_intervention_pays_the_penalty() {
        let spec = ProcessSpec::p1();
        let mut rng = stream_rng(16, Stream::Generate);
        let (mut ep, _) = Episode::reset(&spec, &mut rng);
        let trace = ep.trace().clone();
        let expected = outcome(&spec, &trace, InterventionOption::AtEvent(1)).unwrap() - 100;
        let mut total = 0;
        for action in [Action::Intervene, Action::Intervene, Action::Wait] {
            let (_, r, _) = ep.step(action).unwrap();
            total += r;
        }
        assert_eq!(total, expected);

        // Paired replay: the same latent trace without the repeat earns
        // exactly 100 more.
        let (mut ep, _) = Episode::from_trace(&spec, trace);
        let mut single = 0;
        for action in [Action::Intervene, Action::Wait, Action::Wait] {
            let (_, r, _) = ep.step(action).unwrap();
            single += r;
        }
        assert_eq!(single - total, 100);
    }

    #[test]
    fn episode_totals_match_counterfactuals_exactly() {
        // Every enumerated trace × option: replaying the action sequence must
        // reproduce the counterfactual entry to the integer.
        for spec in [ProcessSpec::p1(), ProcessSpec::p2()] {
            for trace in &enumerate_state_space(&spec).traces {
                let table = counterfactual_table(&spec, trace);
                for opt in InterventionOption::all(&spec) {
                    let (mut ep, _) = Episode::from_trace(&spec, trace.clone());
                    let mut total = 0;
                    for step in 1..=spec.num_events {
                        let action =
                            if step == opt.index() { Action::Intervene } else { Action::Wait };
                        let (_, r, done) = ep.step(action).unwrap();
                        total += r;
                        assert_eq!(done, step == spec.num_events);
                    }
                    assert_eq!(total, table.outcome(opt), "{} {opt}", spec.id);
                }
            }
        }
    }

    #[test]
    fn episode_rejects_steps_after_done() {
        let spec = ProcessSpec::p1();
        let mut rng = stream_rng(17, Stream::Generate);
        let (mut ep, _) = Episode::reset(&spec, &mut rng);
        for _ in 0..3 {
            ep.step(Action::Wait).unwrap();
        }
        assert!(matches!(ep.step(Action::Wait), Err(Error::EpisodeDone)));
    }

    #[test]
    fn outcome_rejects_out_of_range_option() {
        let spec = ProcessSpec::p1();
        let t = trace_p1(&[(Activity::B, 1), (Activity::B, 1), (Activity::B, 1)]);
        assert!(matches!(
            outcome(&spec, &t, InterventionOption::AtEvent(4)),
            Err(Error::InvalidOption { index: 4, max: 3 })
        ));
    }

    #[test]
    fn event_log_export_layout() {
        let spec = ProcessSpec::p1();
        let mut rng = stream_rng(18, Stream::Generate);
        let cases: Vec<LoggedCase> = (0..2)
            .map(|case_id| {
                let trace = sample_trace(&spec, &mut rng);
                let final_outcome = outcome(&spec, &trace, InterventionOption::AtEvent(2)).unwrap();
                LoggedCase { case_id, trace, option: InterventionOption::AtEvent(2), final_outcome }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        export_event_log(&cases, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 3, "header + one row per event");
        assert_eq!(
            lines[0],
            "case_id,event_index,activity,attribute,case_var,intervened,final_outcome"
        );
        assert!(lines[2].split(',').nth(5) == Some("1"), "event 2 is the intervention");
    }
}
