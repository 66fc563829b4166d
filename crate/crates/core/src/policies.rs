//! Exact policies and exact/sampled policy evaluation.
//!
//! Because both processes enumerate completely, the optimal stopping problem
//! "intervene now or keep waiting" is solved here by backward induction over
//! the observable prefix tree, with exact rational arithmetic so that ties
//! are detected as ties rather than float noise. The same machinery evaluates
//! *any* policy exactly (expected uplift over the true distribution) or on a
//! sampled test set of counterfactual tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use num::{BigRational, FromPrimitive, ToPrimitive, Zero};
use rand::Rng;

use crate::process::{
    counterfactual_table, enumerate_state_space, Action, CounterfactualTable, Enumeration,
    InterventionOption, LatentTrace, PrefixObservation, ProcessSpec,
};
use crate::{Error, Result};

/// Canonical identity of an observable prefix: process, the observed events,
/// and the case variable. Intervention history is *not* part of the key — the
/// value of the remaining case depends only on what has been generated.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PrefixKey(String);

impl PrefixKey {
    pub fn new(spec: &ProcessSpec, events: &[crate::Event], case_var: i64) -> Self {
        let mut s = String::new();
        write!(s, "{}|", spec.id.to_string().to_ascii_uppercase()).unwrap();
        for (i, e) in events.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{}:{}", e.activity, e.attribute).unwrap();
        }
        write!(s, "|cv={case_var}").unwrap();
        PrefixKey(s)
    }

    pub fn of(obs: &PrefixObservation) -> Self {
        Self::new(&ProcessSpec::new(obs.spec_id), &obs.observed_events, obs.case_var)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for PrefixKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// A timing policy: decide at each revealed event whether to intervene.
/// Implementations may assume `intervened_before == false`; the evaluation
/// and environment layers guard against asking twice.
pub trait Policy {
    fn decide(&self, obs: &PrefixObservation) -> Result<Action>;
}

/// Never intervene.
pub struct NeverPolicy;

impl Policy for NeverPolicy {
    fn decide(&self, _obs: &PrefixObservation) -> Result<Action> {
        Ok(Action::Wait)
    }
}

/// Intervene at a fixed event index, regardless of the prefix.
pub struct AlwaysAtK(pub usize);

impl Policy for AlwaysAtK {
    fn decide(&self, obs: &PrefixObservation) -> Result<Action> {
        Ok(if obs.len() == self.0 { Action::Intervene } else { Action::Wait })
    }
}

/// Uniformly draw one of the `num_events + 1` options (never, at 1, …, at T):
/// the randomized assignment that generates training data for the uplift
/// learner.
pub fn rct_option(spec: &ProcessSpec, rng: &mut impl Rng) -> InterventionOption {
    let all = InterventionOption::all(spec);
    all[rng.random_range(0..all.len())]
}

/// Policy given by an explicit decision table over observable prefixes.
/// Learned policies are frozen into this form so exact evaluation walks a
/// lookup table instead of re-running a model per prefix.
#[derive(Debug, Clone)]
pub struct MapPolicy {
    pub decisions: BTreeMap<PrefixKey, Action>,
}

impl Policy for MapPolicy {
    fn decide(&self, obs: &PrefixObservation) -> Result<Action> {
        if obs.intervened_before {
            return Ok(Action::Wait);
        }
        match self.decisions.get(&PrefixKey::of(obs)) {
            Some(&action) => Ok(action),
            None => Err(Error::PolicyUndefined(PrefixKey::of(obs).as_str().to_owned())),
        }
    }
}

/// Every observable no-prior-intervention prefix of the process, keyed for
/// decision tables, each with one representative observation.
pub fn enumerate_prefixes(spec: &ProcessSpec) -> BTreeMap<PrefixKey, PrefixObservation> {
    let enumeration = enumerate_state_space(spec);
    let mut out = BTreeMap::new();
    for trace in &enumeration.traces {
        for len in 1..=spec.num_events {
            let obs = PrefixObservation {
                spec_id: spec.id,
                observed_events: trace.events[..len].to_vec(),
                case_var: trace.case_var,
                intervened_before: false,
            };
            out.entry(PrefixKey::of(&obs)).or_insert(obs);
        }
    }
    out
}

/// One node of the backward-induction solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeValue {
    /// Expected outcome if the intervention is made at this node's newest event.
    pub v_intervene: f64,
    /// Expected outcome under optimal play from the next event on
    /// (at the last event: the expected never-outcome, i.e. do nothing).
    pub v_wait: f64,
    pub decision: Action,
}

/// The optimal timing policy, solved exactly.
///
/// Built once per process by backward induction over all observable prefixes:
/// at a prefix of length `k`, intervening is worth the conditional expectation
/// of `outcome(at k)`, waiting is worth the conditional expectation of the
/// *maximum* of the child nodes' best values. Exact ties break toward
/// waiting; `ties` records the prefixes where that happened.
pub struct PerfectPolicy {
    spec: ProcessSpec,
    decisions: BTreeMap<PrefixKey, NodeValue>,
    pub ties: BTreeSet<PrefixKey>,
    /// Expected outcome of optimal play, from before the first event.
    pub root_value: f64,
    /// Expected outcome of never intervening.
    pub e_never: f64,
    /// `root_value − e_never`: the exact expected uplift per case.
    pub root_uplift: f64,
}

/// Exact value of a subtree, plus bookkeeping carried up the induction.
struct SolvedNode {
    best: BigRational,
    weight: BigRational,
}

impl PerfectPolicy {
    pub fn build(spec: &ProcessSpec) -> Self {
        let enumeration = enumerate_state_space(spec);
        let mut decisions = BTreeMap::new();
        let mut ties = BTreeSet::new();

        // Group trace indices by prefix, level by level; probabilities stay
        // rational throughout (weights over the common denominator).
        let ratio =
            |num: u64, den: u64| BigRational::new(num.into(), den.into());
        let mut e_never = BigRational::zero();
        for (trace, w) in enumeration.iter() {
            let never = crate::outcome(spec, trace, InterventionOption::Never).unwrap();
            e_never +=
                ratio(w, enumeration.weight_denom) * BigRational::from_i64(never).unwrap();
        }

        let root = Self::solve_level(spec, &enumeration, &indices_all(&enumeration), 1, &mut decisions, &mut ties);

        let root_value = root.best.to_f64().unwrap();
        let e_never_f = e_never.to_f64().unwrap();
        PerfectPolicy {
            spec: *spec,
            decisions,
            ties,
            root_value,
            e_never: e_never_f,
            root_uplift: (root.best - e_never).to_f64().unwrap(),
        }
    }

    /// Solve all prefixes of length `level` among `indices` (trace indices
    /// sharing the prefix of length `level − 1`), returning the subtree's
    /// expected best value weighted by its total probability mass.
    fn solve_level(
        spec: &ProcessSpec,
        enumeration: &Enumeration,
        indices: &[usize],
        level: usize,
        decisions: &mut BTreeMap<PrefixKey, NodeValue>,
        ties: &mut BTreeSet<PrefixKey>,
    ) -> SolvedNode {
        // 1 group the compatible traces by their next observed event.
        let mut groups: BTreeMap<(crate::Event, i64), Vec<usize>> = BTreeMap::new();
        for &i in indices {
            let t = &enumeration.traces[i];
            groups.entry((t.events[level - 1], t.case_var)).or_default().push(i);
        }

        let ratio = |num: u64, den: u64| BigRational::new(num.into(), den.into());
        let mut total_best = BigRational::zero();
        let mut total_weight = BigRational::zero();

        // 2 solve each child prefix: v_intervene from the counterfactuals,
        //   v_wait by recursing one level deeper (or E[never] at the leaf).
        for ((_event, case_var), group) in groups {
            let group_weight: BigRational = group
                .iter()
                .map(|&i| ratio(enumeration.weights[i], enumeration.weight_denom))
                .sum();

            let mut v_intervene = BigRational::zero();
            for &i in &group {
                let t = &enumeration.traces[i];
                let v = crate::outcome(spec, t, InterventionOption::AtEvent(level)).unwrap();
                v_intervene +=
                    ratio(enumeration.weights[i], enumeration.weight_denom)
                        * BigRational::from_i64(v).unwrap();
            }
            v_intervene /= group_weight.clone();

            let v_wait = if level == spec.num_events {
                let mut e = BigRational::zero();
                for &i in &group {
                    let t = &enumeration.traces[i];
                    let v = crate::outcome(spec, t, InterventionOption::Never).unwrap();
                    e += ratio(enumeration.weights[i], enumeration.weight_denom)
                        * BigRational::from_i64(v).unwrap();
                }
                e / group_weight.clone()
            } else {
                let child = Self::solve_level(spec, enumeration, &group, level + 1, decisions, ties);
                child.best / child.weight
            };

            // 3 decide: strict improvement intervenes; ties wait.
            let key = {
                let t = &enumeration.traces[group[0]];
                PrefixKey::new(spec, &t.events[..level], case_var)
            };
            let decision = if v_intervene > v_wait { Action::Intervene } else { Action::Wait };
            if v_intervene == v_wait {
                ties.insert(key.clone());
            }
            let best = if decision == Action::Intervene { v_intervene.clone() } else { v_wait.clone() };
            decisions.insert(
                key,
                NodeValue {
                    v_intervene: v_intervene.to_f64().unwrap(),
                    v_wait: v_wait.to_f64().unwrap(),
                    decision,
                },
            );

            total_best += best * group_weight.clone();
            total_weight += group_weight;
        }

        SolvedNode { best: total_best, weight: total_weight }
    }

    pub fn spec(&self) -> &ProcessSpec {
        &self.spec
    }

    /// The solved node for an observable prefix.
    pub fn node(&self, key: &PrefixKey) -> Result<&NodeValue> {
        self.decisions.get(key).ok_or_else(|| Error::PolicyUndefined(key.to_string()))
    }

    pub fn decisions(&self) -> &BTreeMap<PrefixKey, NodeValue> {
        &self.decisions
    }

    /// Dump every prefix decision to CSV, in canonical key order.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
        writer
            .write_record(["prefix_key", "v_intervene", "v_wait", "decision"])
            .map_err(|e| Error::io(path, e))?;
        for (key, node) in &self.decisions {
            writer
                .write_record([
                    key.as_str().to_string(),
                    format!("{}", node.v_intervene),
                    format!("{}", node.v_wait),
                    match node.decision {
                        Action::Intervene => "intervene".to_string(),
                        Action::Wait => "wait".to_string(),
                    },
                ])
                .map_err(|e| Error::io(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

impl Policy for PerfectPolicy {
    fn decide(&self, obs: &PrefixObservation) -> Result<Action> {
        Ok(self.node(&PrefixKey::of(obs))?.decision)
    }
}

/// The intervention option a policy produces on a fully revealed trace,
/// honoring the one-intervention guard.
pub fn policy_option(
    spec: &ProcessSpec,
    policy: &dyn Policy,
    trace: &LatentTrace,
) -> Result<InterventionOption> {
    for k in 1..=spec.num_events {
        let obs = trace.prefix(spec, k, false);
        if policy.decide(&obs)? == Action::Intervene {
            return Ok(InterventionOption::AtEvent(k));
        }
    }
    Ok(InterventionOption::Never)
}

/// Exact expected uplift of a policy: `E[outcome(policy) − outcome(never)]`
/// over the true trace distribution, by full enumeration.
pub fn evaluate_policy_exact(spec: &ProcessSpec, policy: &dyn Policy) -> Result<f64> {
    let enumeration = enumerate_state_space(spec);
    let mut total = BigRational::zero();
    for (trace, w) in enumeration.iter() {
        let option = policy_option(spec, policy, trace)?;
        let v = crate::outcome(spec, trace, option)?;
        let never = crate::outcome(spec, trace, InterventionOption::Never)?;
        total += BigRational::new(w.into(), enumeration.weight_denom.into())
            * BigRational::from_i64(v - never).unwrap();
    }
    Ok(total.to_f64().unwrap())
}

/// Exact expected uplift of the uniformly randomized assignment: the mean of
/// the per-option exact uplifts (the uplift of "never" being zero).
pub fn evaluate_rct_exact(spec: &ProcessSpec) -> f64 {
    let enumeration = enumerate_state_space(spec);
    let options = InterventionOption::all(spec);
    let mut total = BigRational::zero();
    for (trace, w) in enumeration.iter() {
        let never = crate::outcome(spec, trace, InterventionOption::Never).unwrap();
        for &opt in &options {
            let v = crate::outcome(spec, trace, opt).unwrap();
            total += BigRational::new(w.into(), enumeration.weight_denom.into())
                * BigRational::from_i64(v - never).unwrap();
        }
    }
    total /= BigRational::from_usize(options.len()).unwrap();
    total.to_f64().unwrap()
}

/// Total uplift of a policy on a sampled test set: Σ over cases of
/// `outcome(chosen option) − outcome(never)`, read off the counterfactual
/// tables (integer-exact).
pub fn evaluate_policy_sampled(
    spec: &ProcessSpec,
    policy: &dyn Policy,
    test_set: &[CounterfactualTable],
) -> Result<i64> {
    let mut total = 0;
    for table in test_set {
        let option = policy_option(spec, policy, &table.trace)?;
        total += table.outcome(option) - table.never();
    }
    Ok(total)
}

/// Total uplift on a test set when every case's option is drawn uniformly.
pub fn evaluate_rct_sampled(
    spec: &ProcessSpec,
    test_set: &[CounterfactualTable],
    rng: &mut impl Rng,
) -> i64 {
    test_set
        .iter()
        .map(|table| {
            let option = rct_option(spec, rng);
            table.outcome(option) - table.never()
        })
        .sum()
}

/// Sample a seeded test set of counterfactual tables.
pub fn sample_test_set(
    spec: &ProcessSpec,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<CounterfactualTable> {
    (0..n)
        .map(|_| counterfactual_table(spec, &crate::sample_trace(spec, rng)))
        .collect()
}

fn indices_all(enumeration: &Enumeration) -> Vec<usize> {
    (0..enumeration.len()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{Activity, Event, ProcessId};
    use crate::rng::{stream_rng, Stream};

    fn p1_trace(spec: &[(Activity, i64)]) -> LatentTrace {
        LatentTrace {
            events: spec.iter().map(|&(a, v)| Event::new(a, v)).collect(),
            case_var: 1,
            probability: 0.0,
        }
    }

    #[test]
    fn prefix_key_formatting() {
        let spec = ProcessSpec::p1();
        let key = PrefixKey::new(
            &spec,
            &[Event::new(Activity::B, 2), Event::new(Activity::A, 5)],
            1,
        );
        assert_eq!(key.as_str(), "P1|B:2,A:5|cv=1");
    }

    #[test]
    fn perfect_policy_p1_exact_values() {
        let spec = ProcessSpec::p1();
        let policy = PerfectPolicy::build(&spec);
        // E[never] = 3 × E[attr] = 3 × 2 = 6; optimal play adds 13/8.
        assert!((policy.e_never - 6.0).abs() < 1e-12);
        assert!((policy.root_uplift - 13.0 / 8.0).abs() < 1e-12);
        assert!((policy.root_value - 7.625).abs() < 1e-12);
    }

    #[test]
    fn perfect_policy_p2_exact_values() {
        let spec = ProcessSpec::p2();
        let policy = PerfectPolicy::build(&spec);
        // E[never] = E[cv] × E[Σattr] = 5.5 × 4.5 = 24.75.
        assert!((policy.e_never - 24.75).abs() < 1e-12);
        assert!((policy.root_uplift - 48.0 / 25.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_policy_terminal_node_example() {
        // At the last P1 event of (B:2, A:5, B:5): intervening doubles the 5
        // (17), waiting keeps 12.
        let spec = ProcessSpec::p1();
        let policy = PerfectPolicy::build(&spec);
        let key = PrefixKey::new(
            &spec,
            &[Event::new(Activity::B, 2), Event::new(Activity::A, 5), Event::new(Activity::B, 5)],
            1,
        );
        let node = policy.node(&key).unwrap();
        assert!((node.v_intervene - 17.0).abs() < 1e-12);
        assert!((node.v_wait - 12.0).abs() < 1e-12);
        assert_eq!(node.decision, Action::Intervene);
    }

    #[test]
    fn perfect_policy_tie_waits() {
        // A terminal attribute of 0 after an A has appeared: doubling 0
        // changes nothing, so it is an exact tie and the policy waits.
        let spec = ProcessSpec::p1();
        let policy = PerfectPolicy::build(&spec);
        let key = PrefixKey::new(
            &spec,
            &[Event::new(Activity::A, 1), Event::new(Activity::B, 2), Event::new(Activity::B, 0)],
            1,
        );
        let node = policy.node(&key).unwrap();
        assert_eq!(node.v_intervene, node.v_wait);
        assert_eq!(node.decision, Action::Wait);
        assert!(policy.ties.contains(&key));
    }

    #[test]
    fn root_value_matches_exact_evaluation_of_extracted_policy() {
        for spec in [ProcessSpec::p1(), ProcessSpec::p2()] {
            let policy = PerfectPolicy::build(&spec);
            let evaluated = evaluate_policy_exact(&spec, &policy).unwrap();
            assert!(
                (evaluated - policy.root_uplift).abs() < 1e-9,
                "{}: eval {evaluated} vs root {}",
                spec.id,
                policy.root_uplift
            );
        }
    }

    #[test]
    fn perfect_dominates_fixed_baselines() {
        for spec in [ProcessSpec::p1(), ProcessSpec::p2()] {
            let perfect = PerfectPolicy::build(&spec).root_uplift;
            assert!(perfect > evaluate_policy_exact(&spec, &NeverPolicy).unwrap());
            for k in 1..=spec.num_events {
                assert!(perfect >= evaluate_policy_exact(&spec, &AlwaysAtK(k)).unwrap());
            }
            assert!(perfect > evaluate_rct_exact(&spec));
        }
    }

    #[test]
    fn tie_flip_leaves_exact_uplift_unchanged() {
        // Flipping the decision on every exact tie cannot change the value.
        struct TieFlipped<'a>(&'a PerfectPolicy);
        impl Policy for TieFlipped<'_> {
            fn decide(&self, obs: &PrefixObservation) -> Result<Action> {
                let key = PrefixKey::of(obs);
                let node = self.0.node(&key)?;
                Ok(if self.0.ties.contains(&key) {
                    match node.decision {
                        Action::Wait => Action::Intervene,
                        Action::Intervene => Action::Wait,
                    }
                } else {
                    node.decision
                })
            }
        }
        for spec in [ProcessSpec::p1(), ProcessSpec::p2()] {
            let policy = PerfectPolicy::build(&spec);
            assert!(!policy.ties.is_empty() || spec.id == ProcessId::P2);
            let flipped = evaluate_policy_exact(&spec, &TieFlipped(&policy)).unwrap();
            assert!((flipped - policy.root_uplift).abs() < 1e-12);
        }
    }

    #[test]
    fn rct_exact_values() {
        // P1 closed form: uniform over 4 options; E[uplift | at k] is
        // identical across k, giving −33/32 per case.
        let p1 = evaluate_rct_exact(&ProcessSpec::p1());
        assert!((p1 - (-33.0 / 32.0)).abs() < 1e-9, "got {p1}");
        let p2 = evaluate_rct_exact(&ProcessSpec::p2());
        assert!((p2 - (-3301.0 / 90.0)).abs() < 1e-9, "got {p2}");
        assert!(p1 < 0.0 && p2 < 0.0);
    }

    #[test]
    fn never_policy_scores_zero() {
        let spec = ProcessSpec::p1();
        assert_eq!(evaluate_policy_exact(&spec, &NeverPolicy).unwrap(), 0.0);
        let mut rng = stream_rng(3, Stream::TestSet);
        let test = sample_test_set(&spec, 100, &mut rng);
        assert_eq!(evaluate_policy_sampled(&spec, &NeverPolicy, &test).unwrap(), 0);
    }

    #[test]
    fn sampled_evaluation_on_fixed_cases() {
        // Two hand-built P1 cases under "always at 1":
        // (B:5,B:1,B:2): at_1 −7 vs never 8 → −15; (A:1,B:0,B:0): 2 vs 1 → +1.
        let spec = ProcessSpec::p1();
        let tables = vec![
            counterfactual_table(&spec, &p1_trace(&[(Activity::B, 5), (Activity::B, 1), (Activity::B, 2)])),
            counterfactual_table(&spec, &p1_trace(&[(Activity::A, 1), (Activity::B, 0), (Activity::B, 0)])),
        ];
        let total = evaluate_policy_sampled(&spec, &AlwaysAtK(1), &tables).unwrap();
        assert_eq!(total, -14);
    }

    #[test]
    fn rct_option_is_uniform() {
        let spec = ProcessSpec::p1();
        let mut rng = stream_rng(4, Stream::RctData);
        let n = 40_000;
        let mut counts = [0u32; 4];
        for _ in 0..n {
            counts[rct_option(&spec, &mut rng).index()] += 1;
        }
        for &c in &counts {
            let dev = (c as f64 - n as f64 / 4.0).abs();
            let sd = (n as f64 * 0.25 * 0.75).sqrt();
            assert!(dev < 4.0 * sd, "count {c} too far from uniform");
        }
    }

    #[test]
    fn perfect_policy_csv_dump() {
        let spec = ProcessSpec::p1();
        let policy = PerfectPolicy::build(&spec);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("perfect.csv");
        policy.export_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("prefix_key,v_intervene,v_wait,decision"));
        // 8 + 64 + 512 observable prefixes.
        assert_eq!(text.lines().count() - 1, policy.decisions().len());
        assert_eq!(policy.decisions().len(), 8 + 64 + 512);
    }

    #[test]
    fn perfect_policy_p2_prefix_count() {
        let policy = PerfectPolicy::build(&ProcessSpec::p2());
        // Level 1: S × 10 case vars; levels 2–4 branch over orders and
        // attributes; level 5 appends E to each level-4 prefix.
        let by_level: Vec<usize> = (1..=5)
            .map(|level| {
                policy
                    .decisions()
                    .keys()
                    .filter(|k| k.as_str().matches(':').count() == level)
                    .count()
            })
            .collect();
        assert_eq!(by_level[0], 10);
        assert_eq!(by_level.iter().sum::<usize>(), policy.decisions().len());
        assert_eq!(policy.decisions().len(), 1740);
    }
}
