//! Feature encoding, standardization, and the trainable function
//! approximators (a small sequence regressor and an exact tabular
//! estimator used as a verification double).

pub mod fastmath;
pub mod regressor;
pub mod tabular;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::process::{enumerate_state_space, PrefixObservation, ProcessId, ProcessSpec};
use crate::{Error, Result};

/// Mean/standard deviation of one scalar feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    /// Population moments of `values`; errors if the data is empty or
    /// constant (a zero std cannot standardize).
    pub fn fit(values: &[f64]) -> Result<Stats> {
        if values.is_empty() {
            return Err(Error::Config("cannot fit statistics on empty data".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 0.0 {
            return Err(Error::Config("cannot standardize a constant feature".into()));
        }
        Ok(Stats { mean, std })
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Standardization constants for the three scalar feature families. The
/// case-variable entry exists only where the process has a case variable,
/// the outcome entry only where outcomes serve as regression labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub attribute: Stats,
    pub case_var: Option<Stats>,
    pub outcome: Option<Stats>,
}

impl Standardizer {
    /// Fit from observed cases: attribute moments over every event of every
    /// trace, case-variable moments per case (only where it varies), outcome
    /// moments per case.
    pub fn fit_from_cases(
        spec: &ProcessSpec,
        traces: &[crate::LatentTrace],
        outcomes: &[i64],
    ) -> Result<Standardizer> {
        let attrs: Vec<f64> = traces
            .iter()
            .flat_map(|t| t.events.iter().map(|e| e.attribute as f64))
            .collect();
        let case_var = match spec.id {
            ProcessId::P1 => None,
            ProcessId::P2 => {
                let vs: Vec<f64> = traces.iter().map(|t| t.case_var as f64).collect();
                Some(Stats::fit(&vs)?)
            }
        };
        let outcome_vs: Vec<f64> = outcomes.iter().map(|&v| v as f64).collect();
        Ok(Standardizer {
            attribute: Stats::fit(&attrs)?,
            case_var,
            outcome: Some(Stats::fit(&outcome_vs)?),
        })
    }

    /// Exact population moments from the full enumeration (used by the
    /// online learner, which has no training split to fit on). Attribute
    /// moments pool all event positions; no outcome stats (rewards are fed
    /// raw).
    pub fn from_enumeration(spec: &ProcessSpec) -> Standardizer {
        let enumeration = enumerate_state_space(spec);
        let mut attr_m1 = 0.0;
        let mut attr_m2 = 0.0;
        let mut cv_m1 = 0.0;
        let mut cv_m2 = 0.0;
        for (trace, w) in enumeration.iter() {
            let p = w as f64 / enumeration.weight_denom as f64;
            for e in &trace.events {
                let v = e.attribute as f64;
                attr_m1 += p * v / spec.num_events as f64;
                attr_m2 += p * v * v / spec.num_events as f64;
            }
            let cv = trace.case_var as f64;
            cv_m1 += p * cv;
            cv_m2 += p * cv * cv;
        }
        let attribute = Stats { mean: attr_m1, std: (attr_m2 - attr_m1 * attr_m1).sqrt() };
        let case_var = match spec.id {
            ProcessId::P1 => None,
            ProcessId::P2 => Some(Stats { mean: cv_m1, std: (cv_m2 - cv_m1 * cv_m1).sqrt() }),
        };
        Standardizer { attribute, case_var, outcome: None }
    }

    pub fn case_var_stats(&self) -> Result<&Stats> {
        self.case_var.as_ref().ok_or(Error::UnfittedStandardizer)
    }

    pub fn outcome_stats(&self) -> Result<&Stats> {
        self.outcome.as_ref().ok_or(Error::UnfittedStandardizer)
    }
}

/// How a prefix is encoded for the regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Q-function input: the intervention channel marks the step at which
    /// this episode's intervention happened, if it already has. Without it,
    /// post-intervention states would be indistinguishable from fresh ones,
    /// and the repeat penalty observed after one would corrupt the value of
    /// the other.
    Rl { intervened_at: Option<usize> },
    /// Uplift-regressor input: the intervention channel is set on the
    /// newest step iff the decision being scored is "intervene now".
    Ci { intervene_now: bool },
}

/// A prefix rendered as model input: `steps` is `(seq_len, feature_dim)`
/// with rows beyond the prefix all-zero except the padding flag; the case
/// variable (where the process has one) rides separately, injected after the
/// recurrent stack.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPrefix {
    pub steps: Array2<f64>,
    pub side_input: Option<f64>,
}

/// Per-step feature width: one-hot activity + padding flag + standardized
/// attribute + intervention channel. Both modes carry the channel; they
/// differ in what it marks.
pub fn feature_dim(spec: &ProcessSpec) -> usize {
    spec.alphabet().len() + 3
}

/// Width of the per-sequence side input: the case variable, where the
/// process has one.
pub fn side_dim(spec: &ProcessSpec) -> usize {
    match spec.id {
        ProcessId::P1 => 0,
        ProcessId::P2 => 1,
    }
}

/// Encode an observed prefix. Padded steps cannot carry signal by
/// construction: only the first `prefix.len()` rows are written from data,
/// the rest hold the padding flag alone.
pub fn encode(
    prefix: &PrefixObservation,
    standardizer: &Standardizer,
    mode: EncodeMode,
) -> Result<EncodedPrefix> {
    let spec = ProcessSpec::new(prefix.spec_id);
    let alphabet = spec.alphabet().len();
    let f = feature_dim(&spec);
    let mut steps = Array2::zeros((spec.num_events, f));
    for (t, event) in prefix.observed_events.iter().enumerate() {
        steps[[t, spec.one_hot_index(event.activity)]] = 1.0;
        steps[[t, alphabet + 1]] = standardizer.attribute.standardize(event.attribute as f64);
    }
    for t in prefix.len()..spec.num_events {
        steps[[t, alphabet]] = 1.0;
    }
    match mode {
        EncodeMode::Ci { intervene_now: true } => {
            steps[[prefix.len() - 1, alphabet + 2]] = 1.0;
        }
        EncodeMode::Rl { intervened_at: Some(k) } => {
            debug_assert!((1..=prefix.len()).contains(&k));
            steps[[k - 1, alphabet + 2]] = 1.0;
        }
        _ => {}
    }
    let side_input = match spec.id {
        ProcessId::P1 => None,
        ProcessId::P2 => {
            Some(standardizer.case_var_stats()?.standardize(prefix.case_var as f64))
        }
    };
    Ok(EncodedPrefix { steps, side_input })
}

/// One named parameter tensor flattened for storage; JSON round-trips `f64`
/// values exactly (shortest-round-trip formatting), so saved states reload
/// bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorBlob {
    pub fn from_array(name: &str, a: &Array2<f64>) -> TensorBlob {
        TensorBlob {
            name: name.to_string(),
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::Config(format!("tensor {} has inconsistent shape: {e}", self.name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{Activity, Event};

    fn p1_std() -> Standardizer {
        Standardizer {
            attribute: Stats { mean: 2.0, std: 1.8 },
            case_var: None,
            outcome: Some(Stats { mean: 0.0, std: 1.0 }),
        }
    }

    fn obs_p1(events: &[(Activity, i64)]) -> PrefixObservation {
        PrefixObservation {
            spec_id: ProcessId::P1,
            observed_events: events.iter().map(|&(a, v)| Event::new(a, v)).collect(),
            case_var: 1,
            intervened_before: false,
        }
    }

    #[test]
    fn stats_round_trip_is_identity() {
        let stats = Stats::fit(&[1.0, 2.0, 4.0, 9.0]).unwrap();
        for v in [-3.0, 0.0, 2.5, 100.0] {
            assert!((stats.destandardize(stats.standardize(v)) - v).abs() < 1e-10);
        }
    }

    #[test]
    fn stats_reject_degenerate_data() {
        assert!(Stats::fit(&[]).is_err());
        assert!(Stats::fit(&[3.0, 3.0, 3.0]).is_err());
    }

    #[test]
    fn standardized_attribute_example() {
        // Attribute 5 under fitted mean 2 and std 1.8.
        let enc = encode(&obs_p1(&[(Activity::B, 5)]), &p1_std(), EncodeMode::Rl { intervened_at: None }).unwrap();
        let z = enc.steps[[0, 3]];
        assert!((z - 5.0f64 / 3.0).abs() < 1e-12, "got {z}");
    }

    #[test]
    fn padding_rows_carry_only_the_padding_flag() {
        let enc = encode(&obs_p1(&[(Activity::B, 5)]), &p1_std(), EncodeMode::Rl { intervened_at: None }).unwrap();
        assert_eq!(enc.steps.dim(), (3, 5));
        for t in 1..3 {
            assert_eq!(enc.steps[[t, 2]], 1.0, "padding flag at step {t}");
            assert_eq!(enc.steps.row(t).iter().filter(|&&v| v != 0.0).count(), 1);
        }
        // Real steps: one-hot sums to 1, padding flag 0.
        assert_eq!(enc.steps[[0, 0]] + enc.steps[[0, 1]], 1.0);
        assert_eq!(enc.steps[[0, 2]], 0.0);
        assert!(enc.side_input.is_none());
    }

    #[test]
    fn ci_encodings_differ_only_in_last_step_flag() {
        let obs = obs_p1(&[(Activity::B, 2), (Activity::A, 5)]);
        let on = encode(&obs, &p1_std(), EncodeMode::Ci { intervene_now: true }).unwrap();
        let off = encode(&obs, &p1_std(), EncodeMode::Ci { intervene_now: false }).unwrap();
        assert_eq!(on.steps.dim(), (3, 5));
        let mut diffs = Vec::new();
        for ((idx, a), b) in on.steps.indexed_iter().zip(off.steps.iter()) {
            if a != b {
                diffs.push(idx);
            }
        }
        assert_eq!(diffs, vec![(1, 4)], "flag sits on the newest step only");
        assert_eq!(on.steps[[1, 4]], 1.0);
    }

    #[test]
    fn rl_encodings_mark_the_intervened_step() {
        let obs = obs_p1(&[(Activity::B, 2), (Activity::A, 5)]);
        let fresh = encode(&obs, &p1_std(), EncodeMode::Rl { intervened_at: None }).unwrap();
        let marked =
            encode(&obs, &p1_std(), EncodeMode::Rl { intervened_at: Some(1) }).unwrap();
        let mut diffs = Vec::new();
        for ((idx, a), b) in marked.steps.indexed_iter().zip(fresh.steps.iter()) {
            if a != b {
                diffs.push(idx);
            }
        }
        assert_eq!(diffs, vec![(0, 4)], "flag sits on the intervened step only");
        assert_eq!(marked.steps[[0, 4]], 1.0);
        // A fresh prefix encodes identically in both modes: the decision
        // surface (no intervention yet, none hypothesized) is shared.
        let ci_off = encode(&obs, &p1_std(), EncodeMode::Ci { intervene_now: false }).unwrap();
        assert_eq!(fresh.steps, ci_off.steps);
    }

    #[test]
    fn p2_case_var_routes_to_side_input() {
        let spec = ProcessSpec::p2();
        let std = Standardizer::from_enumeration(&spec);
        let obs = PrefixObservation {
            spec_id: ProcessId::P2,
            observed_events: vec![Event::new(Activity::S, 0)],
            case_var: 10,
            intervened_before: false,
        };
        let enc = encode(&obs, &std, EncodeMode::Rl { intervened_at: None }).unwrap();
        let cv = std.case_var.unwrap();
        assert!((enc.side_input.unwrap() - cv.standardize(10.0)).abs() < 1e-12);
        assert_eq!(enc.steps.dim(), (5, 9));
    }

    #[test]
    fn missing_case_var_stats_error_on_p2() {
        let obs = PrefixObservation {
            spec_id: ProcessId::P2,
            observed_events: vec![Event::new(Activity::S, 0)],
            case_var: 3,
            intervened_before: false,
        };
        let bad = Standardizer { attribute: Stats { mean: 0.9, std: 1.27 }, case_var: None, outcome: None };
        assert!(matches!(
            encode(&obs, &bad, EncodeMode::Rl { intervened_at: None }),
            Err(Error::UnfittedStandardizer)
        ));
    }

    #[test]
    fn enumeration_moments_match_closed_forms() {
        let s1 = Standardizer::from_enumeration(&ProcessSpec::p1());
        assert!((s1.attribute.mean - 2.0).abs() < 1e-12);
        assert!((s1.attribute.std - 3.5f64.sqrt()).abs() < 1e-12);
        assert!(s1.case_var.is_none());

        let s2 = Standardizer::from_enumeration(&ProcessSpec::p2());
        // Attributes pooled over S, E, XOR (all 0), D1 (mean 2), D2 (mean 2.5).
        assert!((s2.attribute.mean - 0.9).abs() < 1e-12);
        let cv = s2.case_var.unwrap();
        assert!((cv.mean - 5.5).abs() < 1e-12);
        assert!((cv.std - 8.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fit_from_cases_splits_feature_families() {
        let spec = ProcessSpec::p1();
        let traces = vec![
            crate::LatentTrace {
                events: vec![Event::new(Activity::B, 0), Event::new(Activity::B, 2), Event::new(Activity::A, 5)],
                case_var: 1,
                probability: 0.0,
            },
            crate::LatentTrace {
                events: vec![Event::new(Activity::A, 1), Event::new(Activity::B, 1), Event::new(Activity::B, 5)],
                case_var: 1,
                probability: 0.0,
            },
        ];
        let std = Standardizer::fit_from_cases(&spec, &traces, &[7, 9]).unwrap();
        assert!((std.attribute.mean - 14.0 / 6.0).abs() < 1e-12);
        assert!(std.case_var.is_none(), "constant case variable is not fitted");
        assert!((std.outcome.unwrap().mean - 8.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_blob_round_trip() {
        let a = Array2::from_shape_fn((3, 4), |(r, c)| (r * 7 + c) as f64 / 3.0);
        let blob = TensorBlob::from_array("w", &a);
        let json = serde_json::to_string(&blob).unwrap();
        let back: TensorBlob = serde_json::from_str(&json).unwrap();
        let restored = back.to_array().unwrap();
        assert_eq!(a, restored);
        for (x, y) in a.iter().zip(restored.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
