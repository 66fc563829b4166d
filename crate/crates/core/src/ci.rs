//! Direct uplift pipeline: generate a randomized-intervention dataset,
//! expand each case into per-prefix training samples, fit the outcome
//! regressor with early stopping, score treatment effects, and pick the
//! intervention threshold that maximizes realized uplift on the validation
//! split.
//!
//! The same machinery runs in two modes: the neural regressor trained on
//! sampled randomized data (the deployable pipeline), and an exact
//! conditional-mean table built from the full enumerated state space, which
//! bounds what any outcome regressor of this form can achieve and anchors
//! the tests.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::nn::regressor::SequenceRegressor;
use crate::nn::tabular::TabularEstimator;
use crate::nn::{encode, feature_dim, side_dim, EncodeMode, EncodedPrefix, Standardizer};
use crate::policies::{
    enumerate_prefixes, evaluate_policy_exact, rct_option, MapPolicy, Policy, PrefixKey,
};
use crate::process::{
    counterfactual_table, enumerate_state_space, outcome, sample_trace, Action,
    CounterfactualTable, InterventionOption, LatentTrace, PrefixObservation, ProcessSpec,
};
use crate::{Error, Result};

/// One case of the randomized experiment: the latent trace, the uniformly
/// assigned intervention option, and the realized final outcome.
#[derive(Debug, Clone)]
pub struct RctCase {
    pub case_id: u64,
    pub trace: LatentTrace,
    pub option: InterventionOption,
    pub outcome: i64,
}

/// Sample `n_cases` randomized cases (trace, then option, per case).
pub fn build_rct_cases(
    spec: &ProcessSpec,
    n_cases: usize,
    rng: &mut impl Rng,
) -> Result<Vec<RctCase>> {
    (0..n_cases)
        .map(|case_id| {
            let trace = sample_trace(spec, rng);
            let option = rct_option(spec, rng);
            let outcome = outcome(spec, &trace, option)?;
            Ok(RctCase { case_id: case_id as u64, trace, option, outcome })
        })
        .collect()
}

/// One training sample: an encoded prefix (with the intervene-now channel)
/// and the standardized final outcome of its case.
#[derive(Debug, Clone)]
pub struct CiSample {
    pub encoded: EncodedPrefix,
    pub label: f64,
}

/// A fresh outcome regressor shaped for `spec`'s uplift encoding: scalar
/// head, one step per process event.
pub fn ci_model(
    spec: &ProcessSpec,
    hidden: usize,
    learning_rate: f64,
    rng: &mut impl Rng,
) -> SequenceRegressor {
    SequenceRegressor::new(
        feature_dim(spec),
        hidden,
        side_dim(spec),
        1,
        spec.num_events,
        learning_rate,
        rng,
    )
}

/// Prefix-expanded randomized dataset, split by case so every prefix of a
/// case lands on the same side.
#[derive(Debug, Clone)]
pub struct CiDataset {
    pub spec: ProcessSpec,
    pub standardizer: Standardizer,
    pub train: Vec<CiSample>,
    pub val: Vec<CiSample>,
    /// The validation cases themselves, for threshold selection.
    pub val_cases: Vec<RctCase>,
}

/// Expand a case into per-prefix samples. A case intervened at event `n`
/// yields prefixes `1..=n` with the intervene-now channel set on length `n`
/// only; prefixes past the intervention carry no decision and are dropped.
/// A never-intervened case yields all prefixes, channel clear.
fn expand_case(
    spec: &ProcessSpec,
    case: &RctCase,
    standardizer: &Standardizer,
    out: &mut Vec<CiSample>,
) -> Result<()> {
    let label = standardizer.outcome_stats()?.standardize(case.outcome as f64);
    let max_len = match case.option {
        InterventionOption::Never => spec.num_events,
        InterventionOption::AtEvent(n) => n,
    };
    for len in 1..=max_len {
        let intervene_now = matches!(case.option, InterventionOption::AtEvent(n) if n == len);
        let obs = PrefixObservation {
            spec_id: spec.id,
            observed_events: case.trace.events[..len].to_vec(),
            case_var: case.trace.case_var,
            intervened_before: false,
        };
        let encoded = encode(&obs, standardizer, EncodeMode::Ci { intervene_now })?;
        out.push(CiSample { encoded, label });
    }
    Ok(())
}

/// Build the full training corpus: sample cases, split 80/20 by case,
/// fit the standardizer on the training split only, prefix-expand both
/// splits.
pub fn build_rct_dataset(
    spec: &ProcessSpec,
    n_cases: usize,
    rng: &mut impl Rng,
) -> Result<CiDataset> {
    let cases = build_rct_cases(spec, n_cases, rng)?;
    let n_train = n_cases * 8 / 10;
    if n_train == 0 || n_train == n_cases {
        return Err(Error::Config(format!(
            "{n_cases} cases cannot be split 80/20 by case"
        )));
    }
    let (train_cases, val_cases) = cases.split_at(n_train);
    let train_traces: Vec<LatentTrace> = train_cases.iter().map(|c| c.trace.clone()).collect();
    let train_outcomes: Vec<i64> = train_cases.iter().map(|c| c.outcome).collect();
    let standardizer = Standardizer::fit_from_cases(spec, &train_traces, &train_outcomes)?;
    let mut train = Vec::new();
    for case in train_cases {
        expand_case(spec, case, &standardizer, &mut train)?;
    }
    let mut val = Vec::new();
    for case in val_cases {
        expand_case(spec, case, &standardizer, &mut val)?;
    }
    Ok(CiDataset {
        spec: spec.clone(),
        standardizer,
        train,
        val,
        val_cases: val_cases.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_val_mae: f64,
    pub curve: Vec<EpochStat>,
}

/// Validation MAE in bounded-size forward passes.
fn batched_mae(model: &SequenceRegressor, samples: &[CiSample]) -> Result<f64> {
    let mut abs_sum = 0.0;
    for chunk in samples.chunks(2048) {
        let batch: Vec<&EncodedPrefix> = chunk.iter().map(|s| &s.encoded).collect();
        let labels: Vec<f64> = chunk.iter().map(|s| s.label).collect();
        abs_sum += model.evaluate_loss(&batch, None, &labels)? * chunk.len() as f64;
    }
    Ok(abs_sum / samples.len() as f64)
}

/// Fit the outcome regressor: shuffled batches over the training split,
/// validation MAE after each epoch, stop after `patience` epochs without
/// improvement, restore the best-validation parameters.
pub fn train_ci(
    model: &mut SequenceRegressor,
    dataset: &CiDataset,
    max_epochs: usize,
    patience: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    if dataset.train.is_empty() {
        return Err(Error::NoData);
    }
    if dataset.val.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut curve = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_snapshot = model.snapshot();
    let mut stale = 0usize;
    for epoch in 1..=max_epochs {
        order.shuffle(rng);
        let mut abs_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&EncodedPrefix> =
                chunk.iter().map(|&i| &dataset.train[i].encoded).collect();
            let labels: Vec<f64> = chunk.iter().map(|&i| dataset.train[i].label).collect();
            abs_sum += model.train_step_labels(&batch, &labels)? * chunk.len() as f64;
        }
        let train_mae = abs_sum / dataset.train.len() as f64;
        let val_mae = batched_mae(model, &dataset.val)?;
        curve.push(EpochStat { epoch, train_mae, val_mae });
        if val_mae < best_val {
            best_val = val_mae;
            best_snapshot = model.snapshot();
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                break;
            }
        }
    }
    model.restore(&best_snapshot);
    Ok(TrainReport { epochs: curve.len(), best_val_mae: best_val, curve })
}

/// Write the per-epoch curve as `epoch,train_mae,val_mae`.
pub fn export_training_curve(path: &Path, report: &TrainReport) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
    writer
        .write_record(["epoch", "train_mae", "val_mae"])
        .map_err(|e| Error::io(path, e))?;
    for stat in &report.curve {
        writer
            .write_record([
                stat.epoch.to_string(),
                stat.train_mae.to_string(),
                stat.val_mae.to_string(),
            ])
            .map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Treatment-effect estimates for a batch of no-prior-intervention
/// prefixes: de-standardized `prediction(intervene now) − prediction(wait)`.
pub fn ite_batch(
    model: &SequenceRegressor,
    standardizer: &Standardizer,
    prefixes: &[&PrefixObservation],
) -> Result<Vec<f64>> {
    let out_std = standardizer.outcome_stats()?.std;
    let mut ites = Vec::with_capacity(prefixes.len());
    for chunk in prefixes.chunks(1024) {
        let mut encoded = Vec::with_capacity(chunk.len() * 2);
        for prefix in chunk {
            encoded.push(encode(prefix, standardizer, EncodeMode::Ci { intervene_now: false })?);
            encoded.push(encode(prefix, standardizer, EncodeMode::Ci { intervene_now: true })?);
        }
        let preds = model.forward_batch(&encoded)?;
        for i in 0..chunk.len() {
            ites.push((preds[[2 * i + 1, 0]] - preds[[2 * i, 0]]) * out_std);
        }
    }
    Ok(ites)
}

/// The trained uplift policy: intervene at the first prefix whose estimated
/// effect clears the threshold.
pub struct CiModel {
    pub model: SequenceRegressor,
    pub standardizer: Standardizer,
    pub threshold: f64,
}

impl CiModel {
    pub fn ite(&self, prefix: &PrefixObservation) -> Result<f64> {
        Ok(ite_batch(&self.model, &self.standardizer, &[prefix])?[0])
    }

    /// Freeze the policy into a decision table over every observable prefix.
    pub fn decision_map(&self, spec: &ProcessSpec) -> Result<MapPolicy> {
        ci_decision_map(spec, &self.model, &self.standardizer, self.threshold)
    }
}

impl Policy for CiModel {
    fn decide(&self, obs: &PrefixObservation) -> Result<Action> {
        if obs.intervened_before {
            return Ok(Action::Wait);
        }
        Ok(if self.ite(obs)? > self.threshold { Action::Intervene } else { Action::Wait })
    }
}

/// Batched decision table for a regressor + threshold.
pub fn ci_decision_map(
    spec: &ProcessSpec,
    model: &SequenceRegressor,
    standardizer: &Standardizer,
    threshold: f64,
) -> Result<MapPolicy> {
    let prefixes = enumerate_prefixes(spec);
    let obs_refs: Vec<&PrefixObservation> = prefixes.values().collect();
    let ites = ite_batch(model, standardizer, &obs_refs)?;
    let decisions = prefixes
        .keys()
        .cloned()
        .zip(ites.iter().map(|&e| if e > threshold { Action::Intervene } else { Action::Wait }))
        .collect();
    Ok(MapPolicy { decisions })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// Realized validation uplift per case at that threshold.
    pub uplift: f64,
}

fn candidate_thresholds(mut values: Vec<f64>) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(values.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(f64::INFINITY);
    candidates
}

/// Pick the threshold maximizing realized uplift on validation cases.
/// `ites[i]` holds case `i`'s effect estimates for prefixes `1..=T`; the
/// policy intervenes at the first prefix whose estimate exceeds the
/// threshold. Candidates are midpoints between consecutive distinct
/// estimates plus ±∞ sentinels; ties go to the larger threshold (fewer
/// interventions).
pub fn select_threshold(
    ites: &[Vec<f64>],
    tables: &[CounterfactualTable],
) -> Result<ThresholdChoice> {
    if tables.is_empty() {
        return Err(Error::EmptyValidation);
    }
    if ites.len() != tables.len() {
        return Err(Error::Config(format!(
            "{} effect vectors for {} validation cases",
            ites.len(),
            tables.len()
        )));
    }
    let candidates = candidate_thresholds(ites.iter().flatten().copied().collect());
    let n = tables.len() as f64;
    let mut best = None;
    for &th in &candidates {
        let mut total = 0i64;
        for (case_ites, table) in ites.iter().zip(tables) {
            let option = case_ites
                .iter()
                .position(|&e| e > th)
                .map(|i| InterventionOption::AtEvent(i + 1))
                .unwrap_or(InterventionOption::Never);
            total += table.outcome(option) - table.never();
        }
        let uplift = total as f64 / n;
        if best.is_none_or(|b: ThresholdChoice| uplift >= b.uplift) {
            best = Some(ThresholdChoice { threshold: th, uplift });
        }
    }
    Ok(best.expect("at least the sentinel candidates exist"))
}

/// Effect estimates for every prefix of every validation case, plus the
/// cases' counterfactual tables — the inputs to [`select_threshold`].
pub fn validation_ites(
    spec: &ProcessSpec,
    model: &SequenceRegressor,
    standardizer: &Standardizer,
    val_cases: &[RctCase],
) -> Result<(Vec<Vec<f64>>, Vec<CounterfactualTable>)> {
    let mut observations = Vec::with_capacity(val_cases.len() * spec.num_events);
    for case in val_cases {
        for len in 1..=spec.num_events {
            observations.push(PrefixObservation {
                spec_id: spec.id,
                observed_events: case.trace.events[..len].to_vec(),
                case_var: case.trace.case_var,
                intervened_before: false,
            });
        }
    }
    let obs_refs: Vec<&PrefixObservation> = observations.iter().collect();
    let flat = ite_batch(model, standardizer, &obs_refs)?;
    let ites = flat.chunks(spec.num_events).map(<[f64]>::to_vec).collect();
    let tables = val_cases
        .iter()
        .map(|c| counterfactual_table(spec, &c.trace))
        .collect();
    Ok((ites, tables))
}

/// Exact conditional-mean outcome table over the full state space, built
/// with enumeration weights: the `intervene_now = true` cell of a prefix
/// holds E[outcome | prefix, intervene at this event]; the `false` cell
/// holds E[outcome | prefix, option still open], i.e. the equal-weight
/// mixture of never and every later intervention — exactly the population
/// the randomized data presents to a regressor at that prefix.
pub fn tabular_ci(spec: &ProcessSpec) -> TabularEstimator {
    let enumeration = enumerate_state_space(spec);
    let mut table = TabularEstimator::new();
    for (trace, weight) in enumeration.iter() {
        let cf = counterfactual_table(spec, trace);
        let w = weight as f64;
        for k in 1..=spec.num_events {
            let key = PrefixKey::new(spec, &trace.events[..k], trace.case_var);
            table.add(key.clone(), true, cf.outcome(InterventionOption::AtEvent(k)) as f64, w);
            table.add(key.clone(), false, cf.never() as f64, w);
            for j in k + 1..=spec.num_events {
                table.add(key.clone(), false, cf.outcome(InterventionOption::AtEvent(j)) as f64, w);
            }
        }
    }
    table
}

/// Effect estimate per enumerated prefix from the exact table.
pub fn tabular_ite_map(
    spec: &ProcessSpec,
    table: &TabularEstimator,
) -> Result<BTreeMap<PrefixKey, f64>> {
    enumerate_prefixes(spec)
        .keys()
        .map(|key| Ok((key.clone(), table.predict(key, true)? - table.predict(key, false)?)))
        .collect()
}

/// Threshold search against the *exact* trace distribution: every candidate
/// policy is evaluated by full enumeration rather than on a sample. Used by
/// the exact-tabular mode, where both the effect estimates and the
/// evaluation are deterministic.
pub fn select_threshold_exact(
    spec: &ProcessSpec,
    ites: &BTreeMap<PrefixKey, f64>,
) -> Result<(ThresholdChoice, MapPolicy)> {
    if ites.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let candidates = candidate_thresholds(ites.values().copied().collect());
    let mut best: Option<(ThresholdChoice, MapPolicy)> = None;
    for &th in &candidates {
        let decisions: BTreeMap<PrefixKey, Action> = ites
            .iter()
            .map(|(k, &e)| (k.clone(), if e > th { Action::Intervene } else { Action::Wait }))
            .collect();
        let policy = MapPolicy { decisions };
        let uplift = evaluate_policy_exact(spec, &policy)?;
        if best.as_ref().is_none_or(|(b, _)| uplift >= b.uplift) {
            best = Some((ThresholdChoice { threshold: th, uplift }, policy));
        }
    }
    Ok(best.expect("at least the sentinel candidates exist"))
}
