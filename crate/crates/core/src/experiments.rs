//! Lead/disease scenarios and the baseline vs ResNet++ comparison.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::{generalization_report, GeneralizationReport};
use crate::models::{ClassifierConfig, ClassifierInput, ClassifierModel, ImputerConfig, ResNetPlusPlus};
use crate::preprocess::{select_columns, ChannelConfig, FrameDataset};
use crate::rng::SeededRng;
use crate::train::{predict_batched, train_baseline, train_classifier, train_imputer, History, TrainConfig};
use crate::wfdb::{CLASS_TABLE, HEALTHY};

pub use crate::synthetic::{make_synthetic_dataset, SyntheticClass, SyntheticSpec};

pub const INFERIOR_MI: &str = "Myocardial Infarction: inferior";

/// Classes standing for "antero MI" in scenario 2 by default.
pub const ANTERO_MI: [&str; 3] = [
    "Myocardial Infarction: anterior",
    "Myocardial Infarction: antero-septal",
    "Myocardial Infarction: antero-lateral",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOptions {
    /// Share of each training class's frames that go to training.
    pub train_fraction: f64,
    /// Keep every record's frames on one side of the split.
    pub group_by_record: bool,
    /// Disease classes trained on in scenario 2.
    pub antero_classes: Vec<String>,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            group_by_record: false,
            antero_classes: ANTERO_MI.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub scenario_id: u32,
    pub leads: ChannelConfig,
    pub train_classes: Vec<String>,
    pub train_fraction: f64,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Leads and training classes of a scenario.
pub fn scenario_definition(scenario_id: u32, opts: &ScenarioOptions) -> Result<(Vec<String>, Vec<String>)> {
    let (leads, mut classes): (Vec<&str>, Vec<String>) = match scenario_id {
        1 => (vec!["II", "III", "aVF"], vec![INFERIOR_MI.to_string()]),
        2 => (vec!["V1", "V2", "V3"], opts.antero_classes.clone()),
        other => return Err(Error::UnknownScenario(other)),
    };
    classes.push(HEALTHY.to_string());
    Ok((leads.into_iter().map(String::from).collect(), classes))
}

/// Split `dataset` for a scenario. Within each training class, a
/// `train_fraction` share of frames (or of records, when grouping) goes to
/// training; everything else is test.
pub fn build_scenario(scenario_id: u32, dataset: &FrameDataset, seed: u64, opts: &ScenarioOptions) -> Result<SplitSpec> {
    let (leads, train_classes) = scenario_definition(scenario_id, opts)?;
    if !(0.0..=1.0).contains(&opts.train_fraction) {
        return Err(Error::InvalidConfig("train fraction must lie in [0, 1]".into()));
    }
    let leads = ChannelConfig::resolve(&leads, &dataset.channel_names)?;
    let mut rng = SeededRng::new(seed);
    let mut in_train = vec![false; dataset.n];
    for class in &train_classes {
        let members: Vec<usize> = (0..dataset.n).filter(|&i| &dataset.labels[i].class_name == class).collect();
        if members.is_empty() {
            continue;
        }
        let target = (opts.train_fraction * members.len() as f64).floor() as usize;
        if opts.group_by_record {
            let mut records: Vec<usize> = members.iter().map(|&i| dataset.record_ids[i]).collect();
            records.dedup();
            records.sort_unstable();
            records.dedup();
            rng.shuffle(&mut records);
            let mut taken = 0;
            for r in records {
                let frames: Vec<usize> = members.iter().copied().filter(|&i| dataset.record_ids[i] == r).collect();
                if taken + frames.len() > target {
                    continue;
                }
                taken += frames.len();
                frames.into_iter().for_each(|i| in_train[i] = true);
            }
        } else {
            let mut order = members;
            rng.shuffle(&mut order);
            order[..target].iter().for_each(|&i| in_train[i] = true);
        }
    }
    if opts.group_by_record {
        // records with mixed labels go wholly to training
        let train_records: std::collections::HashSet<usize> = (0..dataset.n).filter(|&i| in_train[i]).map(|i| dataset.record_ids[i]).collect();
        for i in 0..dataset.n {
            in_train[i] |= train_records.contains(&dataset.record_ids[i]);
        }
    }
    let train = (0..dataset.n).filter(|&i| in_train[i]).collect();
    let test = (0..dataset.n).filter(|&i| !in_train[i]).collect();
    Ok(SplitSpec {
        scenario_id,
        leads,
        train_classes,
        train_fraction: opts.train_fraction,
        seed,
        train,
        test,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonConfig {
    pub imputer: ImputerConfig,
    pub imputer_train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub baseline: ClassifierConfig,
    pub classifier_train: TrainConfig,
    pub input_mode: ClassifierInput,
    pub fine_tune: bool,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            imputer: ImputerConfig::default(),
            imputer_train: TrainConfig::imputer_defaults(),
            classifier: ClassifierConfig::stage2(12),
            baseline: ClassifierConfig::baseline(3),
            classifier_train: TrainConfig::classifier_defaults(),
            input_mode: ClassifierInput::ImputedSignal,
            fine_tune: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub class_name: String,
    pub n: usize,
    pub baseline_f1: f64,
    pub resnetpp_f1: f64,
    pub in_training: bool,
}

impl DeltaRow {
    pub fn delta(&self) -> f64 {
        self.resnetpp_f1 - self.baseline_f1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub scenario_id: u32,
    pub seed: u64,
    pub baseline: GeneralizationReport,
    pub resnetpp: GeneralizationReport,
    pub rows: Vec<DeltaRow>,
    pub imputer_history: History,
    pub classifier_history: History,
    pub baseline_history: History,
    pub baseline_model: ClassifierModel,
    pub resnetpp_model: ResNetPlusPlus,
}

/// Abnormal when the abnormal-class probability is at least one half.
pub fn abnormal_predictions(probs: &crate::autodiff::Tensor) -> Vec<bool> {
    probs.data().chunks_exact(2).map(|p| p[1] >= p[0]).collect()
}

/// Train both models on the split's training frames with the same seeds
/// and score them on its test frames.
pub fn run_comparison(dataset: &FrameDataset, split: &SplitSpec, cfg: &ComparisonConfig, seed: u64) -> Result<ComparisonReport> {
    let train_set = dataset.subset(&split.train);
    let test_set = dataset.subset(&split.test);
    if test_set.n == 0 {
        return Err(Error::EmptyDataset);
    }
    let with_seed = |c: &TrainConfig, offset: u64| TrainConfig {
        seed: seed.wrapping_add(offset),
        ..c.clone()
    };

    let (imputer, imputer_history) = train_imputer(&train_set, &split.leads, &cfg.imputer, &with_seed(&cfg.imputer_train, 0), None)?;
    let (resnetpp, classifier_history) = train_classifier(
        &train_set,
        imputer,
        &cfg.classifier,
        cfg.input_mode,
        cfg.fine_tune,
        &with_seed(&cfg.classifier_train, 1),
        None,
    )?;
    let (baseline, baseline_history) = train_baseline(&train_set, &split.leads, &cfg.baseline, &with_seed(&cfg.classifier_train, 1), None)?;

    let x_all = test_set.batch(&(0..test_set.n).collect::<Vec<_>>());
    let x_hat = select_columns(&x_all, &split.leads.indices);
    let p_pp = predict_batched(&x_hat, 64, |b| resnetpp.predict(b))?;
    let p_base = predict_batched(&x_hat, 64, |b| baseline.classify(b))?;
    let rep_pp = generalization_report(&abnormal_predictions(&p_pp), &test_set.labels)?;
    let rep_base = generalization_report(&abnormal_predictions(&p_base), &test_set.labels)?;

    let rows = rep_base
        .rows
        .iter()
        .zip(&rep_pp.rows)
        .map(|(b, p)| DeltaRow {
            class_name: b.class_name.clone(),
            n: b.n,
            baseline_f1: b.metrics.f1,
            resnetpp_f1: p.metrics.f1,
            in_training: split.train_classes.contains(&b.class_name),
        })
        .collect();
    Ok(ComparisonReport {
        scenario_id: split.scenario_id,
        seed,
        baseline: rep_base,
        resnetpp: rep_pp,
        rows,
        imputer_history,
        classifier_history,
        baseline_history,
        baseline_model: baseline,
        resnetpp_model: resnetpp,
    })
}

impl ComparisonReport {
    pub fn row(&self, class_name: &str) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.class_name == class_name)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("class\tn\tseen\tbaseline_f1\tresnetpp_f1\tdelta\n");
        let _ = writeln!(
            out,
            "overall\t{}\t-\t{:.6}\t{:.6}\t{:.6}",
            self.baseline.overall.total(),
            self.baseline.overall.f1,
            self.resnetpp.overall.f1,
            self.resnetpp.overall.f1 - self.baseline.overall.f1
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                r.class_name,
                r.n,
                if r.in_training { "yes" } else { "no" },
                r.baseline_f1,
                r.resnetpp_f1,
                r.delta()
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.class_name.len()).max().unwrap_or(7).max(7);
        let mut out = format!("{:<width$}  {:>6}  {:>4}  {:>8}  {:>8}  {:>7}\n", "class", "n", "seen", "ResNet", "ResNet++", "delta");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>4}  {:>8.3}  {:>8.3}  {:>+7.3}",
                r.class_name,
                r.n,
                if r.in_training { "yes" } else { "no" },
                r.baseline_f1,
                r.resnetpp_f1,
                r.delta()
            );
        }
        out
    }
}

/// Disease class bumped on the second observed lead and never trained on
/// in the cross-distribution benchmark.
pub const HELD_OUT_CLASS: &str = "Myocardial Infarction: anterior";

/// A synthetic scenario 1 comparison: inferior MI (bump on lead II) is
/// trained on, a second class bumping lead III is held out. Both reach the
/// evidence lead V2 the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub data: SyntheticSpec,
    pub scenario: ScenarioOptions,
    pub comparison: ComparisonConfig,
    pub seed: u64,
}

impl Benchmark {
    /// Reduced-width settings sized for a single core.
    pub fn cross_distribution() -> Self {
        let data = SyntheticSpec {
            n_frames: 320,
            bump_amplitude: 3.0,
            bump_width: 1.0,
            tie_bumped_leads: true,
            evidence_gain: 6.0,
            classes: vec![
                SyntheticClass { name: INFERIOR_MI.into(), bump_lead: 0, fraction: 0.25 },
                SyntheticClass { name: HELD_OUT_CLASS.into(), bump_lead: 1, fraction: 0.25 },
            ],
            ..SyntheticSpec::default()
        };
        let comparison = ComparisonConfig {
            imputer: ImputerConfig { hidden: 16, init_scale: 2.0, ..ImputerConfig::default() },
            imputer_train: TrainConfig {
                batch_size: 16,
                learning_rate: 3e-3,
                epochs: 100,
                patience: None,
                ..TrainConfig::imputer_defaults()
            },
            classifier: ClassifierConfig::stage2(12).narrowed(4, 7),
            baseline: ClassifierConfig::baseline(3).narrowed(4, 7),
            classifier_train: TrainConfig {
                batch_size: 16,
                learning_rate: 3e-3,
                epochs: 60,
                patience: None,
                ..TrainConfig::classifier_defaults()
            },
            input_mode: ClassifierInput::ImputedSignal,
            fine_tune: false,
        };
        Self { data, scenario: ScenarioOptions::default(), comparison, seed: 11 }
    }

    /// Generate the data from `seed` as well, then compare.
    pub fn run(&self) -> Result<(FrameDataset, SplitSpec, ComparisonReport)> {
        let ds = make_synthetic_dataset(&SyntheticSpec { seed: self.seed, ..self.data.clone() })?;
        let split = build_scenario(1, &ds, self.seed, &self.scenario)?;
        let report = run_comparison(&ds, &split, &self.comparison, self.seed)?;
        Ok((ds, split, report))
    }
}

/// Frame counts per class in vocabulary order (classes with no frames
/// omitted).
pub fn class_counts(dataset: &FrameDataset) -> Vec<(&'static str, usize)> {
    CLASS_TABLE
        .iter()
        .map(|(name, _, _)| (*name, dataset.labels.iter().filter(|l| l.class_name == *name).count()))
        .filter(|(_, c)| *c > 0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wfdb::DiagnosisLabel;

    fn dataset() -> FrameDataset {
        let spec = SyntheticSpec {
            n_frames: 40,
            t: 8,
            classes: vec![
                SyntheticClass { name: INFERIOR_MI.into(), bump_lead: 0, fraction: 0.3 },
                SyntheticClass { name: "Bundle Branch Block".into(), bump_lead: 1, fraction: 0.2 },
            ],
            ..SyntheticSpec::default()
        };
        let mut ds = make_synthetic_dataset(&spec).unwrap();
        ds.record_ids = (0..ds.n).map(|i| i / 2).collect();
        ds.record_names = (0..20).map(|i| format!("r{i}")).collect();
        for i in 0..ds.n {
            let l = ds.labels[i - i % 2].clone();
            ds.labels[i] = l;
        }
        ds
    }

    #[test]
    fn scenario_leads() {
        let ds = dataset();
        let s1 = build_scenario(1, &ds, 0, &ScenarioOptions::default()).unwrap();
        assert_eq!(s1.leads.leads, vec!["II", "III", "aVF"]);
        assert_eq!(s1.leads.indices, vec![1, 2, 5]);
        let s2 = build_scenario(2, &ds, 0, &ScenarioOptions::default()).unwrap();
        assert_eq!(s2.leads.leads, vec!["V1", "V2", "V3"]);
        assert!(matches!(build_scenario(3, &ds, 0, &ScenarioOptions::default()), Err(Error::UnknownScenario(3))));
    }

    #[test]
    fn split_contract() {
        let ds = dataset();
        for group in [false, true] {
            let opts = ScenarioOptions { group_by_record: group, ..ScenarioOptions::default() };
            let s = build_scenario(1, &ds, 5, &opts).unwrap();
            assert!(s.train.iter().all(|i| !s.test.contains(i)));
            assert_eq!(s.train.len() + s.test.len(), ds.n);
            assert!(s.train.iter().all(|&i| s.train_classes.contains(&ds.labels[i].class_name)));
            for l in &ds.labels {
                assert!(s.test.iter().any(|&i| &ds.labels[i] == l), "{} missing from test", l.class_name);
            }
            assert_eq!(s, build_scenario(1, &ds, 5, &opts).unwrap());
            if group {
                for &i in &s.train {
                    assert!(s.test.iter().all(|&j| ds.record_ids[j] != ds.record_ids[i]));
                }
            }
        }
    }

    #[test]
    fn unseen_classes_reach_the_test_split() {
        let ds = dataset();
        let s = build_scenario(1, &ds, 1, &ScenarioOptions::default()).unwrap();
        let bbb = DiagnosisLabel::from_class_name("Bundle Branch Block");
        assert!(s.test.iter().filter(|&&i| ds.labels[i] == bbb).count() > 0);
        assert!(s.train.iter().all(|&i| ds.labels[i] != bbb));
    }
}
