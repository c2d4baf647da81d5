//! Hyperparameter sweeps: train and evaluate once per setting, emit a table.

use std::time::Instant;

use crate::config::Config;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graphs::InstanceBundle;
use crate::harness::eval::evaluate;
use crate::harness::train::{train, TrainOptions};

/// Which knob the sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Reasoning steps T over 1..=5.
    ReasoningSteps,
    /// Dense captions kept per image: 5, 10, 20.
    Captions,
}

impl SweepAxis {
    pub fn settings(self) -> Vec<usize> {
        match self {
            SweepAxis::ReasoningSteps => (1..=5).collect(),
            SweepAxis::Captions => vec![5, 10, 20],
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "steps" | "reasoning-steps" => Ok(SweepAxis::ReasoningSteps),
            "captions" => Ok(SweepAxis::Captions),
            other => Err(Error::Data(format!(
                "unknown sweep axis `{other}` (expected `steps` or `captions`)"
            ))),
        }
    }

    fn apply(self, config: &mut Config, setting: usize) {
        match self {
            SweepAxis::ReasoningSteps => config.train.reasoning_steps = setting,
            SweepAxis::Captions => config.train.captions = setting,
        }
    }
}

/// One sweep setting's result.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub setting: usize,
    pub top1: f64,
    pub top3: f64,
    /// Train plus evaluation time for this setting.
    pub wall_seconds: f64,
}

/// Trains and evaluates once per setting of `axis`, all other knobs fixed.
/// Rows come back in setting order.
pub fn sweep(
    base: &Config,
    axis: SweepAxis,
    train_set: &[InstanceBundle],
    splits: &[(String, Vec<InstanceBundle>)],
    table: &EmbeddingTable,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for setting in axis.settings() {
        let mut config = base.clone();
        axis.apply(&mut config, setting);
        config.validate()?;

        let started = Instant::now();
        let options = TrainOptions {
            jobs,
            ..TrainOptions::default()
        };
        let outcome = train(&config, train_set, table, &options)?;
        let report = evaluate(&outcome.checkpoint, splits, table, jobs)?;
        rows.push(SweepRow {
            setting,
            top1: report.top1,
            top3: report.top3,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synthetic::{build_table, generate_corpus, SyntheticSpec};

    fn setup(n_train: usize, n_test: usize) -> (Config, Vec<InstanceBundle>, Vec<(String, Vec<InstanceBundle>)>, EmbeddingTable) {
        let spec = SyntheticSpec::default();
        let mut config = spec.config();
        config.train.epochs = 1;
        config.train.batch = 8;
        let train_set: Vec<InstanceBundle> = generate_corpus(&spec, 61, n_train)
            .unwrap()
            .into_iter()
            .map(|inst| inst.bundle)
            .collect();
        let test_set: Vec<InstanceBundle> = generate_corpus(&spec, 62, n_test)
            .unwrap()
            .into_iter()
            .map(|inst| inst.bundle)
            .collect();
        let table = build_table(&spec, 61).unwrap();
        (config, train_set, vec![("test".into(), test_set)], table)
    }

    #[test]
    fn step_sweep_produces_five_rows_with_growing_runtime() {
        let (config, train_set, splits, table) = setup(24, 8);
        let rows = sweep(&config, SweepAxis::ReasoningSteps, &train_set, &splits, &table, 1)
            .unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(
            rows.iter().map(|r| r.setting).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5]
        );
        for pair in rows.windows(2) {
            assert!(
                pair[1].wall_seconds > pair[0].wall_seconds * 0.8,
                "runtime should grow with reasoning steps within 20% noise: {:?}",
                rows.iter().map(|r| r.wall_seconds).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn caption_sweep_produces_three_rows() {
        let (config, train_set, splits, table) = setup(8, 4);
        let rows = sweep(&config, SweepAxis::Captions, &train_set, &splits, &table, 1).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.setting).collect::<Vec<_>>(),
            vec![5, 10, 20]
        );
        for row in &rows {
            assert!(row.top3 >= row.top1);
            assert!(row.wall_seconds > 0.0);
        }
    }

    #[test]
    fn axis_parsing_covers_the_cli_names() {
        assert_eq!(SweepAxis::parse("steps").unwrap(), SweepAxis::ReasoningSteps);
        assert_eq!(SweepAxis::parse("captions").unwrap(), SweepAxis::Captions);
        assert!(SweepAxis::parse("width").is_err());
    }
}
