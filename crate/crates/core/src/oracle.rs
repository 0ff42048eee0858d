//! Label sources for the search loop.
//!
//! Every id may be answered at most once per run. Search strategies only ever
//! see labels through this trait.

use std::collections::{HashMap, HashSet, VecDeque};

use crate::dataset::{GroundTruth, TestSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Simulated,
    Interactive,
}

pub trait Oracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Simulated
    }

    /// Returns the true label of point `id`.
    fn label(&mut self, id: &str) -> Result<String>;
}

/// Answers from the hidden labels a test set carries.
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    truth: GroundTruth,
    index: HashMap<String, usize>,
    answered: HashSet<String>,
}

impl SimulatedOracle {
    pub fn new(ts: &TestSet) -> Result<Self> {
        let truth = ts.ground_truth();
        let missing = truth.missing();
        if !missing.is_empty() {
            let shown: Vec<&str> = missing.iter().take(10).copied().collect();
            return Err(Error::Oracle(format!(
                "{} point(s) lack a true label: {}{}",
                missing.len(),
                shown.join(", "),
                if missing.len() > shown.len() { ", ..." } else { "" }
            )));
        }
        let index = (0..truth.len()).map(|i| (truth.id(i).to_string(), i)).collect();
        Ok(Self {
            truth,
            index,
            answered: HashSet::new(),
        })
    }

    pub fn answered(&self) -> &HashSet<String> {
        &self.answered
    }
}

impl Oracle for SimulatedOracle {
    fn label(&mut self, id: &str) -> Result<String> {
        let &idx = self
            .index
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        if !self.answered.insert(id.to_string()) {
            return Err(Error::Oracle(format!("point `{id}` was already answered")));
        }
        Ok(self
            .truth
            .label(idx)
            .expect("labels checked at construction")
            .to_string())
    }
}

/// Replays a fixed sequence of answers in query order, whatever the ids.
#[derive(Debug, Clone, Default)]
pub struct ScriptedOracle {
    answers: VecDeque<String>,
    answered: HashSet<String>,
}

impl ScriptedOracle {
    pub fn new<I, S>(answers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            answers: answers.into_iter().map(Into::into).collect(),
            answered: HashSet::new(),
        }
    }
}

impl Oracle for ScriptedOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Interactive
    }

    fn label(&mut self, id: &str) -> Result<String> {
        if !self.answered.insert(id.to_string()) {
            return Err(Error::Oracle(format!("point `{id}` was already answered")));
        }
        self.answers
            .pop_front()
            .ok_or_else(|| Error::Oracle("answer script exhausted".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TestPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labelled(n: usize) -> TestSet {
        let points = (0..n)
            .map(|i| {
                TestPoint::new(format!("p{i}"), vec![i as f64], 0.8, "pos")
                    .with_true_label(if i % 3 == 0 { "neg" } else { "pos" })
            })
            .collect();
        TestSet::new(points).unwrap()
    }

    #[test]
    fn answers_each_id_once() {
        let mut oracle = SimulatedOracle::new(&labelled(4)).unwrap();
        assert_eq!(oracle.label("p0").unwrap(), "neg");
        assert!(matches!(oracle.label("p0"), Err(Error::Oracle(_))));
        assert!(matches!(oracle.label("nope"), Err(Error::UnknownId(_))));
        assert_eq!(oracle.answered().len(), 1);
    }

    #[test]
    fn answers_match_stored_labels() {
        let ts = labelled(300);
        let truth = ts.ground_truth();
        let mut oracle = SimulatedOracle::new(&ts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut order: Vec<usize> = (0..300).collect();
        for i in 0..100 {
            let j = rng.random_range(i..300);
            order.swap(i, j);
            let idx = order[i];
            assert_eq!(oracle.label(truth.id(idx)).unwrap(), truth.label(idx).unwrap());
        }
    }

    #[test]
    fn missing_label_is_named() {
        let ts = TestSet::new(vec![
            TestPoint::new("a", vec![0.0], 0.5, "x").with_true_label("x"),
            TestPoint::new("b", vec![0.0], 0.5, "x"),
        ])
        .unwrap();
        match SimulatedOracle::new(&ts) {
            Err(Error::Oracle(msg)) => assert!(msg.contains('b')),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scripted_replays_in_order() {
        let mut o = ScriptedOracle::new(["x", "y"]);
        assert_eq!(o.label("a").unwrap(), "x");
        assert!(o.label("a").is_err());
        assert_eq!(o.label("b").unwrap(), "y");
        assert!(o.label("c").is_err());
    }
}
