//! Prediction, accuracy and the stratified report.

use rayon::prelude::*;
use serde::Serialize;

use super::{GreaseLm, PreparedExample};
use crate::error::Result;
use crate::numerics::{Graph, ParamStore};
use crate::text::tokenize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnswerScore {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

impl AnswerScore {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = exp.iter().sum();
        let probs = exp.iter().map(|e| e / z).collect();
        Self {
            predicted: argmax(&logits),
            logits,
            probs,
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &GreaseLm, params: &ParamStore<f32>, ex: &PreparedExample) -> Result<AnswerScore> {
    let mut g = Graph::new(params);
    let logits = model.logits(&mut g, ex, 0, false)?;
    Ok(AnswerScore::from_logits(g.value(logits).to_f64_vec()))
}

pub fn predict_all(model: &GreaseLm, params: &ParamStore<f32>, data: &[PreparedExample]) -> Result<Vec<AnswerScore>> {
    data.par_iter().map(|ex| predict(model, params, ex)).collect()
}

pub fn accuracy(model: &GreaseLm, params: &ParamStore<f32>, data: &[PreparedExample]) -> Result<f64> {
    let preds = predict_all(model, params, data)?;
    let correct = preds.iter().zip(data).filter(|(p, ex)| p.predicted == ex.label).count();
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct TermLists {
    pub negation: Vec<String>,
    pub hedge: Vec<String>,
    pub prepositions: Vec<String>,
}

impl Default for TermLists {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            negation: v(&[
                "no", "not", "never", "none", "nobody", "nothing", "neither", "nor", "without",
            ]),
            hedge: v(&[
                "sometimes",
                "maybe",
                "perhaps",
                "possibly",
                "probably",
                "might",
                "often",
                "usually",
                "likely",
            ]),
            prepositions: v(&[
                "about", "above", "across", "after", "against", "along", "among", "around", "at", "before", "behind",
                "below", "beneath", "beside", "between", "beyond", "by", "during", "for", "from", "in", "inside",
                "into", "near", "next", "of", "off", "on", "onto", "out", "outside", "over", "past", "through", "to",
                "toward", "towards", "under", "until", "up", "upon", "with", "within",
            ]),
        }
    }
}

impl TermLists {
    fn count(list: &[String], tokens: &[String]) -> usize {
        tokens
            .iter()
            .filter(|t| list.iter().any(|w| w.eq_ignore_ascii_case(t)))
            .count()
    }

    pub fn has_negation(&self, text: &str) -> bool {
        Self::count(&self.negation, &tokenize(text)) > 0
    }

    pub fn has_hedge(&self, text: &str) -> bool {
        Self::count(&self.hedge, &tokenize(text)) > 0
    }

    /// Preposition count capped at 4.
    pub fn preposition_bucket(&self, text: &str) -> usize {
        Self::count(&self.prepositions, &tokenize(text)).min(4)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Bucket {
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

impl Bucket {
    fn add(&mut self, ok: bool) {
        self.n += 1;
        self.correct += usize::from(ok);
        self.accuracy = Some(self.correct as f64 / self.n as f64);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub negation: Bucket,
    pub no_negation: Bucket,
    pub hedge: Bucket,
    pub no_hedge: Bucket,
    /// Questions with 0, 1, 2, 3 and 4+ prepositions.
    pub prepositions: [Bucket; 5],
}

/// Buckets by the question text of each example.
pub fn stratify(data: &[PreparedExample], correct: &[bool], terms: &TermLists) -> EvalReport {
    let mut r = EvalReport {
        n: data.len(),
        ..Default::default()
    };
    for (ex, &ok) in data.iter().zip(correct) {
        if terms.has_negation(&ex.question) {
            r.negation.add(ok);
        } else {
            r.no_negation.add(ok);
        }
        if terms.has_hedge(&ex.question) {
            r.hedge.add(ok);
        } else {
            r.no_hedge.add(ok);
        }
        r.prepositions[terms.preposition_bucket(&ex.question)].add(ok);
    }
    r.accuracy = correct.iter().filter(|&&c| c).count() as f64 / data.len().max(1) as f64;
    r
}

pub fn evaluate(
    model: &GreaseLm,
    params: &ParamStore<f32>,
    data: &[PreparedExample],
    terms: &TermLists,
) -> Result<EvalReport> {
    let preds = predict_all(model, params, data)?;
    let correct: Vec<bool> = preds.iter().zip(data).map(|(p, ex)| p.predicted == ex.label).collect();
    Ok(stratify(data, &correct, terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(q: &str) -> PreparedExample {
        PreparedExample {
            id: q.into(),
            question: q.into(),
            candidates: vec![],
            label: 0,
        }
    }

    #[test]
    fn argmax_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn shift_invariance_and_uniform_ties() {
        let a = AnswerScore::from_logits(vec![0.5, -1.0, 2.0]);
        let b = AnswerScore::from_logits(vec![100.5, 99.0, 102.0]);
        assert_eq!(a.predicted, b.predicted);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-12);
        }
        let u = AnswerScore::from_logits(vec![0.3; 4]);
        assert!(u.probs.iter().all(|p| (p - 0.25).abs() < 1e-12));
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn never_is_negation() {
        let t = TermLists::default();
        assert!(t.has_negation("Never go outside"));
        assert!(t.has_hedge("it MAYBE rains"));
        assert!(!t.has_negation("go outside"));
    }

    #[test]
    fn all_correct_buckets_are_one_and_partition() {
        let data: Vec<PreparedExample> = [
            "a",
            "in the box",
            "not on top of it",
            "maybe by the side of the road to town in spring",
            "no",
        ]
        .iter()
        .map(|q| ex(q))
        .collect();
        let r = stratify(&data, &[true; 5], &TermLists::default());
        assert_eq!(r.accuracy, 1.0);
        let total: usize = r.prepositions.iter().map(|b| b.n).sum();
        assert_eq!(total, 5);
        assert_eq!(r.negation.n + r.no_negation.n, 5);
        for b in r.prepositions.iter().chain([&r.negation, &r.hedge]) {
            if b.n > 0 {
                assert_eq!(b.accuracy, Some(1.0));
            }
        }
        assert_eq!(r.prepositions[4].n, 1);
    }
}
