//! Distributional checks on the synthetic generator.

mod common;

use std::collections::BTreeMap;

use greaselm::data::{gen_synthetic_mcqa_with_meta, QAExample, SynthConfig, SynthMeta};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

const ALPHA: f64 = 1e-3;

fn chi2_pvalue(stat: f64, dof: usize) -> f64 {
    1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat)
}

#[test]
fn gold_position_is_uniform() {
    let k = 5;
    let data = common::synth(11, 3000, k, 0.3);
    let mut counts = vec![0f64; k];
    for ex in &data {
        counts[ex.label] += 1.0;
    }
    let e = data.len() as f64 / k as f64;
    let stat: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    let p = chi2_pvalue(stat, k - 1);
    assert!(p > ALPHA, "counts {counts:?}, p = {p:.2e}");
}

/// Question text with the two question entities masked, i.e. the template
/// plus any hedge prefix.
fn question_template(ex: &QAExample, meta: &SynthMeta) -> String {
    let kg = ex.kg.as_ref().unwrap();
    let name = |id: u32| kg.nodes.iter().find(|n| n.0 == id).unwrap().1.clone();
    ex.question.replace(&name(meta.a), "{a}").replace(&name(meta.b), "{b}")
}

#[test]
fn gold_position_is_uniform_given_question_text() {
    let k = 5;
    let data = gen_synthetic_mcqa_with_meta(&SynthConfig {
        seed: 12,
        n_examples: 10_000,
        k_way: k,
        negation_rate: 0.5,
        hedge_rate: 0.2,
    })
    .unwrap();
    let mut by_template: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (ex, meta) in &data {
        by_template
            .entry(question_template(ex, meta))
            .or_insert_with(|| vec![0.0; k])[ex.label] += 1.0;
    }
    assert!(by_template.len() > 4);
    let (mut stat, mut dof) = (0.0, 0);
    for counts in by_template.values() {
        let n: f64 = counts.iter().sum();
        let e = n / k as f64;
        stat += counts.iter().map(|c| (c - e).powi(2) / e).sum::<f64>();
        dof += k - 1;
    }
    let p = chi2_pvalue(stat, dof);
    assert!(
        p > 0.01,
        "{} templates, chi2 {stat:.1} on {dof} dof, p = {p:.2e}",
        by_template.len()
    );
}

#[test]
fn negation_rate_matches_binomial() {
    let (n, rate) = (2000u64, 0.2);
    let data = common::synth(13, n as usize, 5, rate);
    let neg = data
        .iter()
        .filter(|ex| ex.question.split_whitespace().any(|w| w == "not"))
        .count() as u64;
    let b = Binomial::new(rate, n).unwrap();
    let lo = b.cdf(neg);
    let hi = 1.0 - if neg == 0 { 0.0 } else { b.cdf(neg - 1) };
    let p = 2.0 * lo.min(hi);
    assert!(p > ALPHA, "{neg}/{n} negated, p = {p:.2e}");
}
