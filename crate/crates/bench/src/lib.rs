//! Input builders shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selgen_core::metrics::LabeledSelection;
use selgen_core::prompts::render_multichoice;
use selgen_core::{Candidate, Fixture, Method, QuestionRecord, TemplateSet};

/// `m` labeled selections with scores on a coarse grid, so ties are common.
pub fn labeled_selections(m: usize, seed: u64) -> Vec<LabeledSelection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|i| {
            let q: f64 = rng.random();
            LabeledSelection {
                question_id: format!("q{i:06}"),
                method: Method::SampleSelect,
                score: (q * 64.0).round() / 64.0,
                correct: rng.random_bool(q),
            }
        })
        .collect()
}

pub fn candidates(n: usize) -> Vec<Candidate> {
    (0..n)
        .map(|i| Candidate::new(format!("candidate answer {i}"), vec![-0.5; 3]).expect("valid logprobs"))
        .collect()
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("pivot exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Fixture with letter logprobs for every ordering of `cands`, with a
/// position prior favoring the first letter.
pub fn permutation_fixture(templates: &TemplateSet, question: &QuestionRecord, cands: &[Candidate], include_nota: bool) -> Fixture {
    let mut fixture = Fixture::new();
    let mut perm: Vec<usize> = (0..cands.len()).collect();
    loop {
        let ordered: Vec<Candidate> = perm.iter().map(|&i| cands[i].clone()).collect();
        let (prompt, labels) =
            render_multichoice(templates.multichoice(), question, &ordered, include_nota).expect("renderable");
        let logits: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(pos, _)| {
                let affinity = perm.get(pos).map_or(-1.0, |&c| c as f64 * 0.3);
                affinity + if pos == 0 { 1.0 } else { 0.0 }
            })
            .collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        let names: Vec<String> = labels.iter().map(|l| l.as_string()).collect();
        fixture.add_logprobs(prompt, names.iter().map(String::as_str).zip(logits.iter().map(|l| l - lse)));
        if !next_permutation(&mut perm) {
            break;
        }
    }
    fixture
}
