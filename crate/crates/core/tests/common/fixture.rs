//! Three hand-built sentences with every input the corpus metrics consume,
//! plus plain scalar re-computations of each metric.

use satlm::treebank::DependencyGraph;
use satlm::{Span, Tensor};

pub struct FixtureSentence {
    pub induced: Vec<Span>,
    pub gold: Vec<Span>,
    pub heads: Vec<usize>,
    pub attention: Vec<Vec<f64>>,
    pub distances: Vec<f64>,
}

fn spans(pairs: &[(usize, usize)]) -> Vec<Span> {
    pairs.iter().map(|&(a, b)| Span::new(a, b)).collect()
}

pub fn sentences() -> Vec<FixtureSentence> {
    let uniform5 = vec![vec![0.2; 5]; 5];
    let identity6 = (0..6)
        .map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    vec![
        FixtureSentence {
            induced: spans(&[(1, 2), (3, 5)]),
            gold: spans(&[(1, 2), (3, 3), (4, 5)]),
            heads: vec![2, 0, 2, 5, 3],
            attention: uniform5,
            distances: vec![1.0; 5],
        },
        FixtureSentence {
            induced: spans(&[(1, 2)]),
            gold: spans(&[(1, 1), (2, 2)]),
            heads: vec![2, 0],
            attention: vec![vec![0.9, 0.1], vec![0.4, 0.6]],
            distances: vec![0.5, 2.5],
        },
        FixtureSentence {
            induced: spans(&[(1, 2), (3, 6)]),
            gold: spans(&[(1, 1), (2, 2), (3, 3), (4, 4), (5, 5), (6, 6)]),
            heads: vec![2, 0, 2, 3, 4, 5],
            attention: identity6,
            distances: vec![3.0, 0.0, 1.0, 2.0, 0.0, 6.0],
        },
    ]
}

impl FixtureSentence {
    pub fn attention_tensor(&self) -> Tensor {
        let n = self.attention.len();
        Tensor::new(vec![n, n], self.attention.concat()).unwrap()
    }

    pub fn dependency(&self) -> DependencyGraph {
        DependencyGraph::new(self.heads.clone()).unwrap()
    }
}

/// Precision, recall and F1 from raw counts of multi-token spans.
pub fn oracle_span_f1(s: &[FixtureSentence]) -> (f64, f64, f64) {
    let (mut matched, mut induced, mut gold) = (0.0, 0.0, 0.0);
    for x in s {
        let ind: Vec<&Span> = x.induced.iter().filter(|p| p.end > p.start).collect();
        let gld: Vec<&Span> = x.gold.iter().filter(|p| p.end > p.start).collect();
        induced += ind.len() as f64;
        gold += gld.len() as f64;
        matched += ind.iter().filter(|p| gld.contains(p)).count() as f64;
    }
    let p = if induced > 0.0 { matched / induced } else { 0.0 };
    let r = if gold > 0.0 { matched / gold } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Attention on related pairs (either direction) over total attention.
pub fn oracle_alignment(s: &[FixtureSentence]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for x in s {
        let n = x.heads.len();
        for i in 0..n {
            for j in 0..n {
                let w = x.attention[i][j];
                den += w;
                if x.heads[j] == i + 1 || x.heads[i] == j + 1 {
                    num += w;
                }
            }
        }
    }
    num / den
}

/// Per-sentence standard deviation of length differences to the gold span of
/// largest overlap (first one on ties).
pub fn oracle_phr_dev(s: &[FixtureSentence]) -> Vec<f64> {
    s.iter()
        .map(|x| {
            let deltas: Vec<f64> = x
                .induced
                .iter()
                .map(|ind| {
                    let overlap = |g: &Span| {
                        let lo = ind.start.max(g.start);
                        let hi = ind.end.min(g.end);
                        if hi >= lo {
                            hi - lo + 1
                        } else {
                            0
                        }
                    };
                    let mut best = &x.gold[0];
                    for g in &x.gold {
                        if overlap(g) > overlap(best) {
                            best = g;
                        }
                    }
                    let li = (ind.end - ind.start + 1) as f64;
                    let lg = (best.end - best.start + 1) as f64;
                    (li - lg).abs()
                })
                .collect();
            let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
            (deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / deltas.len() as f64).sqrt()
        })
        .collect()
}

/// Mean absolute gap to the smallest distance, then min-max scaled.
pub fn oracle_diff(s: &[FixtureSentence]) -> (Vec<f64>, Vec<f64>) {
    let raw: Vec<f64> = s
        .iter()
        .map(|x| {
            let mut root = x.distances[0];
            for &d in &x.distances {
                if d < root {
                    root = d;
                }
            }
            x.distances.iter().map(|d| (d - root).abs()).sum::<f64>() / x.distances.len() as f64
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm = raw.iter().map(|r| (r - lo) / (hi - lo)).collect();
    (raw, norm)
}
