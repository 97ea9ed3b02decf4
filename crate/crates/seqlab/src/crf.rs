//! Linear-chain CRF: scoring, log-partition, Viterbi, and a graph-backed
//! negative log-likelihood for training.
//!
//! A path y over n tokens with L labels scores
//!     start[y0] + sum_i emissions[i][yi] + sum_i transitions[y_i][y_{i+1}] + end[y_{n-1}]
//! All reductions run in log space.

use crate::autodiff::{Graph, NodeId, Tensor};

fn check_dims(emissions: &Tensor, transitions: &Tensor, start: &Tensor, end: &Tensor) -> usize {
    let l = emissions.cols();
    assert!(emissions.rows() >= 1, "need at least one token");
    assert_eq!(transitions.shape(), &[l, l], "transition table must be L x L");
    assert_eq!(start.numel(), l, "start scores must have length L");
    assert_eq!(end.numel(), l, "end scores must have length L");
    l
}

fn lse(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn path_score(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
    path: &[usize],
) -> f64 {
    let l = check_dims(emissions, transitions, start, end);
    let n = emissions.rows();
    assert_eq!(path.len(), n, "path length must match token count");
    assert!(path.iter().all(|y| *y < l), "label out of range");
    let mut score = start.data()[path[0]] + end.data()[path[n - 1]];
    for (i, &y) in path.iter().enumerate() {
        score += emissions.at(i, y);
    }
    for w in path.windows(2) {
        score += transitions.at(w[0], w[1]);
    }
    score
}

/// log of the sum over all L^n paths of exp(path score), via the forward
/// recurrence.
pub fn log_partition(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
) -> f64 {
    let l = check_dims(emissions, transitions, start, end);
    let n = emissions.rows();
    let mut alpha: Vec<f64> = (0..l).map(|j| start.data()[j] + emissions.at(0, j)).collect();
    let mut scratch = vec![0.0; l];
    for t in 1..n {
        let prev = alpha.clone();
        for j in 0..l {
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = prev[i] + transitions.at(i, j);
            }
            alpha[j] = lse(&scratch) + emissions.at(t, j);
        }
    }
    for j in 0..l {
        alpha[j] += end.data()[j];
    }
    lse(&alpha)
}

pub fn nll(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
    path: &[usize],
) -> f64 {
    log_partition(emissions, transitions, start, end)
        - path_score(emissions, transitions, start, end, path)
}

/// Highest-scoring path. Ties break toward the lower label index at every
/// step, so identical scores everywhere decode to all zeros.
pub fn viterbi(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
) -> Vec<usize> {
    let l = check_dims(emissions, transitions, start, end);
    let n = emissions.rows();
    let mut delta: Vec<f64> = (0..l).map(|j| start.data()[j] + emissions.at(0, j)).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n);
    for t in 1..n {
        let prev = delta.clone();
        let mut bp = vec![0usize; l];
        for j in 0..l {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..l {
                let s = prev[i] + transitions.at(i, j);
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            delta[j] = best + emissions.at(t, j);
            bp[j] = arg;
        }
        back.push(bp);
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for j in 0..l {
        let s = delta[j] + end.data()[j];
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t - 1][path[t]];
    }
    path
}

/// Negative log-likelihood as a graph node so gradients reach the
/// emissions, the transition table, and the boundary scores.
pub fn nll_node(
    g: &mut Graph,
    emissions: NodeId,
    transitions: NodeId,
    start: NodeId,
    end: NodeId,
    path: &[usize],
) -> NodeId {
    // a poisoned graph hands out placeholder nodes whose shapes mean
    // nothing; skip straight to a placeholder and let forward_eval report
    if g.poisoned() {
        return g.input(Tensor::scalar(0.0));
    }
    let n = g.value(emissions).rows();
    let l = g.value(emissions).cols();
    assert_eq!(path.len(), n, "path length must match token count");

    // score of the reference path
    let em_idx: Vec<usize> = path.iter().enumerate().map(|(i, &y)| i * l + y).collect();
    let tr_idx: Vec<usize> = path.windows(2).map(|w| w[0] * l + w[1]).collect();
    let gold_em = g.gather_sum(emissions, &em_idx);
    let gold_start = g.gather_sum(start, &[path[0]]);
    let gold_end = g.gather_sum(end, &[path[n - 1]]);
    let mut gold = g.add(gold_em, gold_start);
    gold = g.add(gold, gold_end);
    if !tr_idx.is_empty() {
        let gold_tr = g.gather_sum(transitions, &tr_idx);
        gold = g.add(gold, gold_tr);
    }

    // forward recurrence: alpha is a length-L vector in log space
    let e0 = g.slice_rows(emissions, 0, 1);
    let e0 = g.reshape(e0, vec![l]);
    let mut alpha = g.add(e0, start);
    for t in 1..n {
        let bcast = g.add_col(transitions, alpha); // [i][j] = alpha[i] + T[i][j]
        let cols = g.transpose(bcast);
        let reduced = g.row_logsumexp(cols); // over incoming label i
        let et = g.slice_rows(emissions, t, 1);
        let et = g.reshape(et, vec![l]);
        alpha = g.add(reduced, et);
    }
    let terminal = g.add(alpha, end);
    let row = g.reshape(terminal, vec![1, l]);
    let log_z = g.row_logsumexp(row);
    let log_z = g.sum(log_z);
    g.sub(log_z, gold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn all_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
        let mut paths = vec![vec![]];
        for _ in 0..n {
            let mut next = Vec::with_capacity(paths.len() * l);
            for p in &paths {
                for y in 0..l {
                    let mut q = p.clone();
                    q.push(y);
                    next.push(q);
                }
            }
            paths = next;
        }
        paths
    }

    fn random_scores(n: usize, l: usize, seed: u64) -> (Tensor, Tensor, Tensor, Tensor) {
        let mut r = rng(seed);
        (
            Tensor::uniform(&[n, l], 2.0, &mut r),
            Tensor::uniform(&[l, l], 2.0, &mut r),
            Tensor::uniform(&[l], 2.0, &mut r),
            Tensor::uniform(&[l], 2.0, &mut r),
        )
    }

    #[test]
    fn log_partition_matches_enumeration() {
        for (n, l, seed) in [(1, 2, 1), (2, 3, 2), (3, 2, 3), (4, 4, 4), (6, 3, 5)] {
            let (em, tr, st, en) = random_scores(n, l, seed);
            let brute = lse(&all_paths(n, l)
                .iter()
                .map(|p| path_score(&em, &tr, &st, &en, p))
                .collect::<Vec<_>>());
            let fast = log_partition(&em, &tr, &st, &en);
            assert!(
                (brute - fast).abs() < 1e-10,
                "n={n} l={l}: {brute} vs {fast}"
            );
        }
    }

    #[test]
    fn viterbi_matches_enumeration_score() {
        for (n, l, seed) in [(1, 3, 11), (3, 3, 12), (5, 4, 13), (6, 2, 14)] {
            let (em, tr, st, en) = random_scores(n, l, seed);
            let best_brute = all_paths(n, l)
                .iter()
                .map(|p| path_score(&em, &tr, &st, &en, p))
                .fold(f64::NEG_INFINITY, f64::max);
            let decoded = viterbi(&em, &tr, &st, &en);
            let got = path_score(&em, &tr, &st, &en, &decoded);
            assert!(
                (best_brute - got).abs() < 1e-10,
                "n={n} l={l}: best {best_brute}, viterbi path scores {got}"
            );
        }
    }

    #[test]
    fn viterbi_ties_break_to_lowest_label() {
        let em = Tensor::zeros(&[4, 3]);
        let tr = Tensor::zeros(&[3, 3]);
        let st = Tensor::zeros(&[3]);
        let en = Tensor::zeros(&[3]);
        assert_eq!(viterbi(&em, &tr, &st, &en), vec![0, 0, 0, 0]);
    }

    #[test]
    fn nll_is_positive_and_zero_path_scores_zero() {
        let em = Tensor::zeros(&[3, 2]);
        let tr = Tensor::zeros(&[2, 2]);
        let st = Tensor::zeros(&[2]);
        let en = Tensor::zeros(&[2]);
        assert_eq!(path_score(&em, &tr, &st, &en, &[0, 1, 0]), 0.0);
        // logZ of all-zero scores over 2^3 paths is 3 ln 2
        let expect = (2.0_f64).ln() * 3.0;
        assert!((log_partition(&em, &tr, &st, &en) - expect).abs() < 1e-12);
        assert!((nll(&em, &tr, &st, &en, &[0, 1, 0]) - expect).abs() < 1e-12);
    }

    #[test]
    fn graph_nll_matches_pure_route() {
        for (n, l, seed) in [(1, 2, 21), (3, 3, 22), (5, 4, 23)] {
            let (em, tr, st, en) = random_scores(n, l, seed);
            let path: Vec<usize> = (0..n).map(|i| (i * 2 + seed as usize) % l).collect();
            let pure = nll(&em, &tr, &st, &en, &path);
            let mut g = Graph::new();
            let em_n = g.input(em.clone());
            let tr_n = g.input(tr.clone());
            let st_n = g.input(st.clone());
            let en_n = g.input(en.clone());
            let loss = nll_node(&mut g, em_n, tr_n, st_n, en_n, &path);
            let graph = g.forward_eval(loss).unwrap().item();
            assert!((pure - graph).abs() < 1e-10, "n={n}: {pure} vs {graph}");
        }
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let n = 4;
        let l = 3;
        let mut store = ParamStore::new();
        let mut r = rng(33);
        let em = store.register("em", Tensor::uniform(&[n, l], 1.5, &mut r));
        let tr = store.register("tr", Tensor::uniform(&[l, l], 1.5, &mut r));
        let st = store.register("st", Tensor::uniform(&[l], 1.5, &mut r));
        let en = store.register("en", Tensor::uniform(&[l], 1.5, &mut r));
        let path = vec![0, 2, 2, 1];
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let em = g.param(store, em);
            let tr = g.param(store, tr);
            let st = g.param(store, st);
            let en = g.param(store, en);
            let loss = nll_node(&mut g, em, tr, st, en, &path);
            let v = g.forward_eval(loss)?.item();
            g.backward(loss)?;
            let grads = g.param_grads().into_iter().map(|(p, t)| (p, t.clone())).collect();
            Ok((v, grads))
        };
        let reports = grad_check(&mut store, &[em, tr, st, en], run, 1e-5).unwrap();
        for rep in &reports {
            assert!(rep.max_rel_err < 1e-6, "{}: {}", rep.name, rep.max_rel_err);
        }
    }

    #[test]
    fn single_token_sequence_works() {
        let (em, tr, st, en) = random_scores(1, 3, 41);
        let decoded = viterbi(&em, &tr, &st, &en);
        assert_eq!(decoded.len(), 1);
        let expect_best = (0..3)
            .map(|j| st.data()[j] + em.at(0, j) + en.data()[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let got = path_score(&em, &tr, &st, &en, &decoded);
        assert!((expect_best - got).abs() < 1e-12);
    }
}
