//! Beam search with top-k and nucleus sampling inside each beam.
//!
//! At every step each live beam's next-token distribution is cut to the
//! intersection of its top-k set and its nucleus (smallest set of most likely
//! tokens holding `top_p` of the mass). With sampling enabled, up to
//! `beam_size` distinct tokens are drawn from that set per beam; otherwise
//! the `beam_size` most likely are taken. Expansions are then ranked by
//! cumulative log-probability and the best `beam_size` survive.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DecodeConfig;

pub trait StepScorer {
    /// Normalized log-probabilities of the next token after `prefix`.
    fn next_log_probs(&self, prefix: &[u32]) -> Vec<(u32, f64)>;

    fn eos(&self) -> u32;
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    score: f64,
}

/// Sort by descending log-prob, ties by ascending token id.
fn sorted(mut dist: Vec<(u32, f64)>) -> Vec<(u32, f64)> {
    dist.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    dist
}

/// Number of leading entries of a sorted distribution that survive top-k and
/// nucleus filtering. Always at least one when `dist` is nonempty.
pub fn allowed_prefix(dist: &[(u32, f64)], top_k: usize, top_p: f64) -> usize {
    if dist.is_empty() {
        return 0;
    }
    let k_cut = if top_k > 0 { top_k.min(dist.len()) } else { dist.len() };
    let p_cut = if top_p >= 1.0 {
        dist.len()
    } else {
        let mut cum = 0.0;
        let mut n = dist.len();
        for (i, (_, lp)) in dist.iter().enumerate() {
            cum += lp.exp();
            if cum >= top_p - 1e-12 {
                n = i + 1;
                break;
            }
        }
        n
    };
    k_cut.min(p_cut).max(1)
}

fn sample_distinct(allowed: &[(u32, f64)], n: usize, rng: &mut ChaCha8Rng) -> Vec<(u32, f64)> {
    let mut pool: Vec<(u32, f64, f64)> = allowed.iter().map(|&(t, lp)| (t, lp, lp.exp())).collect();
    let mut out = Vec::with_capacity(n.min(pool.len()));
    while out.len() < n && !pool.is_empty() {
        let total: f64 = pool.iter().map(|p| p.2).sum();
        let mut pick = pool.len() - 1;
        if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            for (i, p) in pool.iter().enumerate() {
                if u < p.2 {
                    pick = i;
                    break;
                }
                u -= p.2;
            }
        }
        let (t, lp, _) = pool.remove(pick);
        out.push((t, lp));
    }
    out
}

/// Decode a token sequence (without the end-of-sequence token).
pub fn beam_decode(scorer: &dyn StepScorer, config: &DecodeConfig) -> Vec<u32> {
    let beam_size = config.beam_size.max(1);
    let eos = scorer.eos();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let normalized = |h: &Hypothesis| h.score / h.tokens.len().max(1) as f64;

    for _ in 0..config.max_new_tokens {
        let mut candidates: Vec<(f64, usize, u32, f64)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let dist = sorted(scorer.next_log_probs(&beam.tokens));
            let cut = allowed_prefix(&dist, config.top_k, config.top_p);
            let picks = if config.samples() {
                sample_distinct(&dist[..cut], beam_size, &mut rng)
            } else {
                dist[..cut.min(beam_size)].to_vec()
            };
            for (tok, lp) in picks {
                candidates.push((beam.score + lp, b, tok, lp));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut next = Vec::with_capacity(beam_size);
        for (rank, (score, b, tok, _)) in candidates.into_iter().enumerate() {
            if tok == eos {
                if rank < beam_size {
                    let mut tokens = beams[b].tokens.clone();
                    tokens.push(eos);
                    finished.push(Hypothesis { tokens, score });
                }
            } else {
                let mut tokens = beams[b].tokens.clone();
                tokens.push(tok);
                next.push(Hypothesis { tokens, score });
            }
            if next.len() == beam_size {
                break;
            }
        }
        beams = next;
        if beams.is_empty() {
            break;
        }
        if finished.len() >= beam_size {
            // Stop once no live beam can beat the kept finished ones.
            finished.sort_by(|a, b| normalized(b).total_cmp(&normalized(a)));
            finished.truncate(beam_size);
            let worst_done = normalized(&finished[beam_size - 1]);
            let best_live = beams.iter().map(normalized).fold(f64::NEG_INFINITY, f64::max);
            if worst_done >= best_live {
                break;
            }
        }
    }
    finished.extend(beams);

    let best = finished
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| normalized(a).total_cmp(&normalized(b)).then(ib.cmp(ia)));
    let mut tokens = best.map(|(_, h)| h.tokens.clone()).unwrap_or_default();
    if tokens.last() == Some(&eos) {
        tokens.pop();
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed per-position distributions over tokens 0..n; token 0 is eos.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        fn next_log_probs(&self, prefix: &[u32]) -> Vec<(u32, f64)> {
            let row = self.0.get(prefix.len()).unwrap_or_else(|| self.0.last().unwrap());
            let z: f64 = row.iter().map(|p| p.exp()).sum();
            row.iter()
                .enumerate()
                .map(|(i, l)| (i as u32, l - z.ln()))
                .collect()
        }

        fn eos(&self) -> u32 {
            0
        }
    }

    fn peaked(best: usize, n: usize) -> Vec<f64> {
        (0..n).map(|i| if i == best { 5.0 } else { 0.0 }).collect()
    }

    #[test]
    fn greedy_path_without_sampling() {
        let t = Table(vec![peaked(3, 6), peaked(2, 6), peaked(0, 6)]);
        assert_eq!(beam_decode(&t, &DecodeConfig::beam_only(1, 10)), vec![3, 2]);
        assert_eq!(beam_decode(&t, &DecodeConfig::beam_only(5, 10)), vec![3, 2]);
    }

    #[test]
    fn max_new_tokens_truncates() {
        let t = Table(vec![peaked(4, 6)]);
        assert_eq!(beam_decode(&t, &DecodeConfig::beam_only(2, 3)), vec![4, 4, 4]);
    }

    #[test]
    fn allowed_prefix_intersects_k_and_p() {
        let dist = vec![(1, 0.5f64.ln()), (2, 0.3f64.ln()), (3, 0.15f64.ln()), (4, 0.05f64.ln())];
        assert_eq!(allowed_prefix(&dist, 0, 1.0), 4);
        assert_eq!(allowed_prefix(&dist, 2, 1.0), 2);
        assert_eq!(allowed_prefix(&dist, 0, 0.8), 2);
        assert_eq!(allowed_prefix(&dist, 0, 0.95), 3);
        assert_eq!(allowed_prefix(&dist, 1, 0.95), 1);
        assert_eq!(allowed_prefix(&dist, 0, 0.1), 1);
    }

    #[test]
    fn sampling_is_seeded() {
        let flat: Vec<f64> = vec![0.0; 8];
        let t = Table(vec![flat.clone(), flat.clone(), flat]);
        let cfg = DecodeConfig {
            beam_size: 2,
            top_k: 5,
            top_p: 0.95,
            max_new_tokens: 6,
            seed: 11,
        };
        let a = beam_decode(&t, &cfg);
        assert_eq!(a, beam_decode(&t, &cfg));
        let outputs: std::collections::HashSet<_> =
            (0..20).map(|s| beam_decode(&t, &cfg.with_seed(s))).collect();
        assert!(outputs.len() > 1);
    }

    #[test]
    fn sampled_tokens_stay_in_top_k() {
        let row: Vec<f64> = (0..10)
            .map(|i| if i == 0 { -100.0 } else { -(i as f64) })
            .collect();
        let t = Table(vec![row]);
        for seed in 0..30 {
            let cfg = DecodeConfig {
                beam_size: 3,
                top_k: 3,
                top_p: 1.0,
                max_new_tokens: 4,
                seed,
            };
            for tok in beam_decode(&t, &cfg) {
                assert!((1..=3).contains(&tok), "token {tok} outside top-3");
            }
        }
    }
}
