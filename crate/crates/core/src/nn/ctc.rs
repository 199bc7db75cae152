//! CTC loss: alignment-free negative log-likelihood summing over all
//! monotonic blank-augmented label paths.
//!
//! The blank symbol is the LAST logit column. The backward pass is the
//! classic posterior form: d loss / d logits = softmax(logits) - gamma,
//! where gamma marginalizes path occupancy per frame and symbol.

use crate::mat::Mat;

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Returns (loss, gradient wrt logits).
///
/// Infeasible label/frame combinations (too few frames to emit the labels)
/// give an infinite loss with a zero gradient.
pub fn ctc_forward_backward(logits: &Mat, labels: &[usize]) -> (f64, Mat) {
    let t_frames = logits.rows;
    let vocab_with_blank = logits.cols;
    let blank = vocab_with_blank - 1;
    debug_assert!(labels.iter().all(|&l| l < blank), "label out of vocabulary");

    // Log-softmax per frame.
    let mut lp = logits.clone();
    for t in 0..t_frames {
        let row = lp.row_mut(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.iter_mut().for_each(|v| *v -= logsum);
    }

    // Extended sequence: blanks interleaved around labels.
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            labels[s / 2]
        }
    };

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; t_frames * s_len];
    let mut beta = vec![neg; t_frames * s_len];
    alpha[0] = lp.at(0, blank);
    if s_len > 1 {
        alpha[1] = lp.at(0, ext(1));
    }
    for t in 1..t_frames {
        for s in 0..s_len {
            let stay = alpha[(t - 1) * s_len + s];
            let step = if s >= 1 { alpha[(t - 1) * s_len + s - 1] } else { neg };
            let skip = if s >= 2 && ext(s) != blank && ext(s) != ext(s - 2) {
                alpha[(t - 1) * s_len + s - 2]
            } else {
                neg
            };
            let merged = log_sum_exp(&[stay, step, skip]);
            alpha[t * s_len + s] = if merged == neg { neg } else { merged + lp.at(t, ext(s)) };
        }
    }
    let log_z = log_sum_exp(&[
        alpha[(t_frames - 1) * s_len + s_len - 1],
        if s_len > 1 { alpha[(t_frames - 1) * s_len + s_len - 2] } else { neg },
    ]);
    if log_z == neg {
        return (f64::INFINITY, Mat::zeros(t_frames, vocab_with_blank));
    }

    beta[(t_frames - 1) * s_len + s_len - 1] = lp.at(t_frames - 1, ext(s_len - 1));
    if s_len > 1 {
        beta[(t_frames - 1) * s_len + s_len - 2] = lp.at(t_frames - 1, ext(s_len - 2));
    }
    for t in (0..t_frames - 1).rev() {
        for s in 0..s_len {
            let stay = beta[(t + 1) * s_len + s];
            let step = if s + 1 < s_len { beta[(t + 1) * s_len + s + 1] } else { neg };
            let skip = if s + 2 < s_len && ext(s + 2) != blank && ext(s + 2) != ext(s) {
                beta[(t + 1) * s_len + s + 2]
            } else {
                neg
            };
            let merged = log_sum_exp(&[stay, step, skip]);
            beta[t * s_len + s] = if merged == neg { neg } else { merged + lp.at(t, ext(s)) };
        }
    }

    // Gradient: softmax minus per-frame symbol posterior.
    let mut grad = lp.map(f64::exp);
    for t in 0..t_frames {
        let mut q = vec![neg; vocab_with_blank];
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == neg || b == neg {
                continue;
            }
            // Emission is counted in both alpha and beta; remove one copy.
            let occupancy = a + b - lp.at(t, ext(s)) - log_z;
            let sym = ext(s);
            q[sym] = log_sum_exp(&[q[sym], occupancy]);
        }
        let row = grad.row_mut(t);
        for (k, item) in row.iter_mut().enumerate() {
            if q[k] != neg {
                *item -= q[k].exp();
            }
        }
    }
    (-log_z, grad)
}

/// Greedy CTC decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_collapse(frame_argmax: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &sym in frame_argmax {
        if sym != prev && sym != blank {
            out.push(sym);
        }
        prev = sym;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    /// Exhaustive alignment-sum oracle for tiny cases.
    pub fn ctc_brute_force(logits: &Mat, labels: &[usize]) -> f64 {
        let t = logits.rows;
        let v = logits.cols;
        let blank = v - 1;
        // Per-frame softmax.
        let mut probs = logits.clone();
        for r in 0..t {
            let row = probs.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            row.iter_mut().for_each(|x| *x = (*x - max).exp() / sum);
        }
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        loop {
            let collapsed = ctc_greedy_collapse(&path, blank);
            if collapsed == labels {
                let p: f64 = path.iter().enumerate().map(|(i, &s)| probs.at(i, s)).product();
                total += p;
            }
            // Next path in lexicographic order.
            let mut i = 0;
            loop {
                if i == t {
                    return -total.ln();
                }
                path[i] += 1;
                if path[i] < v {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn matches_brute_force_on_all_small_cases() {
        let mut rng = Prng::seed_from_u64(17);
        let vocab = 3; // plus blank -> 4 logit columns
        for t in 1..=4usize {
            for label_len in 0..=3usize {
                for _rep in 0..3 {
                    let labels: Vec<usize> = (0..label_len).map(|_| rng.below(vocab)).collect();
                    let logits = Mat::from_vec(
                        t,
                        vocab + 1,
                        (0..t * (vocab + 1)).map(|_| rng.uniform_in(-2.0, 2.0)).collect(),
                    );
                    let (loss, _) = ctc_forward_backward(&logits, &labels);
                    let brute = ctc_brute_force(&logits, &labels);
                    if brute.is_infinite() {
                        assert!(loss.is_infinite(), "t={t} labels={labels:?}");
                    } else {
                        assert!(
                            (loss - brute).abs() < 1e-6,
                            "t={t} labels={labels:?}: {loss} vs {brute}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Prng::seed_from_u64(5);
        let labels = vec![0usize, 2, 1];
        let mut logits = Mat::from_vec(6, 4, (0..24).map(|_| rng.uniform_in(-1.0, 1.0)).collect());
        let (_, grad) = ctc_forward_backward(&logits, &labels);
        let h = 1e-6;
        for i in 0..logits.data.len() {
            let orig = logits.data[i];
            logits.data[i] = orig + h;
            let (lp, _) = ctc_forward_backward(&logits, &labels);
            logits.data[i] = orig - h;
            let (lm, _) = ctc_forward_backward(&logits, &labels);
            logits.data[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad.data[i]).abs() < 1e-6,
                "element {i}: fd {fd} vs analytic {}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn infeasible_cases_are_infinite() {
        let logits = Mat::zeros(1, 4);
        let (loss, grad) = ctc_forward_backward(&logits, &[0, 1]);
        assert!(loss.is_infinite());
        assert!(grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn collapse_rule() {
        // "a a blank b b" -> "ab" with blank = 3.
        assert_eq!(ctc_greedy_collapse(&[0, 0, 3, 1, 1], 3), vec![0, 1]);
        assert_eq!(ctc_greedy_collapse(&[3, 3, 3], 3), Vec::<usize>::new());
        assert_eq!(ctc_greedy_collapse(&[0, 3, 0], 3), vec![0, 0]);
    }
}
