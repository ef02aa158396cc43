use crate::gcpo::GcpoError;

/// Win and loss ratios by exhaustive pairwise comparison.
pub fn brute_force_ratios(winner: &[f64], loser: &[f64]) -> Result<(Vec<f64>, Vec<f64>), GcpoError> {
    if winner.is_empty() || winner.len() != loser.len() {
        return Err(GcpoError::GroupSizeMismatch {
            winner: winner.len(),
            loser: loser.len(),
        });
    }
    if let Some((index, &value)) = winner.iter().chain(loser).enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(GcpoError::NonFiniteScore { index, value });
    }
    let n = winner.len() as f64;
    let mut r_w = Vec::with_capacity(winner.len());
    for w in winner {
        let mut wins = 0usize;
        for l in loser {
            if w > l {
                wins += 1;
            }
        }
        r_w.push(wins as f64 / n);
    }
    let mut r_l = Vec::with_capacity(loser.len());
    for l in loser {
        let mut losses = 0usize;
        for w in winner {
            if l < w {
                losses += 1;
            }
        }
        r_l.push(losses as f64 / n);
    }
    Ok((r_w, r_l))
}

/// Central-difference gradient of `f` at `theta` with step `h`.
pub fn finite_difference_grad<F: Fn(&[f64]) -> f64>(f: F, theta: &[f64], h: f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            x[i] = theta[i] + h;
            let up = f(&x);
            x[i] = theta[i] - h;
            let down = f(&x);
            x[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_quadratic() {
        let g = finite_difference_grad(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-7 && (g[1] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn brute_force_rejects_nan() {
        assert!(matches!(
            brute_force_ratios(&[1.0], &[f64::INFINITY]),
            Err(GcpoError::NonFiniteScore { index: 1, .. })
        ));
    }
}
