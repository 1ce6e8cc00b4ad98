//! Ranking metrics used to compare search output against the benchmark.

use dnas_core::error::{Error, Result};

/// Competition rank of each value under "higher is better": `1 + ` the number
/// of strictly larger values. Equal values share a rank.
pub fn competition_ranks(values: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|v| 1 + values.iter().filter(|o| **o > *v).count())
        .collect()
}

/// Ascending fractional ranks with ties assigned the average of the positions
/// they occupy (so `[10, 20, 20]` ranks as `[1, 2.5, 2.5]`).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling: Pearson
/// correlation of the two fractional rank vectors. A constant input has no
/// defined correlation and is rejected.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArg {
            ctx: "spearman",
            msg: format!("length mismatch: {} vs {}", xs.len(), ys.len()),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArg {
            ctx: "spearman",
            msg: "need at least 2 pairs".into(),
        });
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { ctx: "spearman input" });
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArg {
            ctx: "spearman",
            msg: "an input is constant; correlation is undefined".into(),
        });
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Exact median of a finite sample: middle element for odd length, average of
/// the two middle elements for even length.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyData { ctx: "median" });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn competition_ranks_share_rank_on_ties() {
        assert_eq!(competition_ranks(&[0.9, 0.5, 0.9, 0.1]), vec![1, 3, 1, 4]);
        assert_eq!(competition_ranks(&[0.3]), vec![1]);
    }

    #[test]
    fn spearman_hand_case() {
        // Hand oracle: pairs (1,2), (2,1), (3,3).
        let r = spearman(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spearman_with_ties_uses_average_ranks() {
        // y ranks become [1, 2.5, 2.5]; Pearson of those against [1,2,3]
        // is sqrt(3)/2.
        let r = spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0]).unwrap();
        assert!((r - 3f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_is_invariant_to_monotone_transforms() {
        let xs = [0.3, -1.0, 2.5, 0.7, 0.1];
        let ys = [1.0, 0.0, 9.0, 4.0, 0.5];
        let r1 = spearman(&xs, &ys).unwrap();
        let xs2: Vec<f64> = xs.iter().map(|v| v.exp()).collect();
        let r2 = spearman(&xs2, &ys).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
        assert!((r1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_rejects_degenerate_input() {
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn median_both_parities() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }
}
