use crate::{stats, TimeSeriesWindow};

/// Rank channels by summed absolute covariance with every other channel (pairwise-complete
/// observations) and keep the top `min(k, D)`; ties go to the lower index.
pub fn select_channels(window: &TimeSeriesWindow, k: usize) -> Vec<usize> {
    let d = window.channels();
    if d == 1 {
        return vec![0];
    }
    let mut score = vec![0.0; d];
    for i in 0..d {
        for j in i + 1..d {
            let (a, b): (Vec<f64>, Vec<f64>) = (0..window.len())
                .filter(|&t| window.is_observed(t, i) && window.is_observed(t, j))
                .map(|t| (window.get(t, i), window.get(t, j)))
                .unzip();
            let c = stats::covariance(&a, &b).abs();
            score[i] += c;
            score[j] += c;
        }
    }
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k.clamp(1, d));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::{Rng, SeedableRng};

    #[test]
    fn duplicates_rank_first() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let l = 64;
        let mut data = Vec::new();
        for t in 0..l {
            let s = (t as f64 * 0.3).sin() * 3.0;
            data.extend([rng.random_range(-0.1..0.1), s, rng.random_range(-0.1..0.1), s]);
        }
        let w = TimeSeriesWindow::new(Tensor::new(&[l, 4], data).unwrap()).unwrap();
        let sel = select_channels(&w, 10);
        assert_eq!(sel.len(), 4);
        let mut top = sel[..2].to_vec();
        top.sort();
        assert_eq!(top, vec![1, 3]);
    }

    #[test]
    fn single_channel() {
        let w = TimeSeriesWindow::from_series(&[1.0, 2.0]).unwrap();
        assert_eq!(select_channels(&w, 10), vec![0]);
    }

    #[test]
    fn k_truncates() {
        let w = TimeSeriesWindow::new(Tensor::new(&[3, 12], (0..36).map(|i| ((i * 7) % 5) as f64).collect()).unwrap()).unwrap();
        assert_eq!(select_channels(&w, 10).len(), 10);
    }
}
