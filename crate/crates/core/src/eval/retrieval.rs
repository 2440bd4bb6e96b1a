use super::probe::Features;
use crate::error::{Error, Result};

/// Leave-one-out k-nearest-neighbor accuracy under cosine similarity.
/// Votes are majority among the `k` most similar points, ties going to the
/// label of the most similar voter.
pub fn nn_retrieval(features: &Features, labels: &[usize], k: usize) -> Result<f64> {
    if features.n == 0 {
        return Err(Error::config("retrieval", "no samples"));
    }
    if labels.len() != features.n {
        return Err(Error::dim("nn_retrieval", &[features.n], &[labels.len()]));
    }
    if k == 0 || k >= features.n {
        return Err(Error::config("retrieval.k", format!("must lie in 1..{}", features.n)));
    }
    let unit: Vec<Vec<f64>> = (0..features.n)
        .map(|i| {
            let r = features.row(i);
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| if norm > 0.0 { x / norm } else { 0.0 }).collect()
        })
        .collect();
    let classes = labels.iter().max().unwrap() + 1;
    let mut correct = 0;
    for i in 0..features.n {
        let mut sims: Vec<(f64, usize)> = (0..features.n)
            .filter(|&j| j != i)
            .map(|j| (unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum(), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        for &(_, j) in &sims[..k] {
            votes[labels[j]] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let pred = sims[..k].iter().map(|&(_, j)| labels[j]).find(|&l| votes[l] == top).unwrap();
        correct += usize::from(pred == labels[i]);
    }
    Ok(correct as f64 / features.n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn duplicated_points_are_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let base: Vec<f64> = (0..40 * 6).map(|_| normal.sample(&mut rng)).collect();
        let mut data = base.clone();
        data.extend_from_slice(&base);
        let labels: Vec<usize> = (0..80).map(|i| (i % 40) % 4).collect();
        let acc = nn_retrieval(&Features::new(80, 6, data).unwrap(), &labels, 1).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn one_hot_features() {
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let data: Vec<f64> = labels.iter().flat_map(|&l| (0..3).map(move |c| f64::from(u8::from(c == l)))).collect();
        assert_eq!(nn_retrieval(&Features::new(12, 3, data).unwrap(), &labels, 1).unwrap(), 1.0);
    }

    #[test]
    fn random_features_are_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 2000;
        let data: Vec<f64> = (0..n * 16).map(|_| normal.sample(&mut rng)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let acc = nn_retrieval(&Features::new(n, 16, data).unwrap(), &labels, 1).unwrap();
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn empty_input_is_rejected() {
        let r = nn_retrieval(&Features::new(0, 3, vec![]).unwrap(), &[], 1);
        assert!(matches!(r, Err(Error::Config { .. })));
    }
}
