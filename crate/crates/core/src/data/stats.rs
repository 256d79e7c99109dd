use std::fmt;

use super::Bag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub count: usize,
    pub mean_len: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} bags, mean length {:.2} (range {}..={})",
            self.count, self.mean_len, self.min_len, self.max_len
        )
    }
}

pub fn corpus_stats(bags: &[Bag]) -> Result<CorpusStats> {
    let lens: Vec<usize> = bags.iter().map(Bag::len).collect();
    let min_len = *lens.iter().min().ok_or(Error::EmptyInput("corpus has no bags"))?;
    let max_len = *lens.iter().max().expect("non-empty");
    let total: u128 = lens.iter().map(|&l| l as u128).sum();
    Ok(CorpusStats {
        count: lens.len(),
        mean_len: total as f64 / lens.len() as f64,
        min_len,
        max_len,
    })
}

/// Nearest-rank percentile of `lengths`: the smallest value with at least
/// `p` percent of the data at or below it. `p = 0` gives the minimum.
pub fn percentile_threshold(lengths: &[usize], percentile: f64) -> Result<usize> {
    if lengths.is_empty() {
        return Err(Error::EmptyInput("percentile of an empty corpus"));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::ContractViolation(format!("percentile {percentile} outside [0, 100]")));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let rank = (percentile / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Bags whose length reaches the nearest-rank `percentile` threshold.
pub fn long_sequence_split(bags: &[Bag], percentile: f64) -> Result<Vec<&Bag>> {
    let lens: Vec<usize> = bags.iter().map(Bag::len).collect();
    let threshold = percentile_threshold(&lens, percentile)?;
    Ok(bags.iter().filter(|b| b.len() >= threshold).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn bags(lens: &[usize]) -> Vec<Bag> {
        lens.iter()
            .enumerate()
            .map(|(i, &l)| Bag::new(format!("b{i}"), Array2::zeros((l, 1)), 0).unwrap())
            .collect()
    }

    #[test]
    fn eighty_fifth_percentile_of_one_to_hundred() {
        let corpus = bags(&(1..=100).collect::<Vec<_>>());
        let long = long_sequence_split(&corpus, 85.0).unwrap();
        assert_eq!(long.len(), 16);
        assert!(long.iter().all(|b| b.len() >= 85));
    }

    #[test]
    fn zero_percentile_keeps_everything() {
        let corpus = bags(&[5, 3, 9]);
        assert_eq!(long_sequence_split(&corpus, 0.0).unwrap().len(), 3);
    }

    #[test]
    fn equal_lengths_all_returned() {
        let corpus = bags(&[7; 10]);
        assert_eq!(long_sequence_split(&corpus, 85.0).unwrap().len(), 10);
    }

    #[test]
    fn split_is_monotone_in_percentile() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let lens: Vec<usize> = (0..57).map(|_| rng.gen_range(1..300)).collect();
        let corpus = bags(&lens);
        let mut prev = usize::MAX;
        for p in 0..=100 {
            let n = long_sequence_split(&corpus, p as f64).unwrap().len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn stats_small_cases() {
        let s = corpus_stats(&bags(&[2, 4])).unwrap();
        assert_eq!((s.count, s.mean_len, s.min_len, s.max_len), (2, 3.0, 2, 4));
        let s = corpus_stats(&bags(&[11])).unwrap();
        assert_eq!((s.mean_len, s.min_len, s.max_len), (11.0, 11, 11));
        assert!(corpus_stats(&[]).is_err());
    }

    #[test]
    fn stats_match_recount() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let lens: Vec<usize> = (0..10).map(|_| rng.gen_range(1..1000)).collect();
        let s = corpus_stats(&bags(&lens)).unwrap();
        let mut total = 0usize;
        let (mut lo, mut hi) = (usize::MAX, 0usize);
        for &l in &lens {
            total += l;
            lo = lo.min(l);
            hi = hi.max(l);
        }
        assert_eq!(s.min_len, lo);
        assert_eq!(s.max_len, hi);
        assert_eq!(format!("{:.2}", s.mean_len), format!("{:.2}", total as f64 / 10.0));
    }
}
