use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::Rng;

use super::nsga2::crowded_cmp;
use crate::model::Candidate;

/// Tournament among `size` distinct members (fewer if the population is
/// smaller); a full tie on rank and crowding is settled by `rng`.
pub fn tournament<R: Rng + ?Sized>(ranks: &[usize], crowding: &[f64], size: usize, rng: &mut R) -> usize {
    let n = ranks.len();
    let entrants = sample(rng, n, size.clamp(1, n)).into_vec();
    let mut best: Vec<usize> = Vec::new();
    for i in entrants {
        match best.first() {
            None => best.push(i),
            Some(&b) => match crowded_cmp(ranks[i], crowding[i], ranks[b], crowding[b]) {
                Ordering::Less => best = vec![i],
                Ordering::Equal => best.push(i),
                Ordering::Greater => {}
            },
        }
    }
    if best.len() == 1 {
        best[0]
    } else {
        best[rng.random_range(0..best.len())]
    }
}

/// `k / 2` parent pairs (indices into `population`) by crowded tournaments.
pub fn select_parents<R: Rng + ?Sized>(population: &[Candidate], k: usize, size: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let ranks: Vec<usize> = population.iter().map(|c| c.rank.expect("ranked population")).collect();
    let crowd: Vec<f64> = population.iter().map(|c| c.crowding.expect("crowded population")).collect();
    (0..k / 2).map(|_| (tournament(&ranks, &crowd, size, rng), tournament(&ranks, &crowd, size, rng))).collect()
}
