//! Non-dominated sorting, crowding distance and utopia-point champion
//! selection over fitness vectors (all objectives maximized).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::FitnessVector;
use crate::util::inf_f64;

#[derive(Debug, Error)]
pub enum ParetoError {
    #[error("no candidates")]
    Empty,
    #[error("duplicate spec_id '{0}'")]
    DuplicateId(String),
    #[error("candidate '{0}' has a non-finite fitness component")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub spec_id: String,
    pub fitness: FitnessVector,
}

impl Candidate {
    pub fn new(spec_id: impl Into<String>, fitness: FitnessVector) -> Self {
        Candidate {
            spec_id: spec_id.into(),
            fitness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoResult {
    pub fronts: Vec<Vec<String>>,
    #[serde(with = "inf_f64::map")]
    pub crowding: BTreeMap<String, f64>,
    pub champion: String,
    pub utopia: [f64; 3],
}

/// `a` is at least as good everywhere and strictly better somewhere.
pub fn dominates(a: &FitnessVector, b: &FitnessVector) -> bool {
    let (a, b) = (a.as_array(), b.as_array());
    a.iter().zip(&b).all(|(x, y)| x >= y) && a.iter().zip(&b).any(|(x, y)| x > y)
}

fn check(candidates: &[Candidate]) -> Result<(), ParetoError> {
    if candidates.is_empty() {
        return Err(ParetoError::Empty);
    }
    let mut seen = BTreeSet::new();
    for c in candidates {
        if !seen.insert(c.spec_id.as_str()) {
            return Err(ParetoError::DuplicateId(c.spec_id.clone()));
        }
        if c.fitness.as_array().iter().any(|v| !v.is_finite()) {
            return Err(ParetoError::NonFinite(c.spec_id.clone()));
        }
    }
    Ok(())
}

/// Fast non-dominated sort. Returns candidate indices per front; within a
/// front, indices keep input order.
pub fn non_dominated_sort_indices(candidates: &[Candidate]) -> Vec<Vec<usize>> {
    let n = candidates.len();
    let mut dominated_by_count = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (fi, fj) = (&candidates[i].fitness, &candidates[j].fitness);
            if dominates(fi, fj) {
                dominates_list[i].push(j);
                dominated_by_count[j] += 1;
            } else if dominates(fj, fi) {
                dominates_list[j].push(i);
                dominated_by_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by_count[j] -= 1;
                if dominated_by_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::take(&mut current));
        current = next;
    }
    fronts
}

pub fn non_dominated_sort(candidates: &[Candidate]) -> Result<Vec<Vec<String>>, ParetoError> {
    check(candidates)?;
    Ok(non_dominated_sort_indices(candidates)
        .into_iter()
        .map(|f| f.into_iter().map(|i| candidates[i].spec_id.clone()).collect())
        .collect())
}

/// Crowding distance within one front. Boundary members of every objective
/// with nonzero range get +∞; objectives with zero range contribute nothing.
pub fn crowding_distance(front: &[Candidate]) -> BTreeMap<String, f64> {
    let mut dist: BTreeMap<String, f64> = front.iter().map(|c| (c.spec_id.clone(), 0.0)).collect();
    if front.len() <= 2 {
        for d in dist.values_mut() {
            *d = f64::INFINITY;
        }
        return dist;
    }
    for m in 0..3 {
        let mut order: Vec<&Candidate> = front.iter().collect();
        order.sort_by(|a, b| {
            a.fitness.as_array()[m]
                .total_cmp(&b.fitness.as_array()[m])
                .then_with(|| a.spec_id.cmp(&b.spec_id))
        });
        let lo = order[0].fitness.as_array()[m];
        let hi = order[order.len() - 1].fitness.as_array()[m];
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        *dist.get_mut(&order[0].spec_id).unwrap() = f64::INFINITY;
        *dist.get_mut(&order[order.len() - 1].spec_id).unwrap() = f64::INFINITY;
        for w in order.windows(3) {
            let gap = w[2].fitness.as_array()[m] - w[0].fitness.as_array()[m];
            let d = dist.get_mut(&w[1].spec_id).unwrap();
            *d += gap / range;
        }
    }
    dist
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Sorts into fronts and picks the front-0 member closest to the utopia point
/// (componentwise maximum of front 0). Ties go to larger crowding distance,
/// then to the lexicographically smaller spec_id.
pub fn select_champion(candidates: &[Candidate]) -> Result<ParetoResult, ParetoError> {
    check(candidates)?;
    let index_fronts = non_dominated_sort_indices(candidates);
    let mut crowding = BTreeMap::new();
    for f in &index_fronts {
        let members: Vec<Candidate> = f.iter().map(|&i| candidates[i].clone()).collect();
        crowding.extend(crowding_distance(&members));
    }
    let front0 = &index_fronts[0];
    let mut utopia = [f64::NEG_INFINITY; 3];
    for &i in front0 {
        for (u, v) in utopia.iter_mut().zip(candidates[i].fitness.as_array()) {
            *u = u.max(v);
        }
    }
    let champion = front0
        .iter()
        .map(|&i| &candidates[i])
        .min_by(|a, b| {
            let da = distance(&a.fitness.as_array(), &utopia);
            let db = distance(&b.fitness.as_array(), &utopia);
            da.total_cmp(&db)
                .then_with(|| crowding[&b.spec_id].total_cmp(&crowding[&a.spec_id]))
                .then_with(|| a.spec_id.cmp(&b.spec_id))
        })
        .expect("front 0 is nonempty")
        .spec_id
        .clone();
    Ok(ParetoResult {
        fronts: index_fronts
            .into_iter()
            .map(|f| f.into_iter().map(|i| candidates[i].spec_id.clone()).collect())
            .collect(),
        crowding,
        champion,
        utopia,
    })
}
