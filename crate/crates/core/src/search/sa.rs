use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Visited;
use crate::error::{Error, Result};
use crate::kernel::KnobSpace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaSchedule {
    pub initial_temp: f64,
    pub cooling: f64,
    pub steps_per_round: usize,
    pub parallel_chains: usize,
}

impl Default for SaSchedule {
    fn default() -> Self {
        SaSchedule { initial_temp: 1.0, cooling: 0.95, steps_per_round: 128, parallel_chains: 16 }
    }
}

impl SaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_temp >= 0.0) || !(self.cooling > 0.0 && self.cooling < 1.0) || self.parallel_chains == 0 {
            return Err(Error::Config("annealing needs temp >= 0, cooling in (0,1) and at least one chain".into()));
        }
        Ok(())
    }
}

/// Moves one uniformly chosen knob by ±1 (staying put at the edges) or
/// resamples it, with equal probability. The proposal is symmetric.
pub fn neighbor<R: Rng + ?Sized>(space: &KnobSpace, index: u64, rng: &mut R) -> u64 {
    let mut cfg = space.index_config(index).expect("index in space");
    let k = rng.gen_range(0..cfg.choices.len());
    let card = space.knobs[k].cardinality() as i64;
    let c = cfg.choices[k] as i64;
    let next = if rng.gen_bool(0.5) {
        let step = if rng.gen_bool(0.5) { 1 } else { -1 };
        if (0..card).contains(&(c + step)) {
            c + step
        } else {
            c
        }
    } else {
        rng.gen_range(0..card)
    };
    cfg.choices[k] = next as u32;
    space.config_index(&cfg).expect("neighbor in space")
}

/// Metropolis rule for maximization with uniform draw `u`.
fn accepts(new: f64, cur: f64, temp: f64, u: f64) -> bool {
    new >= cur || u < ((new - cur) / temp).exp()
}

fn unvisited_fill<R: Rng + ?Sized>(space: &KnobSpace, visited: &Visited, out: &mut Vec<u64>, batch: usize, rng: &mut R) {
    let size = space.size();
    let remaining = size - visited.len() as u64;
    if remaining <= 4 * batch as u64 {
        for i in 0..size {
            if out.len() == batch {
                break;
            }
            if !visited.contains(&i) && !out.contains(&i) {
                out.push(i);
            }
        }
        return;
    }
    while out.len() < batch {
        let i = rng.gen_range(0..size);
        if !visited.contains(&i) && !out.contains(&i) {
            out.push(i);
        }
    }
}

/// Runs `parallel_chains` annealing chains maximizing `score` and returns the
/// best unvisited configs seen across all chain histories, ties by index.
/// Chains start from `starts` where given, otherwise uniformly at random.
/// `score` is called on batches of indices it has not been asked about yet.
pub fn sa_propose<R, F>(
    mut score: F,
    space: &KnobSpace,
    sched: &SaSchedule,
    visited: &Visited,
    batch: usize,
    starts: &[u64],
    rng: &mut R,
) -> Result<Vec<u64>>
where
    R: Rng + ?Sized,
    F: FnMut(&[u64]) -> Result<Vec<f64>>,
{
    sched.validate()?;
    let size = space.size();
    let remaining = size.saturating_sub(visited.len() as u64);
    if remaining <= batch as u64 {
        return Ok((0..size).filter(|i| !visited.contains(i)).collect());
    }
    let mut seen: HashMap<u64, f64> = HashMap::new();
    let mut lookup = |idx: &[u64], seen: &mut HashMap<u64, f64>| -> Result<Vec<f64>> {
        let mut fresh: Vec<u64> = idx.iter().copied().filter(|i| !seen.contains_key(i)).collect();
        fresh.sort_unstable();
        fresh.dedup();
        if !fresh.is_empty() {
            let s = score(&fresh)?;
            for (i, v) in fresh.into_iter().zip(s) {
                seen.insert(i, v);
            }
        }
        Ok(idx.iter().map(|i| seen[i]).collect())
    };
    let mut chains: Vec<u64> = (0..sched.parallel_chains)
        .map(|c| starts.get(c).copied().unwrap_or_else(|| rng.gen_range(0..size)))
        .collect();
    let mut energy = lookup(&chains, &mut seen)?;
    let mut temp = sched.initial_temp;
    for _ in 0..sched.steps_per_round {
        let proposals: Vec<u64> = chains.iter().map(|&c| neighbor(space, c, rng)).collect();
        let e_new = lookup(&proposals, &mut seen)?;
        for c in 0..chains.len() {
            let u: f64 = rng.gen();
            if accepts(e_new[c], energy[c], temp, u) {
                chains[c] = proposals[c];
                energy[c] = e_new[c];
            }
        }
        temp *= sched.cooling;
    }
    let mut ranked: Vec<(u64, f64)> = seen.into_iter().filter(|(i, _)| !visited.contains(i)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<u64> = ranked.into_iter().take(batch).map(|(i, _)| i).collect();
    unvisited_fill(space, visited, &mut out, batch, rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_knob_space_with_counts, KernelSpec, OpType};
    use crate::rng::seeded;

    fn toy(counts: &[(&str, usize)]) -> KnobSpace {
        let spec = KernelSpec { op_type: OpType::Conv2d, input_size: 56, in_channels: 64, out_channels: 64, kernel_size: 3, stride: 1, padding: 1 };
        build_knob_space_with_counts(&spec, counts)
    }

    #[test]
    fn indicator_target_is_found() {
        let space = toy(&[("tile_x", 16), ("tile_f", 16)]);
        let target = 137;
        let sched = SaSchedule::default();
        let score = |idx: &[u64]| Ok(idx.iter().map(|&i| if i == target { 1.0 } else { 0.0 }).collect());
        let out = sa_propose(score, &space, &sched, &Visited::new(), 8, &[], &mut seeded(1)).unwrap();
        assert_eq!(out[0], target);
    }

    #[test]
    fn constant_model_ties_break_by_index() {
        let space = toy(&[("tile_x", 16), ("tile_f", 16)]);
        let sched = SaSchedule { initial_temp: 0.0, ..SaSchedule::default() };
        let mut calls = Vec::new();
        let out = sa_propose(
            |idx: &[u64]| {
                calls.extend_from_slice(idx);
                Ok(vec![0.5; idx.len()])
            },
            &space,
            &sched,
            &Visited::new(),
            5,
            &[],
            &mut seeded(2),
        )
        .unwrap();
        calls.sort_unstable();
        assert_eq!(out, calls[..5].to_vec());
    }

    #[test]
    fn one_remaining_config() {
        let space = toy(&[("tile_x", 4), ("tile_f", 4)]);
        let visited: Visited = (0..16).filter(|&i| i != 9).collect();
        let out = sa_propose(|i: &[u64]| Ok(vec![0.0; i.len()]), &space, &SaSchedule::default(), &visited, 4, &[], &mut seeded(3)).unwrap();
        assert_eq!(out, vec![9]);
    }

    #[test]
    fn infinite_temperature_walk_is_uniform() {
        // six configs; chi-square against uniform over chain end states
        let space = toy(&[("tile_x", 3), ("tile_f", 2)]);
        assert_eq!(space.size(), 6);
        let mut rng = seeded(4);
        let mut counts = [0usize; 6];
        let draws = 6000;
        for _ in 0..draws {
            let mut s = rng.gen_range(0..6);
            for _ in 0..20 {
                s = neighbor(&space, s, &mut rng);
            }
            counts[s as usize] += 1;
        }
        assert!((0..100).all(|i| accepts(-5.0, 3.0, f64::INFINITY, i as f64 / 100.0)));
        let e = draws as f64 / 6.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 5 dof, p = 0.001
        assert!(chi2 < 20.5, "chi2 {chi2}, counts {counts:?}");
    }
}
