use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gp::{gp_predict, GpSurrogate};
use super::Visited;
use crate::error::{Error, Result};
use crate::kernel::KnobSpace;
use crate::linalg::{dot, solve_lower};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoParams {
    pub beta_ucb: f64,
    pub candidate_pool: usize,
}

impl Default for BoParams {
    fn default() -> Self {
        BoParams { beta_ucb: 2.0, candidate_pool: 512 }
    }
}

/// Picks `batch` candidates one at a time by UCB. After each pick the
/// posterior mean is treated as observed at that point: means stay put and
/// the candidate covariance gets a rank-one downdate. `offset` is added to
/// the GP mean, for a GP fitted on residuals of another model.
pub fn ucb_select(
    s: &GpSurrogate,
    cands: &[Vec<f64>],
    offset: Option<&[f64]>,
    batch: usize,
    beta_ucb: f64,
) -> Result<Vec<usize>> {
    if cands.is_empty() {
        return Err(Error::domain("empty candidate pool"));
    }
    let m = cands.len();
    let mut mean = Vec::with_capacity(m);
    let mut var = Vec::with_capacity(m);
    for x in cands {
        let (mu, v) = gp_predict(s, x)?;
        mean.push(mu);
        var.push(v);
    }
    if let Some(o) = offset {
        for (mu, o) in mean.iter_mut().zip(o) {
            *mu += o;
        }
    }
    // rows of L^-1 K(X, cands), one per candidate
    let solved: Vec<Vec<f64>> = match s.chol() {
        Some(l) => cands
            .iter()
            .map(|x| solve_lower(l, &s.observed_x.iter().map(|o| s.kernel(o, x)).collect::<Vec<_>>()))
            .collect(),
        None => vec![Vec::new(); m],
    };
    let noise = s.effective_noise();
    let root_beta = beta_ucb.max(0.0).sqrt();
    let mut taken = vec![false; m];
    let mut downdates: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::with_capacity(batch.min(m));
    for _ in 0..batch.min(m) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..m).filter(|&i| !taken[i]) {
            let score = mean[i] + root_beta * var[i].max(0.0).sqrt();
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        let (j, _) = best.expect("untaken candidate remains");
        taken[j] = true;
        out.push(j);
        let col: Vec<f64> = (0..m)
            .map(|i| {
                let mut c = s.kernel(&cands[i], &cands[j]) - dot(&solved[i], &solved[j]);
                for u in &downdates {
                    c -= u[i] * u[j];
                }
                c
            })
            .collect();
        let denom = (col[j] + noise).sqrt();
        let u: Vec<f64> = col.iter().map(|c| c / denom).collect();
        for (v, ui) in var.iter_mut().zip(&u) {
            *v -= ui * ui;
        }
        downdates.push(u);
    }
    Ok(out)
}

/// Up to `n` distinct unvisited indices drawn uniformly; every unvisited
/// index when fewer than `n` remain.
pub fn draw_unvisited<R: Rng + ?Sized>(space: &KnobSpace, visited: &Visited, n: usize, rng: &mut R) -> Vec<u64> {
    let size = space.size();
    let remaining = size.saturating_sub(visited.len() as u64);
    if remaining <= n as u64 {
        return (0..size).filter(|i| !visited.contains(i)).collect();
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let i = rng.gen_range(0..size);
        if !visited.contains(&i) && seen.insert(i) {
            out.push(i);
        }
    }
    out
}

pub fn bo_propose_batch<R: Rng + ?Sized>(
    s: &GpSurrogate,
    space: &KnobSpace,
    batch: usize,
    params: &BoParams,
    visited: &Visited,
    rng: &mut R,
) -> Result<Vec<u64>> {
    if batch == 0 {
        return Err(Error::domain("batch must be at least 1"));
    }
    let pool = draw_unvisited(space, visited, params.candidate_pool, rng);
    let coords: Vec<Vec<f64>> = pool
        .iter()
        .map(|&i| space.index_config(i).map(|c| space.coordinates(&c)))
        .collect::<Result<_>>()?;
    let picks = ucb_select(s, &coords, None, batch, params.beta_ucb)?;
    Ok(picks.into_iter().map(|p| pool[p]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::gp::{gp_fit, gp_fit_fixed};
    use crate::kernel::{build_knob_space_with_counts, KernelSpec, OpType};
    use crate::rng::seeded;

    fn fitted() -> GpSurrogate {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 6.0]).collect();
        let y = vec![0.1, 0.5, 0.9, 0.4, -0.2, -0.6];
        gp_fit(&GpSurrogate::new(1).with_observations(x, y)).unwrap()
    }

    fn grid() -> Vec<Vec<f64>> {
        (0..40).map(|i| vec![i as f64 / 40.0]).collect()
    }

    #[test]
    fn batch_of_one_is_ucb_argmax() {
        let s = fitted();
        let g = grid();
        let ucb: Vec<f64> = g.iter().map(|x| gp_predict(&s, x).map(|(m, v)| m + 2f64.sqrt() * v.sqrt()).unwrap()).collect();
        let arg = (0..g.len()).fold(0, |b, i| if ucb[i] > ucb[b] { i } else { b });
        assert_eq!(ucb_select(&s, &g, None, 1, 2.0).unwrap(), vec![arg]);
    }

    #[test]
    fn zero_beta_takes_top_means() {
        let s = fitted();
        let g = grid();
        let mut by_mean: Vec<(usize, f64)> = g.iter().enumerate().map(|(i, x)| (i, gp_predict(&s, x).unwrap().0)).collect();
        by_mean.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let top: Vec<usize> = by_mean.iter().take(5).map(|p| p.0).collect();
        assert_eq!(ucb_select(&s, &g, None, 5, 0.0).unwrap(), top);
    }

    #[test]
    fn hallucination_matches_refit_variance() {
        // the downdated variance equals a refit with the picked point observed
        let s = fitted();
        let g = grid();
        let picks = ucb_select(&s, &g, None, 2, 4.0).unwrap();
        let first = &g[picks[0]];
        let mut x = s.observed_x.clone();
        x.push(first.clone());
        let mut y = s.observed_y.clone();
        y.push(gp_predict(&s, first).unwrap().0);
        let refit = gp_fit_fixed(&s.clone().with_observations(x, y)).unwrap();
        let ucb: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(i, p)| if i == picks[0] { f64::NEG_INFINITY } else { gp_predict(&refit, p).map(|(m, v)| m + 2.0 * v.sqrt()).unwrap() })
            .collect();
        let arg = (0..g.len()).fold(0, |b, i| if ucb[i] > ucb[b] { i } else { b });
        assert_eq!(picks[1], arg);
    }

    #[test]
    fn proposals_avoid_visited_and_repeat_nothing() {
        let spec = KernelSpec { op_type: OpType::Conv2d, input_size: 56, in_channels: 64, out_channels: 64, kernel_size: 3, stride: 1, padding: 1 };
        let space = build_knob_space_with_counts(&spec, &[("tile_x", 16), ("tile_f", 16)]);
        let visited: Visited = (0..200).collect();
        let s = GpSurrogate::new(2);
        let out = bo_propose_batch(&s, &space, 16, &BoParams::default(), &visited, &mut seeded(5)).unwrap();
        let uniq: HashSet<u64> = out.iter().copied().collect();
        assert_eq!(uniq.len(), 16);
        assert!(out.iter().all(|i| !visited.contains(i) && *i < 256));
        assert!(ucb_select(&s, &[], None, 1, 1.0).is_err());
    }
}
