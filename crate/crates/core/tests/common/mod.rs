//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use tomopick::coords::{ParticleClassSpec, Pick};

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Uniform in `[0, 1)`.
pub fn unit(rng: &mut Xoshiro256PlusPlus) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

pub fn below(rng: &mut Xoshiro256PlusPlus, n: usize) -> usize {
    (unit(rng) * n as f64) as usize
}

/// Peaks by direct neighborhood scan: no neighbor in the clipped `k³`
/// cube is larger, and no equal neighbor comes earlier in `(z, y, x)`
/// order.
pub fn brute_force_peaks(values: &[f32], dims: [usize; 3], k: usize) -> Vec<([usize; 3], f32)> {
    let r = (k / 2) as isize;
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| values[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = at(z, y, x);
                let mut peak = true;
                'scan: for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                            if nz < 0 || ny < 0 || nx < 0 {
                                continue;
                            }
                            let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
                            if nz >= d || ny >= h || nx >= w {
                                continue;
                            }
                            let u = at(nz, ny, nx);
                            if u > v || (u == v && (nz, ny, nx) < (z, y, x)) {
                                peak = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if peak {
                    out.push(([z, y, x], v));
                }
            }
        }
    }
    out
}

/// Maximum-cardinality matching of minimum total distance, by dynamic
/// programming over subsets of ground truth. Returns `(tp, total distance)`.
pub fn optimal_match(preds: &[Pick], gts: &[Pick], tau: f64) -> (usize, f64) {
    assert!(gts.len() <= 12);
    let full = 1usize << gts.len();
    // best[mask] = (matched, -distance) over preds processed so far.
    let mut best: Vec<Option<(usize, f64)>> = vec![None; full];
    best[0] = Some((0, 0.0));
    let better = |a: (usize, f64), b: Option<(usize, f64)>| match b {
        None => true,
        Some(b) => a.0 > b.0 || (a.0 == b.0 && a.1 < b.1),
    };
    for p in preds {
        let mut next = best.clone();
        for mask in 0..full {
            let Some((m, dist)) = best[mask] else {
                continue;
            };
            for (j, g) in gts.iter().enumerate() {
                if mask & (1 << j) != 0 {
                    continue;
                }
                let d = p.distance(g);
                if d <= tau {
                    let cand = (m + 1, dist + d);
                    if better(cand, next[mask | (1 << j)]) {
                        next[mask | (1 << j)] = Some(cand);
                    }
                }
            }
        }
        best = next;
    }
    best.into_iter().flatten().fold(
        (0, 0.0),
        |acc, c| if better(c, Some(acc)) { c } else { acc },
    )
}

/// A random matching instance in which every prediction has at most one
/// ground-truth point within `tau`: truths sit in separate cells of a
/// coarse grid, predictions either land near one truth or in a cell gap.
pub fn single_candidate_instance(
    rng: &mut Xoshiro256PlusPlus,
    max_len: usize,
    tau: f64,
) -> (Vec<Pick>, Vec<Pick>) {
    let cell = 10.0 * tau;
    let n_gt = below(rng, max_len + 1);
    let n_pred = below(rng, max_len + 1);
    let mut cells: Vec<usize> = (0..27).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, below(rng, i + 1));
    }
    let center =
        |c: usize| [(c % 3) as f64, ((c / 3) % 3) as f64, (c / 9) as f64].map(|v| (v + 0.5) * cell);
    let gts: Vec<Pick> = cells[..n_gt]
        .iter()
        .map(|&c| {
            let [x, y, z] = center(c);
            let j = |r: &mut Xoshiro256PlusPlus| (unit(r) - 0.5) * tau;
            Pick::new(0, x + j(rng), y + j(rng), z + j(rng))
        })
        .collect();
    let preds = (0..n_pred)
        .map(|_| {
            if !gts.is_empty() && unit(rng) < 0.7 {
                let g = &gts[below(rng, gts.len())];
                // Uniform-ish point inside the tau ball.
                loop {
                    let o = [0, 1, 2].map(|_| (2.0 * unit(rng) - 1.0) * tau);
                    let n = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
                    if n <= tau * 0.999 {
                        break Pick::new(0, g.x + o[0], g.y + o[1], g.z + o[2]);
                    }
                }
            } else {
                // Cell corners are at least ~4 tau from any truth.
                let c = cells[below(rng, 27)];
                let [x, y, z] = center(c);
                let h = cell / 2.0 - 0.1 * tau;
                Pick::new(0, x + h, y + h, z + h)
            }
        })
        .collect();
    (preds, gts)
}

/// Sorted `(class, x, y, z)` for order-free comparison.
pub fn sorted_coords(picks: &[Pick]) -> Vec<(usize, f64, f64, f64)> {
    let mut v: Vec<_> = picks.iter().map(|p| (p.class_id, p.x, p.y, p.z)).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// One class with the given physical radius, τ equal to the radius.
pub fn single_class(name: &str, radius: f64, sigma_vox: f64, threshold: f64) -> ParticleClassSpec {
    ParticleClassSpec {
        name: name.into(),
        radius,
        sigma_vox,
        detect_threshold: threshold,
        match_radius_tau: radius,
        metric_weight: 1.0,
    }
}

/// Central difference of `f` along coordinate `i`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let fp = f(&p);
    p[i] -= 2.0 * h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// Path of the built command-line binary.
pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tomopick")
}
