//! Brute-force trajectory metrics and random walks shared by test targets.

#![allow(dead_code)]

use chebyodo::eval::Xy;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn walk(rng: &mut ChaCha8Rng, n: usize) -> Vec<Xy> {
    let mut p = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    (0..n)
        .map(|_| {
            p = [p[0] + rng.random_range(-1.0..1.0), p[1] + rng.random_range(-1.0..1.0)];
            p
        })
        .collect()
}

pub fn brute_ate(p: &[Xy], g: &[Xy]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let dx = p[i][0] - g[i][0];
        let dy = p[i][1] - g[i][1];
        s += dx * dx + dy * dy;
    }
    (s / p.len() as f64).sqrt()
}

pub fn brute_rte(p: &[Xy], g: &[Xy], n: usize) -> f64 {
    let mut s = 0.0;
    let mut count = 0;
    for i in 0..p.len() {
        if i + n >= p.len() {
            break;
        }
        let ex = (p[i + n][0] - p[i][0]) - (g[i + n][0] - g[i][0]);
        let ey = (p[i + n][1] - p[i][1]) - (g[i + n][1] - g[i][1]);
        s += ex * ex + ey * ey;
        count += 1;
    }
    (s / count as f64).sqrt()
}

pub fn brute_pde(p: &[Xy], g: &[Xy]) -> f64 {
    let mut len = 0.0;
    for i in 1..g.len() {
        len += ((g[i][0] - g[i - 1][0]).powi(2) + (g[i][1] - g[i - 1][1]).powi(2)).sqrt();
    }
    let last = p.len() - 1;
    ((p[last][0] - g[last][0]).powi(2) + (p[last][1] - g[last][1]).powi(2)).sqrt() / len
}
