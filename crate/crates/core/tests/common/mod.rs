#![allow(dead_code)]

use lacnet_core::model::{loss, Batch, LacNet, ModelConfig};
use lacnet_core::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCheck {
    /// Coordinates compared (kink-free).
    pub checked: usize,
    pub passed: usize,
    /// Draws whose +/- step changed the ReLU pattern.
    pub kinks: usize,
    pub worst: f64,
}

/// Random inputs with a rectangular visible prior and random binary targets.
pub fn random_batch(size: usize, n: usize, seed: u64) -> (Batch<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |c: usize| Tensor::from_vec(c, n, size, size, (0..c * n * size * size).map(|_| rng.random_range(0.0..1.0)).collect());
    let rgb = t(3);
    let depth = t(1);
    let mut mask = Tensor::zeros(1, n, size, size);
    let mut visible = Tensor::zeros(1, n, size, size);
    let mut amodal = Tensor::zeros(1, n, size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for b in 0..n {
        let x0 = rng.random_range(0..size / 2);
        let y0 = rng.random_range(0..size / 2);
        let x1 = x0 + rng.random_range(size / 8..size / 2);
        let y1 = y0 + rng.random_range(size / 8..size / 2);
        for y in 0..size {
            for x in 0..size {
                let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                let i = y * size + x;
                mask.plane_mut(0, b)[i] = if inside { 1.0 } else { 0.0 };
                visible.plane_mut(0, b)[i] = if inside && x < (x0 + x1) / 2 + 2 { 1.0 } else { 0.0 };
                amodal.plane_mut(0, b)[i] = if inside || rng.random_bool(0.05) { 1.0 } else { 0.0 };
            }
        }
    }
    (Batch { rgb, depth, mask }, visible, amodal)
}

/// Central differences at `samples` parameter coordinates, spread evenly
/// over the parameter tensors, compared with the analytic gradient. A draw
/// whose +/- step changes any ReLU activation is not differentiable at that
/// scale; it is counted in `kinks` and the next tensor is drawn instead.
pub fn gradient_check(config: ModelConfig, batch_size: usize, samples: usize, step: f64, tolerance: f64, seed: u64) -> GradCheck {
    let net = LacNet::new(config).expect("valid config");
    let mut params: Vec<f64> = net.init_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // perturb away from the initial values
    for v in params.iter_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    let (batch, visible, amodal) = random_batch(net.config().input_size, batch_size, seed);
    let eval = |p: &[f64]| {
        let (logits, cache) = net.forward(p, &batch).expect("forward");
        (loss(&logits, &visible, &amodal).expect("loss").0, cache.relu_pattern())
    };
    let (logits, cache) = net.forward(&params, &batch).expect("forward");
    let base_pattern = cache.relu_pattern();
    let (_, d_logits) = loss(&logits, &visible, &amodal).expect("loss");
    let mut grads = vec![0.0; params.len()];
    net.backward(&params, &cache, &d_logits, &mut grads);

    let entries = net.layout().entries().to_vec();
    let mut r = GradCheck {
        checked: 0,
        passed: 0,
        kinks: 0,
        worst: 0.0,
    };
    let mut draw = 0;
    while r.checked < samples && draw < 50 * samples {
        let e = &entries[draw % entries.len()];
        draw += 1;
        let k = e.offset + rng.random_range(0..e.len);
        let orig = params[k];
        params[k] = orig + step;
        let (up, up_pattern) = eval(&params);
        params[k] = orig - step;
        let (down, down_pattern) = eval(&params);
        params[k] = orig;
        if up_pattern != base_pattern || down_pattern != base_pattern {
            r.kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[k];
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-8 { 0.0 } else { (analytic - numeric).abs() / scale };
        r.worst = r.worst.max(rel);
        r.checked += 1;
        if rel < tolerance {
            r.passed += 1;
        }
    }
    r
}

/// Largest total weight over all one-to-one pairings, by enumerating
/// permutations; returns the total and the best pair set (zero weights dropped).
pub fn brute_force_matching(weights: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    fn go(
        w: &[Vec<f64>],
        row: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if row == w.len() {
            let total = pair_total(w, current);
            if total > best.0 {
                *best = (total, current.clone());
            }
            return;
        }
        go(w, row + 1, used, current, best);
        for j in 0..used.len() {
            if !used[j] && w[row][j] > 0.0 {
                used[j] = true;
                current.push((row, j));
                go(w, row + 1, used, current, best);
                current.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0.0, Vec::new());
    if rows > 0 && cols > 0 {
        go(weights, 0, &mut vec![false; cols], &mut Vec::new(), &mut best);
    }
    best
}

/// Sum of pair weights in pred-index order.
pub fn pair_total(weights: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted.iter().map(|&(i, j)| weights[i][j]).sum()
}

fn boundary_pixels(m: &lacnet_core::Mask) -> Vec<(i64, i64)> {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let on = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on(x, y) && !(on(x - 1, y) && on(x + 1, y) && on(x, y - 1) && on(x, y + 1)) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Boundary precision, recall and F from all-pairs squared distances.
pub fn boundary_oracle(pred: &lacnet_core::Mask, gt: &lacnet_core::Mask, tol: f64) -> (f64, f64, f64) {
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    let near = |a: (i64, i64), set: &[(i64, i64)]| {
        set.iter().any(|b| (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64) <= tol * tol)
    };
    let hp = bp.iter().filter(|&&a| near(a, &bg)).count();
    let hg = bg.iter().filter(|&&a| near(a, &bp)).count();
    let p = if bp.is_empty() { 0.0 } else { hp as f64 / bp.len() as f64 };
    let r = if bg.is_empty() { 0.0 } else { hg as f64 / bg.len() as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// A few random rectangles and discs, sometimes speckled.
pub fn random_mask<R: Rng>(rng: &mut R, w: usize, h: usize) -> lacnet_core::Mask {
    let mut m = lacnet_core::Mask::new(w, h);
    for _ in 0..rng.random_range(1..4) {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = rng.random_range(1.0..(w.min(h) as f64 / 3.0));
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= r * 0.6 };
                if inside {
                    m.set(x, y, true);
                }
            }
        }
    }
    if rng.random_bool(0.3) {
        for _ in 0..rng.random_range(1..20) {
            let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
            m.set(x, y, !m.get(x, y));
        }
    }
    m
}
