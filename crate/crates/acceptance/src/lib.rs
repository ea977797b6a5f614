//! Reference implementations for checking `vfm_guide`: plain loops, brute force
//! and long-run iteration. Nothing here calls the kernels it is compared with.

use vfm_guide::align::{Linear, Mlp};
use vfm_guide::numerics::{BBox, FeatureMap, Rng};

pub fn random_map(rng: &mut Rng, h: usize, w: usize, c: usize, stride: f64) -> FeatureMap<f64> {
    let data = (0..h * w * c).map(|_| rng.normal()).collect();
    FeatureMap::new(h, w, c, stride, data).expect("valid shape")
}

/// Box with corners drawn inside `[0, extent]²` and sides of at least `min_side`.
pub fn random_box(rng: &mut Rng, extent: f64, min_side: f64) -> BBox<f64> {
    let w = rng.uniform_in(min_side, extent);
    let h = rng.uniform_in(min_side, extent);
    let x1 = rng.uniform_in(0.0, extent - w);
    let y1 = rng.uniform_in(0.0, extent - h);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("positive sides")
}

fn value(map: &FeatureMap<f64>, y: usize, x: usize, ch: usize) -> f64 {
    map.data()[(y * map.width() + x) * map.channels() + ch]
}

/// Bilinear interpolation at cell coordinate `(x, y)`, one channel at a time.
pub fn bilinear(map: &FeatureMap<f64>, x: f64, y: f64) -> Vec<f64> {
    let (h, w) = (map.height(), map.width());
    let corner = |v: f64, n: usize| -> (usize, usize, f64) {
        let lo = v.floor() as usize;
        if lo + 1 >= n {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (x0, x1, fx) = corner(x, w);
    let (y0, y1, fy) = corner(y, h);
    (0..map.channels())
        .map(|ch| {
            let top = value(map, y0, x0, ch) * (1.0 - fx) + value(map, y0, x1, ch) * fx;
            let bottom = value(map, y1, x0, ch) * (1.0 - fx) + value(map, y1, x1, ch) * fx;
            top * (1.0 - fy) + bottom * fy
        })
        .collect()
}

/// Mean of the bilinear field over an `n × n` grid of points inside the box.
/// Cell `i` is centered at pixel `(i + 0.5) * stride`; the box is clipped to the
/// map footprint and sample points to the cell-center range.
pub fn dense_roi(map: &FeatureMap<f64>, b: &BBox<f64>, n: usize) -> Vec<f64> {
    let s = map.stride();
    let (h, w) = (map.height() as f64, map.width() as f64);
    let x1 = (b.x1 / s - 0.5).max(-0.5);
    let x2 = (b.x2 / s - 0.5).min(w - 0.5);
    let y1 = (b.y1 / s - 0.5).max(-0.5);
    let y2 = (b.y2 / s - 0.5).min(h - 0.5);
    let mut acc = vec![0.0; map.channels()];
    for i in 0..n {
        let y = (y1 + (i as f64 + 0.5) / n as f64 * (y2 - y1)).clamp(0.0, h - 1.0);
        for j in 0..n {
            let x = (x1 + (j as f64 + 0.5) / n as f64 * (x2 - x1)).clamp(0.0, w - 1.0);
            for (a, v) in acc.iter_mut().zip(bilinear(map, x, y)) {
                *a += v;
            }
        }
    }
    acc.iter().map(|a| a / (n * n) as f64).collect()
}

/// IoU by counting the centers of an `n × n` raster over the union's bounding box.
pub fn raster_iou(a: &BBox<f64>, b: &BBox<f64>, n: usize) -> f64 {
    let (lx, ly) = (a.x1.min(b.x1), a.y1.min(b.y1));
    let (hx, hy) = (a.x2.max(b.x2), a.y2.max(b.y2));
    let inside =
        |bx: &BBox<f64>, x: f64, y: f64| x >= bx.x1 && x <= bx.x2 && y >= bx.y1 && y <= bx.y2;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..n {
        let y = ly + (i as f64 + 0.5) / n as f64 * (hy - ly);
        for j in 0..n {
            let x = lx + (j as f64 + 0.5) / n as f64 * (hx - lx);
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `exp(z_i) / Σ exp(z_j)` without any shift.
pub fn softmax_direct(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn cross_entropy_direct(z: &[f64], target: usize) -> f64 {
    -softmax_direct(z)[target].ln()
}

pub fn squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances of each point to its assigned centroid.
pub fn sse(xs: &[Vec<f64>], centroids: &[Vec<f64>], labels: &[usize]) -> f64 {
    xs.iter()
        .zip(labels)
        .map(|(x, &l)| squared(x, &centroids[l]))
        .sum()
}

/// Minimum within-cluster sum of squares over every labeling of `xs` into at
/// most `k` groups (`k^n` labelings).
pub fn brute_force_kmeans(xs: &[Vec<f64>], k: usize) -> f64 {
    let n = xs.len();
    let d = xs[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut cost = 0.0;
        for g in 0..k {
            let members: Vec<&Vec<f64>> = xs
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == g)
                .map(|(x, _)| x)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> = (0..d)
                .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64)
                .collect();
            cost += members.iter().map(|m| squared(m, &mean)).sum::<f64>();
        }
        best = best.min(cost);
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Plain-domain Sinkhorn on `exp(init / eps)`: rows to 1, then columns to
/// `rows / cols`, for a fixed number of sweeps.
pub fn long_sinkhorn(init: &[f64], rows: usize, cols: usize, eps: f64, sweeps: usize) -> Vec<f64> {
    let peak = init.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut a: Vec<f64> = init.iter().map(|v| ((v - peak) / eps).exp()).collect();
    let target = rows as f64 / cols as f64;
    for _ in 0..sweeps {
        for r in 0..rows {
            let s: f64 = a[r * cols..(r + 1) * cols].iter().sum();
            for v in &mut a[r * cols..(r + 1) * cols] {
                *v /= s;
            }
        }
        for c in 0..cols {
            let s: f64 = (0..rows).map(|r| a[r * cols + c]).sum();
            for r in 0..rows {
                a[r * cols + c] *= target / s;
            }
        }
    }
    a
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn linear(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.output)
        .map(|o| {
            l.bias[o]
                + (0..l.input)
                    .map(|i| l.weight[o * l.input + i] * x[i])
                    .sum::<f64>()
        })
        .collect()
}

pub fn mlp(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let relu = |v: Vec<f64>| {
        v.into_iter()
            .map(|a| if a > 0.0 { a } else { 0.0 })
            .collect::<Vec<_>>()
    };
    let h1 = relu(linear(&m.layers[0], x));
    let h2 = relu(linear(&m.layers[1], &h1));
    linear(&m.layers[2], &h2)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean over levels and cells of `1 − cos(conv(x), v)`.
pub fn image_alignment_direct(
    maps: &[FeatureMap<f64>],
    targets: &[FeatureMap<f64>],
    convs: &[Linear],
) -> f64 {
    let mut total = 0.0;
    for ((m, t), conv) in maps.iter().zip(targets).zip(convs) {
        let mut level = 0.0;
        for y in 0..m.height() {
            for x in 0..m.width() {
                let cell: Vec<f64> = (0..m.channels()).map(|c| value(m, y, x, c)).collect();
                let v: Vec<f64> = (0..t.channels()).map(|c| value(t, y, x, c)).collect();
                level += 1.0 - cosine(&linear(conv, &cell), &v);
            }
        }
        total += level / m.num_cells() as f64;
    }
    total / maps.len() as f64
}

/// `θ_s + αⁿ (θ_t⁰ − θ_s)`: the teacher after `n` EMA steps towards a fixed student.
pub fn ema_closed_form(teacher0: &[f64], student: &[f64], alpha: f64, n: i32) -> Vec<f64> {
    teacher0
        .iter()
        .zip(student)
        .map(|(t, s)| s + alpha.powi(n) * (t - s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_iou_of_known_pair() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::new(1.0, 0.0, 3.0, 2.0).unwrap();
        assert!((raster_iou(&a, &b, 600) - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn brute_force_two_pairs() {
        let xs = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
        assert!((brute_force_kmeans(&xs, 2) - 1.0).abs() < 1e-12);
        assert_eq!(brute_force_kmeans(&xs, 4), 0.0);
    }

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(&[1.0, -2.0], 1e-5, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!(relative_error(&g, &[2.0, 3.0]) < 1e-9);
    }

    #[test]
    fn bilinear_hits_cells_and_midpoints() {
        let m = FeatureMap::new(2, 2, 1, 1.0, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear(&m, 1.0, 1.0), vec![3.0]);
        assert_eq!(bilinear(&m, 0.5, 0.5), vec![1.5]);
    }
}
