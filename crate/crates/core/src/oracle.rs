//! Slow reference implementations used to check the fast paths.

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + h;
            let up = f(&buf);
            buf[i] = x[i] - h;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error `|a - b| / max(|a|, |b|)`, with a floor of `1e-8` on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Relative error of two vectors in the Euclidean norm.
pub fn rel_err_norm(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    num / den.max(1e-8)
}

/// Jaccard loss `1 - |gt \ m| / |gt u m|` of a mispredicted set `m`.
pub fn jaccard_loss_sets(gt: &[bool], mispredicted: &[bool]) -> f64 {
    let inter = gt.iter().zip(mispredicted).filter(|(&g, &m)| g && !m).count();
    let union = gt.iter().zip(mispredicted).filter(|(&g, &m)| g || m).count();
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Lovasz extension of a set function, evaluated by walking the nested
/// prefixes of the decreasing order of `errs` and calling `set_fn` on each.
pub fn lovasz_extension_bruteforce(errs: &[f64], set_fn: impl Fn(&[bool]) -> f64) -> f64 {
    let mut order: Vec<usize> = (0..errs.len()).collect();
    order.sort_by(|&a, &b| errs[b].total_cmp(&errs[a]).then(a.cmp(&b)));
    let mut mask = vec![false; errs.len()];
    let mut prev = set_fn(&mask);
    let mut total = 0.0;
    for &i in &order {
        mask[i] = true;
        let cur = set_fn(&mask);
        total += errs[i] * (cur - prev);
        prev = cur;
    }
    total
}

/// Point-in-oriented-box test using the corner polygon and edge cross products.
pub fn point_in_box_bruteforce(p: [f64; 3], center: [f64; 3], dims: [f64; 3], yaw: f64) -> bool {
    let (s, c) = yaw.sin_cos();
    let (hl, hw) = (dims[0] / 2.0, dims[1] / 2.0);
    let corners: Vec<[f64; 2]> = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .iter()
        .map(|&(a, b)| [center[0] + a * c - b * s, center[1] + a * s + b * c])
        .collect();
    let tol = 1e-9;
    for k in 0..4 {
        let a = corners[k];
        let b = corners[(k + 1) % 4];
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross < -tol {
            return false;
        }
    }
    (p[2] - center[2]).abs() <= dims[2] / 2.0 + tol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_quadratic() {
        let g = central_difference(&[1.0, -2.0], 1e-3, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn jaccard_sets() {
        assert_eq!(jaccard_loss_sets(&[true, true], &[false, false]), 0.0);
        assert_eq!(jaccard_loss_sets(&[true, false], &[true, true]), 1.0);
        assert!((jaccard_loss_sets(&[true, true, false], &[false, false, true]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn box_corners() {
        assert!(point_in_box_bruteforce([0.0, 0.0, 0.0], [0.0; 3], [2.0, 1.0, 1.0], 0.0));
        assert!(!point_in_box_bruteforce([1.1, 0.0, 0.0], [0.0; 3], [2.0, 1.0, 1.0], 0.0));
        assert!(point_in_box_bruteforce([0.0, 0.9, 0.0], [0.0; 3], [2.0, 1.0, 1.0], std::f64::consts::FRAC_PI_2));
    }
}
