use super::{check_inputs, LossOutput};
use crate::Result;

/// Lovász-softmax loss averaged over the classes present in the masked
/// target. Per class the errors are `|fg − p|`; ties in the descending sort
/// are broken by voxel index.
pub fn lovasz_softmax(probs: &[f64], target: &[u8], mask: &[bool]) -> Result<LossOutput> {
    let (width, idx) = check_inputs(probs, target, mask)?;
    let mut present = vec![false; width];
    for &v in &idx {
        present[target[v] as usize] = true;
    }
    let classes: Vec<usize> = (0..width).filter(|&c| present[c]).collect();
    let scale = 1.0 / classes.len() as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut loss = 0.0;
    let mut order = idx.clone();
    let mut errors = vec![0.0; target.len()];
    for &c in &classes {
        let gts = idx.iter().filter(|&&v| target[v] as usize == c).count() as f64;
        for &v in &idx {
            let fg = if target[v] as usize == c { 1.0 } else { 0.0 };
            errors[v] = (fg - probs[v * width + c]).abs();
        }
        order.copy_from_slice(&idx);
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        // Gradient of the Jaccard loss along the sorted prefix chain.
        let mut inter = gts;
        let mut union = gts;
        let mut prev = 0.0;
        for &v in &order {
            let fg = target[v] as usize == c;
            if fg {
                inter -= 1.0;
            } else {
                union += 1.0;
            }
            let jac = 1.0 - inter / union;
            let w = jac - prev;
            prev = jac;
            loss += scale * w * errors[v];
            let j = v * width + c;
            let sign = if fg { -1.0 } else { 1.0 };
            // d|fg − p|/dp; at p == fg the subgradient of the same sign is used.
            grad[j] += scale * w * sign;
        }
    }
    Ok(LossOutput { loss, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    /// Jaccard loss of the mispredicted set `wrong` for class `c`.
    fn jaccard_set_loss(target: &[u8], c: u8, wrong: &[bool]) -> f64 {
        let gt: Vec<bool> = target.iter().map(|&t| t == c).collect();
        let inter = (0..target.len()).filter(|&i| gt[i] && !wrong[i]).count() as f64;
        let union = (0..target.len()).filter(|&i| gt[i] || wrong[i]).count() as f64;
        1.0 - inter / union
    }

    /// Literal Lovász extension: sort errors, walk prefix sets, weight each
    /// error by the increment of the set function.
    fn literal(probs: &[f64], target: &[u8], width: usize) -> f64 {
        let n = target.len();
        let classes: Vec<u8> = (0..width as u8).filter(|c| target.contains(c)).collect();
        let mut total = 0.0;
        for &c in &classes {
            let e: Vec<f64> = (0..n)
                .map(|i| {
                    let p = probs[i * width + c as usize];
                    if target[i] == c {
                        1.0 - p
                    } else {
                        p
                    }
                })
                .collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.sort_by(|&a, &b| e[b].partial_cmp(&e[a]).unwrap().then(a.cmp(&b)));
            let mut set = vec![false; n];
            let mut before = 0.0;
            let mut acc = 0.0;
            for &i in &perm {
                set[i] = true;
                let after = jaccard_set_loss(target, c, &set);
                acc += e[i] * (after - before);
                before = after;
            }
            total += acc;
        }
        total / classes.len() as f64
    }

    fn mean_one_minus_iou(pred: &[u8], target: &[u8], width: usize) -> f64 {
        let classes: Vec<u8> = (0..width as u8).filter(|c| target.contains(c)).collect();
        let mut s = 0.0;
        for &c in &classes {
            let inter = pred
                .iter()
                .zip(target)
                .filter(|(p, t)| **p == c && **t == c)
                .count() as f64;
            let union = pred
                .iter()
                .zip(target)
                .filter(|(p, t)| **p == c || **t == c)
                .count() as f64;
            s += 1.0 - inter / union;
        }
        s / classes.len() as f64
    }

    fn one_hot(labels: &[u8], width: usize) -> Vec<f64> {
        let mut p = vec![0.0; labels.len() * width];
        for (i, &l) in labels.iter().enumerate() {
            p[i * width + l as usize] = 1.0;
        }
        p
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let t = [0u8, 1, 2, 2, 1];
        let out = lovasz_softmax(&one_hot(&t, 3), &t, &[true; 5]).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn vertex_agreement_on_small_example() {
        let t = [0u8, 1, 1, 2, 2, 0];
        let p = [0u8, 1, 2, 2, 1, 1];
        let out = lovasz_softmax(&one_hot(&p, 3), &t, &[true; 6]).unwrap();
        assert!((out.loss - mean_one_minus_iou(&p, &t, 3)).abs() < 1e-12);
    }

    /// Advances `v` to the next non-decreasing sequence over `0..k`.
    fn next_multiset(v: &mut [usize], k: usize) -> bool {
        let n = v.len();
        let mut i = n;
        while i > 0 {
            i -= 1;
            if v[i] + 1 < k {
                let x = v[i] + 1;
                for slot in &mut v[i..] {
                    *slot = x;
                }
                return true;
            }
        }
        false
    }

    #[test]
    fn vertex_agreement_exhaustive_three_by_three() {
        // Hard predictions depend only on the multiset of (target, pred)
        // pairs, so every 9-voxel case with 3 classes is one of these.
        let width = 3;
        let mut pairs = vec![0usize; 9];
        let mut cases = 0;
        loop {
            let t: Vec<u8> = pairs.iter().map(|&x| (x / width) as u8).collect();
            let p: Vec<u8> = pairs.iter().map(|&x| (x % width) as u8).collect();
            let out = lovasz_softmax(&one_hot(&p, width), &t, &[true; 9]).unwrap();
            let expected = mean_one_minus_iou(&p, &t, width);
            assert!((out.loss - expected).abs() < 1e-9, "t {t:?} p {p:?}");
            cases += 1;
            if !next_multiset(&mut pairs, width * width) {
                break;
            }
        }
        assert_eq!(cases, 24310);
    }

    #[test]
    fn vertex_agreement_exhaustive_small_orderings() {
        // Every ordered labelling up to 5 voxels, checking order independence.
        let width: usize = 3;
        for n in 1..=5usize {
            let total = width.pow(2 * n as u32);
            for code in 0..total {
                let mut c = code;
                let mut t = vec![0u8; n];
                let mut p = vec![0u8; n];
                for i in 0..n {
                    t[i] = (c % width) as u8;
                    c /= width;
                    p[i] = (c % width) as u8;
                    c /= width;
                }
                let out = lovasz_softmax(&one_hot(&p, width), &t, &vec![true; n]).unwrap();
                assert!((out.loss - mean_one_minus_iou(&p, &t, width)).abs() < 1e-9);
            }
        }
    }

    fn lattice_rows(width: usize) -> Vec<Vec<f64>> {
        // Points of the simplex with coordinates in multiples of 0.25.
        let mut rows = Vec::new();
        let mut cur = vec![0usize; width];
        fn rec(i: usize, left: usize, cur: &mut Vec<usize>, rows: &mut Vec<Vec<f64>>) {
            if i + 1 == cur.len() {
                cur[i] = left;
                rows.push(cur.iter().map(|&x| x as f64 * 0.25).collect());
                return;
            }
            for x in 0..=left {
                cur[i] = x;
                rec(i + 1, left - x, cur, rows);
            }
        }
        rec(0, 4, &mut cur, &mut rows);
        rows
    }

    #[test]
    fn matches_literal_definition_on_lattice() {
        let width = 3;
        let rows = lattice_rows(width);
        assert_eq!(rows.len(), 15);
        // Exhaustive for up to 3 voxels.
        for n in 1..=3usize {
            let tcount = width.pow(n as u32);
            let pcount = rows.len().pow(n as u32);
            for tc in 0..tcount {
                let t: Vec<u8> = (0..n)
                    .map(|i| ((tc / width.pow(i as u32)) % width) as u8)
                    .collect();
                for pc in 0..pcount {
                    let mut probs = Vec::with_capacity(n * width);
                    for i in 0..n {
                        probs.extend(&rows[(pc / rows.len().pow(i as u32)) % rows.len()]);
                    }
                    let out = lovasz_softmax(&probs, &t, &vec![true; n]).unwrap();
                    assert!((out.loss - literal(&probs, &t, width)).abs() < 1e-12);
                }
            }
        }
        // Sampled lattice cases on the full 3×3×1 grid.
        let mut rng = seed::rng(31);
        for _ in 0..20_000 {
            let t: Vec<u8> = (0..9).map(|_| rng.random_range(0..width as u8)).collect();
            let probs: Vec<f64> = (0..9)
                .flat_map(|_| rows[rng.random_range(0..rows.len())].clone())
                .collect();
            let out = lovasz_softmax(&probs, &t, &[true; 9]).unwrap();
            assert!((out.loss - literal(&probs, &t, width)).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_restricts_voxels_and_classes() {
        let t = [0u8, 1, 2, 2];
        let probs = one_hot(&[0, 2, 2, 2], 3);
        let masked = lovasz_softmax(&probs, &t, &[true, false, true, true]).unwrap();
        assert_eq!(masked.loss, 0.0);
        assert!(masked.grad[3..6].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_ties() {
        let mut rng = seed::rng(32);
        let width = 4;
        for _ in 0..20 {
            let n = 10;
            let probs: Vec<f64> = (0..n * width).map(|_| rng.random_range(0.0..1.0)).collect();
            let t: Vec<u8> = (0..n).map(|_| rng.random_range(0..width as u8)).collect();
            let mask = vec![true; n];
            let g = lovasz_softmax(&probs, &t, &mask).unwrap().grad;
            let h = 1e-8;
            for j in 0..probs.len() {
                let mut a = probs.clone();
                let mut b = probs.clone();
                a[j] += h;
                b[j] -= h;
                let fd = (lovasz_softmax(&a, &t, &mask).unwrap().loss
                    - lovasz_softmax(&b, &t, &mask).unwrap().loss)
                    / (2.0 * h);
                assert!((g[j] - fd).abs() < 1e-5, "{j}: {} vs {fd}", g[j]);
            }
        }
    }
}
