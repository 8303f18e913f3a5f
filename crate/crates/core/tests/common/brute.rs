//! Brute-force selection written from the definitions, using rank counting
//! instead of sorting.

/// Position of `j` in the order defined by `before(i, j)`.
fn rank(n: usize, j: usize, before: impl Fn(usize, usize) -> bool) -> usize {
    (0..n).filter(|&i| i != j && before(i, j)).count()
}

fn minmax(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::MAX, f64::min);
    let hi = v.iter().cloned().fold(f64::MIN, f64::max);
    v.iter()
        .map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

/// Nodes chosen most often; ties go to the lower index.
fn most_frequent(counts: &[usize], k: usize) -> Vec<usize> {
    let n = counts.len();
    (0..n)
        .filter(|&j| rank(n, j, |i, j| counts[i] > counts[j] || (counts[i] == counts[j] && i < j)) < k)
        .collect()
}

/// `scores[t][l][j]`.
pub fn layer_balanced(scores: &[Vec<Vec<f64>>], q: f64) -> Option<Vec<Vec<usize>>> {
    let (l, d) = (scores[0].len(), scores[0][0].len());
    let k = (q / 100.0 * (l * d) as f64 / l as f64).floor() as usize;
    if k == 0 {
        return None;
    }
    let mut out = Vec::new();
    for layer in 0..l {
        let mut counts = vec![0; d];
        for sample in scores {
            let s = minmax(&sample[layer]);
            for (j, c) in counts.iter_mut().enumerate() {
                let r = rank(d, j, |i, j| s[i] < s[j] || (s[i] == s[j] && i < j));
                if r < k {
                    *c += 1;
                }
            }
        }
        out.push(most_frequent(&counts, k));
    }
    Some(out)
}

pub fn global(scores: &[Vec<Vec<f64>>], q: f64, high: bool) -> Option<Vec<Vec<usize>>> {
    let (l, d) = (scores[0].len(), scores[0][0].len());
    let total = (q / 100.0 * (l * d) as f64).floor() as usize;
    if total == 0 {
        return None;
    }
    let mut counts = vec![0; l * d];
    for sample in scores {
        let norm: Vec<f64> = sample.iter().flat_map(|row| minmax(row)).collect();
        let raw: Vec<f64> = sample.iter().flatten().cloned().collect();
        let sign = if high { -1.0 } else { 1.0 };
        let key = |g: usize| (sign * norm[g], sign * raw[g]);
        for (g, c) in counts.iter_mut().enumerate() {
            let r = rank(l * d, g, |a, b| key(a) < key(b) || (key(a) == key(b) && a < b));
            if r < total {
                *c += 1;
            }
        }
    }
    let mut out = vec![Vec::new(); l];
    for g in most_frequent(&counts, total) {
        out[g / d].push(g % d);
    }
    Some(out)
}
