//! Reference implementations used by the acceptance suite. Everything here is
//! written as a direct loop over the definitions, sharing no code with the
//! library beyond plain data types.

#![allow(dead_code)]

use srl::tensor::Tensor;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; absolute when both
/// vectors are below `1e-8`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn row(t: &Tensor, i: usize) -> &[f64] {
    let d = *t.shape().last().unwrap();
    &t.data()[i * d..(i + 1) * d]
}

/// `(positives, semi_positives, negatives)` as ascending index lists.
pub type Sets = (Vec<usize>, Vec<usize>, Vec<usize>);

/// Decoder partition by scanning: the anchor alone is positive, same-label
/// patches are semi-positive, the rest negative.
pub fn scan_dec_partition(anchor: usize, labels: &[usize]) -> Sets {
    let (mut p, mut q, mut n) = (vec![], vec![], vec![]);
    for i in 0..labels.len() {
        if i == anchor {
            p.push(i);
        } else if labels[i] == labels[anchor] {
            q.push(i);
        } else {
            n.push(i);
        }
    }
    (p, q, n)
}

/// Encoder partition by scanning: patch `i` is a nearest neighbour when fewer
/// than `k` other patches rank above it (higher cosine similarity, or equal
/// similarity and lower index).
pub fn scan_enc_partition(anchor: usize, labels: &[usize], feats: &Tensor, k: usize) -> Sets {
    let total = labels.len();
    let sim: Vec<f64> = (0..total).map(|i| cosine(row(feats, anchor), row(feats, i))).collect();
    let (mut p, mut q, mut n) = (vec![], vec![], vec![]);
    for i in 0..total {
        let in_top_k = i != anchor && {
            let above = (0..total)
                .filter(|&j| j != anchor && j != i)
                .filter(|&j| sim[j] > sim[i] || (sim[j] == sim[i] && j < i))
                .count();
            above < k
        };
        if i == anchor || in_top_k {
            p.push(i);
        } else if labels[i] == labels[anchor] {
            q.push(i);
        } else {
            n.push(i);
        }
    }
    (p, q, n)
}

/// One anchor's ranking loss written straight from the definition, or `None`
/// when it has neither semi-positives nor negatives.
pub fn ranking_term(anchor: &[f64], bank: &Tensor, sets: &Sets, tau: f64) -> Option<f64> {
    let (p, q, n) = sets;
    if q.is_empty() && n.is_empty() {
        return None;
    }
    let e = |i: usize| (cosine(anchor, row(bank, i)) / tau).exp();
    let mut below_p = 0.0;
    for &i in q.iter().chain(n) {
        below_p += e(i);
    }
    let mut first = 0.0;
    for &i in p {
        first -= (e(i) / below_p).ln();
    }
    first /= p.len() as f64;
    let mut second = 0.0;
    if !q.is_empty() && !n.is_empty() {
        let mut below_q = 0.0;
        for &i in n {
            below_q += e(i);
        }
        for &i in q {
            second -= (e(i) / below_q).ln();
        }
        second /= q.len() as f64;
    }
    Some(first + second)
}

/// Mean of the defined terms; 0 when none is defined.
pub fn mean_defined(terms: &[Option<f64>]) -> f64 {
    let kept: Vec<f64> = terms.iter().flatten().copied().collect();
    if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

/// KL of slot `s`'s attention (`attn: [S, T, N]`, renormalized over patches)
/// against the uniform distribution, averaged over frames.
pub fn kl_to_uniform(attn: &Tensor, s: usize) -> f64 {
    let (t, n) = (attn.shape()[1], attn.shape()[2]);
    let mut acc = 0.0;
    for f in 0..t {
        let mut mass = 0.0;
        for j in 0..n {
            mass += attn.at(&[s, f, j]);
        }
        for j in 0..n {
            let p = attn.at(&[s, f, j]) / mass;
            if p > 0.0 {
                acc += p * (p.ln() - (1.0 / n as f64).ln());
            }
        }
    }
    acc / t as f64
}

/// Penalized-slot selection as nested loops: each round walks every
/// unpenalized pair in `(i, j)` order, keeps the first pair of maximal
/// final-frame cosine similarity, then penalizes the member with the smaller
/// KL (`i` on ties).
pub fn loop_select(slots: &Tensor, attn: &Tensor, m: usize) -> Vec<usize> {
    let (t, s) = (slots.shape()[0], slots.shape()[1]);
    let d = slots.shape()[2];
    let last = |k: usize| &slots.data()[((t - 1) * s + k) * d..((t - 1) * s + k + 1) * d];
    let mut chosen: Vec<usize> = vec![];
    for _ in 0..m {
        let mut best = f64::NEG_INFINITY;
        let mut pair = (usize::MAX, usize::MAX);
        for i in 0..s {
            for j in (i + 1)..s {
                if chosen.contains(&i) || chosen.contains(&j) {
                    continue;
                }
                let c = cosine(last(i), last(j));
                if pair.0 == usize::MAX || c > best {
                    best = c;
                    pair = (i, j);
                }
            }
        }
        let (i, j) = pair;
        chosen.push(if kl_to_uniform(attn, j) < kl_to_uniform(attn, i) { j } else { i });
    }
    chosen
}

/// ARI from explicit pair enumeration: for every unordered pixel pair, whether
/// the two labelings agree on "same cluster".
pub fn pair_count_ari(pred: &[u32], gt: &[u32]) -> f64 {
    let n = pred.len();
    let (mut both, mut only_p, mut only_g, mut neither) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in (i + 1)..n {
            match (pred[i] == pred[j], gt[i] == gt[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_p += 1.0,
                (false, true) => only_g += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let num = 2.0 * (both * neither - only_p * only_g);
    let den = (both + only_p) * (only_p + neither) + (both + only_g) * (only_g + neither);
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Foreground ARI at video level (all pixels jointly) or image level (mean
/// over frames that contain foreground); `None` when no foreground exists.
pub fn fg_ari_oracle(pred: &[u32], gt: &[u32], frames: usize, video: bool) -> Option<f64> {
    let fg = |p: &[u32], g: &[u32]| -> (Vec<u32>, Vec<u32>) {
        let mut a = vec![];
        let mut b = vec![];
        for i in 0..g.len() {
            if g[i] != 0 {
                a.push(p[i]);
                b.push(g[i]);
            }
        }
        (a, b)
    };
    if video {
        let (a, b) = fg(pred, gt);
        return (!b.is_empty()).then(|| pair_count_ari(&a, &b));
    }
    let plane = gt.len() / frames;
    let scores: Vec<f64> = (0..frames)
        .filter_map(|t| {
            let (a, b) = fg(&pred[t * plane..(t + 1) * plane], &gt[t * plane..(t + 1) * plane]);
            (!b.is_empty()).then(|| pair_count_ari(&a, &b))
        })
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean best overlap by trying every (ground truth, prediction) id pair and
/// counting pixels directly; ground-truth id 0 is background.
pub fn exhaustive_mbo(pred: &[u32], gt: &[u32], frames: usize, video: bool) -> Option<f64> {
    let score = |p: &[u32], g: &[u32]| -> Option<f64> {
        let mut gt_ids: Vec<u32> = g.iter().copied().filter(|&x| x != 0).collect();
        gt_ids.sort();
        gt_ids.dedup();
        let mut pred_ids: Vec<u32> = pred.to_vec();
        pred_ids.sort();
        pred_ids.dedup();
        if gt_ids.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &gi in &gt_ids {
            let mut best = 0.0f64;
            for &pi in &pred_ids {
                let mut inter = 0usize;
                let mut union = 0usize;
                for k in 0..g.len() {
                    let (a, b) = (p[k] == pi, g[k] == gi);
                    inter += (a && b) as usize;
                    union += (a || b) as usize;
                }
                if union > 0 {
                    best = best.max(inter as f64 / union as f64);
                }
            }
            total += best;
        }
        Some(total / gt_ids.len() as f64)
    };
    if video {
        return score(pred, gt);
    }
    let plane = gt.len() / frames;
    let scores: Vec<f64> = (0..frames)
        .filter_map(|t| score(&pred[t * plane..(t + 1) * plane], &gt[t * plane..(t + 1) * plane]))
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}
