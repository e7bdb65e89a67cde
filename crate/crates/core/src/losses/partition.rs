use super::LossError;
use crate::tensor::Tensor;

/// Anchor-relative split of the `T * N` flattened patch indices.
///
/// Indices are flattened as `t * N + n`; every set is sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TernaryPartition {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub semi_positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Positive,
    SemiPositive,
    Negative,
}

impl TernaryPartition {
    fn from_roles(anchor: usize, roles: &[Role]) -> Self {
        let pick = |r: Role| -> Vec<usize> {
            roles
                .iter()
                .enumerate()
                .filter(|&(_, &x)| x == r)
                .map(|(i, _)| i)
                .collect()
        };
        Self {
            anchor,
            positives: pick(Role::Positive),
            semi_positives: pick(Role::SemiPositive),
            negatives: pick(Role::Negative),
        }
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.semi_positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-index roles over `0..len()`.
    pub fn roles(&self) -> Vec<Role> {
        let mut out = vec![Role::Negative; self.len()];
        for &i in &self.positives {
            out[i] = Role::Positive;
        }
        for &i in &self.semi_positives {
            out[i] = Role::SemiPositive;
        }
        out
    }
}

/// Positives are the anchor alone; semi-positives share the anchor's label.
pub fn build_dec_partition(anchor: usize, labels: &[usize]) -> TernaryPartition {
    assert!(anchor < labels.len(), "anchor {anchor} out of {} patches", labels.len());
    let roles: Vec<Role> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if i == anchor {
                Role::Positive
            } else if l == labels[anchor] {
                Role::SemiPositive
            } else {
                Role::Negative
            }
        })
        .collect();
    TernaryPartition::from_roles(anchor, &roles)
}

/// Cosine similarity of every row of `features` (`[.., D]`, flattened to
/// `[T*N, D]`) against row `anchor`.
pub fn anchor_similarities(features: &Tensor, anchor: usize) -> Vec<f64> {
    let d = *features.shape().last().expect("feature rank >= 1");
    let rows: Vec<&[f64]> = features.data().chunks(d).collect();
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let a = rows[anchor];
    let na = norm(a);
    rows.iter()
        .map(|r| {
            let dot: f64 = a.iter().zip(*r).map(|(x, y)| x * y).sum();
            let denom = na * norm(r);
            if denom > 0.0 {
                dot / denom
            } else {
                0.0
            }
        })
        .collect()
}

/// Positives are the anchor plus its `k` nearest neighbours by backbone
/// cosine similarity (ties to the lower index); semi-positives are the
/// remaining patches sharing the anchor's label.
pub fn build_enc_partition(
    anchor: usize,
    labels: &[usize],
    features: &Tensor,
    k: usize,
) -> Result<TernaryPartition, LossError> {
    let total = labels.len();
    let rows = features.numel() / features.shape().last().copied().unwrap_or(1);
    if rows != total {
        return Err(LossError::Shape(format!(
            "{total} labels but {rows} feature rows"
        )));
    }
    if k == 0 || k >= total {
        return Err(LossError::KOutOfRange { k, max: total - 1 });
    }
    let sims = anchor_similarities(features, anchor);
    let mut order: Vec<usize> = (0..total).filter(|&i| i != anchor).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let mut roles: Vec<Role> = labels
        .iter()
        .map(|&l| {
            if l == labels[anchor] {
                Role::SemiPositive
            } else {
                Role::Negative
            }
        })
        .collect();
    roles[anchor] = Role::Positive;
    for &i in &order[..k] {
        roles[i] = Role::Positive;
    }
    Ok(TernaryPartition::from_roles(anchor, &roles))
}
