use crate::tensor::Tensor;

/// Hard per-patch slot assignments from the encoder attention and decoder masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabels {
    pub t: usize,
    pub n: usize,
    /// `[T * N]`, row-major over `(t, n)`.
    pub attn: Vec<usize>,
    pub mask: Vec<usize>,
}

/// Argmax over the leading slot axis of an `[S, T, N]` map; ties go to the
/// lowest slot index.
pub fn argmax_slots(map: &Tensor) -> Vec<usize> {
    let shape = map.shape();
    assert_eq!(shape.len(), 3, "expected an [S, T, N] map, got {shape:?}");
    let (s, tn) = (shape[0], shape[1] * shape[2]);
    let data = map.data();
    (0..tn)
        .map(|i| {
            let mut best = 0;
            for k in 1..s {
                if data[k * tn + i] > data[best * tn + i] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn pseudo_labels(attn: &Tensor, mask: &Tensor) -> PseudoLabels {
    assert_eq!(attn.shape(), mask.shape(), "attention and mask maps differ in shape");
    PseudoLabels {
        t: attn.shape()[1],
        n: attn.shape()[2],
        attn: argmax_slots(attn),
        mask: argmax_slots(mask),
    }
}
