//! Analytic FLOP accounting.
//!
//! A multiply-add counts as two FLOPs. For `new` tokens appended after
//! `prefix` cached positions, one pre-norm block costs
//!
//! ```text
//! dense     = new · (8·d² + 4·d·d_ff)          // Q, K, V, O and the two MLP matrices
//! attention = 4·d · Σ_{j=1..new} (prefix + j)  // scores plus weighted values
//!           = 4·d · (new·prefix + new·(new+1)/2)
//! ```
//!
//! Norms, softmax exponentials and activations are not counted. An output
//! head over a vocabulary of `vocab` adds `2·d·vocab` per projected row.

pub fn block_flops(d_model: usize, d_ff: usize, prefix_len: usize, new_tokens: usize) -> u64 {
    let (d, dff, p, n) = (
        d_model as u64,
        d_ff as u64,
        prefix_len as u64,
        new_tokens as u64,
    );
    let dense = n * (8 * d * d + 4 * d * dff);
    let attention = 4 * d * (n * p + n * (n + 1) / 2);
    dense + attention
}

pub fn head_flops(d_model: usize, vocab: usize, rows: usize) -> u64 {
    2 * d_model as u64 * vocab as u64 * rows as u64
}

/// Stack of `n_layers` blocks followed by an output head on every new row.
pub fn transformer_flops(
    d_model: usize,
    d_ff: usize,
    n_layers: usize,
    vocab: usize,
    prefix_len: usize,
    new_tokens: usize,
) -> u64 {
    n_layers as u64 * block_flops(d_model, d_ff, prefix_len, new_tokens)
        + head_flops(d_model, vocab, new_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_single_layer() {
        // d=4, d_ff=16, vocab=8, one token, empty prefix:
        // dense 8·16 + 4·4·16 = 384, attention 4·4·1 = 16, head 2·4·8 = 64.
        assert_eq!(transformer_flops(4, 16, 1, 8, 0, 1), 464);
        // Three tokens after a prefix of 2: Σ ctx = 3 + 4 + 5 = 12.
        assert_eq!(block_flops(4, 16, 2, 3), 3 * 384 + 16 * 12);
    }

    #[test]
    fn zero_tokens_cost_nothing() {
        assert_eq!(transformer_flops(8, 32, 3, 10, 17, 0), 0);
    }
}
