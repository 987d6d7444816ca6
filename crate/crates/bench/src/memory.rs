//! Peak working-set estimates, in bytes.

/// Chunk scratch of the chunked kernel (relative log-gates, scaled Q/K/V)
/// plus the carried `d_k × d_v` state, per sequence.
pub fn gla_chunked_bytes(batch: usize, chunk: usize, dk: usize, dv: usize, elem: usize) -> u64 {
    let per_seq = 3 * chunk * dk + 2 * chunk * dv + dk * dv + 2 * dv;
    (batch * per_seq * elem) as u64
}

/// Materialized `T × T` score matrix of standard attention, per sequence.
pub fn softmax_bytes(batch: usize, len: usize, elem: usize) -> u64 {
    (batch * len * len * elem) as u64
}
