use super::rng::{RngStreams, Stream};
use super::tensor::Tensor;

/// Glorot-uniform weights drawn from the `init` stream.
///
/// Values are uniform in `±√(6/(fan_in+fan_out))` with `fan_in` the row
/// count and `fan_out` the column count.
pub fn glorot_uniform(rows: usize, cols: usize, streams: &mut RngStreams) -> Tensor {
    let bound = glorot_bound(rows, cols);
    let data = (0..rows * cols)
        .map(|_| (2.0 * streams.uniform(Stream::Init) - 1.0) * bound)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches value count")
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
