/// Gradient-reversal coefficient at step `i`: `0.2 / (1 + exp(-i/1000)) - 0.1`.
pub fn lambda_schedule(step: usize) -> f64 {
    0.2 / (1.0 + (-(step as f64) / 1000.0).exp()) - 0.1
}
