use crate::tensor::{Result, Tensor, TensorError};

/// Fixed 2-D sine positional embedding, `[H×W×C]`.
///
/// Channels `0..C/2` encode the row index and `C/2..C` the column index.
/// Within each half, channel pair `(2i, 2i+1)` holds
/// `(sin(p·ω_i), cos(p·ω_i))` with `ω_i = 10000^(−4i/C)`.
pub fn sine_pos_embed_2d(height: usize, width: usize, channels: usize) -> Result<Tensor> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(TensorError::Validation(format!(
            "positional embedding needs channels divisible by 4, got {channels}"
        )));
    }
    let quarter = channels / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| 10000f64.powf(-4.0 * i as f64 / channels as f64))
        .collect();
    let mut data = Vec::with_capacity(height * width * channels);
    for y in 0..height {
        for x in 0..width {
            for pos in [y as f64, x as f64] {
                for &w in &freqs {
                    data.push((pos * w).sin());
                    data.push((pos * w).cos());
                }
            }
        }
    }
    Tensor::new(&[height, width, channels], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let t = sine_pos_embed_2d(3, 3, 8).unwrap();
        let origin = &t.data()[..8];
        for (c, &v) in origin.iter().enumerate() {
            assert_eq!(v, if c % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn values_bounded_and_rejects_bad_channels() {
        let t = sine_pos_embed_2d(7, 5, 12).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sine_pos_embed_2d(2, 2, 6).is_err());
        assert!(sine_pos_embed_2d(2, 2, 0).is_err());
    }

    #[test]
    fn positions_pairwise_distinct_up_to_64() {
        let c = 16;
        let t = sine_pos_embed_2d(64, 64, c).unwrap();
        let rows: Vec<&[f64]> = t.data().chunks(c).collect();
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                let dist: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(dist > 1e-9, "positions {i} and {j} collide");
            }
        }
    }
}
