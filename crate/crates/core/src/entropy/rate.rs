use crate::error::{Error, Result};
use crate::tensor::Float;

/// Information content `Σ −log2 p` in bits with 64-bit accumulation.
pub fn estimate_rate<T: Float>(p: &[T]) -> Result<f64> {
    let mut bits = 0f64;
    for (i, &v) in p.iter().enumerate() {
        let v = v.as_f64();
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::InvalidArgument(format!("probability {v} at index {i} is outside (0, 1]")));
        }
        bits -= v.log2();
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_cases() {
        assert_eq!(estimate_rate(&[1.0f32; 10]).unwrap(), 0.0);
        assert_eq!(estimate_rate(&[0.5f32; 8]).unwrap(), 8.0);
        assert!(estimate_rate(&[0.5f32, 0.0]).is_err());
    }
}
