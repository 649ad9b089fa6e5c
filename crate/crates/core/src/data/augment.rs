use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PAD: usize = 4;

/// Random crop from a 4-pixel zero-padded canvas plus a random horizontal
/// flip, drawn independently per example of a `[B × C × H × W]` batch.
pub fn augment_batch<R: Rng + ?Sized>(batch: &Tensor, rng: &mut R) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(Error::Shape(format!(
            "augmentation needs [B×C×H×W] images, got {:?}",
            batch.shape()
        )));
    }
    let [b, c, h, w] = [
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    ];
    let src = batch.data();
    let mut out = vec![0.0; src.len()];
    for n in 0..b {
        let dy = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        let dx = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            let base = (n * c + ch) * h * w;
            for r in 0..h {
                let sr = r as isize + dy;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                for col in 0..w {
                    let oc = if flip { w - 1 - col } else { col };
                    let sc = col as isize + dx;
                    if sc >= 0 && sc < w as isize {
                        out[base + r * w + oc] = src[base + sr as usize * w + sc as usize];
                    }
                }
            }
        }
    }
    Tensor::new(batch.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preserves_shape_and_mass_bound() {
        let x = Tensor::filled(&[3, 2, 8, 8], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = augment_batch(&x, &mut rng).unwrap();
        assert_eq!(y.shape(), x.shape());
        // a crop can only lose pixels to padding, never invent them
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let kept = y.data().iter().filter(|&&v| v == 1.0).count();
        assert!(kept >= 3 * 2 * 4 * 4);
    }

    #[test]
    fn rejects_flat_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment_batch(&Tensor::zeros(&[4, 2]), &mut rng).is_err());
    }
}
