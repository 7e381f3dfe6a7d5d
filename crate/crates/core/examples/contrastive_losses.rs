//! Evaluates the contrastive objectives on a small random batch and shows
//! how hard negatives raise the cross-modal loss.

use cmkt::objectives::*;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}

fn main() -> cmkt::Result<()> {
    let mut rng = cmkt::seed::rng(7);
    let (n, d) = (6, 8);
    let image = random(&mut rng, n, d);
    let text = &image + &(random(&mut rng, n, d) * 1.5);
    let v = EmbeddingBatch::sequential(image, Modality::Image)?;
    let l = EmbeddingBatch::sequential(text, Modality::Text)?;

    let cfg = ContrastiveConfig::default();
    let cmcl = cmcl_total(&v, &l, &cfg)?;
    println!("CMCL total {:.4}, per pair {:?}", cmcl.total, cmcl.per_item);

    let negatives = Array3::from_shape_fn((n, 2, d), |_| rng.random_range(-1.0..1.0));
    let hard = ContrastiveConfig { hard_negative_count: 2, ..cfg };
    let ans = ans_loss(&v, &l, &HardNegatives::new(negatives), &hard)?;
    println!("with 2 hard negatives per image: {:.4}", ans.total);

    let tcl = tcl_loss(&EmbeddingBatch::sequential(v.vectors().clone(), Modality::Text)?, &l, 0.05)?;
    println!("TCL between the two views: {:.4}", tcl.total);
    Ok(())
}
