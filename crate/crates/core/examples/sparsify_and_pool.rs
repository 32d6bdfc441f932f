//! Top-k sparsification, binarization and max pooling of patch activations.

use std::error::Error;

use mdpm::featurestore::{binarize, max_pool, sparsify, top_k_indices, Transform};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let a = [0.1f32, 4.0, 0.0, 2.5, 3.0, 0.7];
    let b = [1.2f32, 0.0, 0.3, 2.6, 0.0, 5.0];

    println!("top 3 of a:      {:?}", top_k_indices(&a, 3));
    println!("sparsify(a, 3):  {:?}", sparsify(&a, 3)?);
    println!("binarize(a, 3):  {:?}", binarize(&a, 3)?);

    for transform in [Transform::Identity, Transform::Sparsify(2), Transform::Binarize(2)] {
        let pooled = max_pool([&a[..], &b[..]], transform)?;
        println!("{transform:?} pooled: {pooled:?}");
    }

    // The indices themselves become transaction items, 1-based.
    let items: Vec<usize> = {
        let mut v: Vec<usize> = top_k_indices(&b, 3).into_iter().map(|i| i + 1).collect();
        v.sort_unstable();
        v
    };
    println!("items of b at k=3: {items:?}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
