//! Central finite-difference check of a conv -> relu -> bilinear chain.
//!
//! ```text
//! cargo run --release --example gradcheck [seed]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segimprint::numerics::{self, Graph};
use segimprint::Tensor;

fn loss(x: &Tensor, k: &Tensor, probe: &Tensor) -> f64 {
    let y = numerics::conv2d(x, k, 1, 1).unwrap();
    let y = numerics::upsample_bilinear(&numerics::relu(&y), (10, 10)).unwrap();
    y.data().iter().zip(probe.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let x = rand(&[2, 5, 5]);
    let k = rand(&[3, 2, 3, 3]);
    let probe = rand(&[3, 10, 10]);

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let kv = g.param(k.clone());
    let c = g.conv2d(xv, kv, 1, 1).unwrap();
    let r = g.relu(c);
    let out = g.upsample_bilinear(r, (10, 10)).unwrap();
    let grads = g.backward(out, probe.clone()).unwrap();
    let analytic = grads.get(kv).unwrap();

    let h = 1e-3f32;
    let mut worst = 0.0f64;
    for i in 0..k.len() {
        let (mut plus, mut minus) = (k.clone(), k.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let numeric = (loss(&x, &plus, &probe) - loss(&x, &minus, &probe)) / (2.0 * h as f64);
        let a = analytic.data()[i] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    println!("kernel gradient: {} entries, worst relative error {worst:.2e}", k.len());
}
