//! Fake-quantizes a random activation at several bit widths and granularities
//! and prints the reconstruction error.

use amaq::autodiff::gradcheck::random_tensor;
use amaq::quant::{fake_quant_uniform, Granularity, QuantAxis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> amaq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor(&[16, 64], 1.0, &mut rng);
    let grans = [
        ("tensor", Granularity::Tensor),
        ("channel", Granularity::Channel),
        ("group8", Granularity::Group(8)),
    ];
    println!("{:>8} {:>5} {:>12}", "gran", "bits", "mse");
    for (name, g) in grans {
        for bits in [2.0, 3.0, 4.0, 6.0, 8.0] {
            let r = fake_quant_uniform(&x, bits, g, QuantAxis::Channel)?;
            let mse = x
                .data()
                .iter()
                .zip(r.x_hat.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / x.numel() as f64;
            println!("{name:>8} {bits:>5} {mse:>12.3e}");
        }
    }
    Ok(())
}
