//! Packs a [64, 128] activation at each bit width and reports size and speed.

use amaq::cli::bench_pack;
use amaq::quant::{Granularity, QuantAxis, UnitLayout};

fn main() -> amaq::Result<()> {
    let shape = [64, 128];
    let layout = UnitLayout::new(&shape, Granularity::Channel, QuantAxis::Channel)?;
    println!(
        "{:>4} {:>9} {:>9} {:>9} {:>10} {:>10}",
        "bits", "predicted", "measured", "raw f32", "pack MB/s", "unpack MB/s"
    );
    for bits in 1..=16 {
        let r = bench_pack(&shape, bits as f64, layout, 50, 0)?;
        println!(
            "{:>4} {:>9} {:>9} {:>9} {:>10.1} {:>10.1}",
            bits, r.predicted, r.measured, r.raw_f32, r.pack_mbps, r.unpack_mbps
        );
    }
    Ok(())
}
