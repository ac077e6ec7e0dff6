//! Writes a small procedural dataset and a preview of its first scene.
//!
//! cargo run --release --example gen_dataset -- [out_dir]

use std::path::PathBuf;

use dcnet::ppm;
use dcnet::scene::{read_dataset, write_dataset, DatasetOptions, Split};

fn main() -> dcnet::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("dcnet-example-data"));
    let opts = DatasetOptions { n: 40, test_fraction: 0.25, seed: 7, ..Default::default() };
    let manifest = write_dataset(&opts, &out)?;
    println!("wrote {} samples to {}", manifest.count(), out.display());

    let data = read_dataset(&out)?;
    let mut per_count = [0usize; 5];
    for s in &data.samples {
        per_count[s.spec.elements.len().min(4)] += 1;
    }
    println!("element counts 1..4: {:?}", &per_count[1..]);
    println!("test scenes: {}", data.samples.iter().filter(|s| s.split == Split::Test).count());

    let first = &data.samples[0];
    ppm::write(&out.join("preview_target.ppm"), &first.conditions.target)?;
    for (i, e) in first.conditions.elements.iter().enumerate() {
        ppm::write(&out.join(format!("preview_el{i}_solo.ppm")), &e.solo)?;
        ppm::write(&out.join(format!("preview_el{i}_mask.ppm")), &e.mask)?;
        println!("element {i}: order {} offset {:?}", e.order, e.offset);
    }
    Ok(())
}
