//! Loads a scene file, renders its ground truth in both orders and, given a
//! trained checkpoint, samples the model for each order.
//!
//! cargo run --release --example sample_scene -- [run/inter.ckpt]

use std::path::{Path, PathBuf};

use dcnet::harness::cmd_sample;
use dcnet::model::Fusion;
use dcnet::ppm;
use dcnet::scene::{parse_scene_file, render_scene};

fn main() -> dcnet::Result<()> {
    let scene = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/scenes/two_shapes.toml");
    let out = std::env::temp_dir().join("dcnet-example-sample");
    std::fs::create_dir_all(&out).map_err(|e| dcnet::Error::io(&out, e))?;
    let text = std::fs::read_to_string(&scene).map_err(|e| dcnet::Error::io(&scene, e))?;

    for (name, swap) in [("as_written", None), ("swapped", Some((0, 1)))] {
        let mut sf = parse_scene_file(&text, scene.parent().unwrap())?;
        if let Some((i, j)) = swap {
            sf.swap_order(i, j)?;
        }
        let spec = sf.scene_spec().expect("procedural scene");
        ppm::write(&out.join(format!("truth_{name}.ppm")), &render_scene(&spec))?;
        let orders: Vec<usize> = sf.elements.iter().map(|e| e.conditions.order).collect();
        println!("{name}: layer ranks {orders:?}");
        if let Some(ck) = std::env::args().nth(1).map(PathBuf::from) {
            let img = cmd_sample(&ck, &scene, swap, 0, Fusion::Inter, &out.join(format!("model_{name}.ppm")))?;
            println!("  sampled {}x{}", img.width, img.height);
        }
    }
    println!("images in {}", out.display());
    Ok(())
}
