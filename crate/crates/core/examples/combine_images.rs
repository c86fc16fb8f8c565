// Combine entity pictures side by side at a common height, as sent to models
// that accept a single image per turn.

use std::path::Path;

use mar_harness::image_ops::{combine, encode_for_wire, scaled_width, RasterImage};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/mini_kg/images");

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let names = ["ice", "water", "solar_system"];
    let images = names
        .iter()
        .map(|n| RasterImage::load(&Path::new(FIXTURES).join(format!("{n}.png"))))
        .collect::<Result<Vec<_>, _>>()?;
    let target = images.iter().map(RasterImage::height).max().unwrap_or(0);
    for (n, img) in names.iter().zip(&images) {
        println!(
            "{n}: {}x{} -> width {} at height {target}",
            img.width(),
            img.height(),
            scaled_width(img.width(), img.height(), target)
        );
    }
    let combined = combine(&images)?;
    println!("combined: {}x{}", combined.width(), combined.height());

    let out = tempfile::tempdir()?;
    let path = out.path().join("combined.png");
    combined.save_png(&path)?;
    assert_eq!(RasterImage::load(&path)?, combined);

    let url = encode_for_wire(&combined)?;
    println!("data URL: {}... ({} bytes)", &url[..40], url.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
