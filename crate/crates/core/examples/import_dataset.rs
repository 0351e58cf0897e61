//! Writes a few photos as tensor files with a manifest, imports them as an
//! identity dataset, and shows the errors a broken manifest produces.
//!
//! cargo run --release --example import_dataset

use std::fs;

use idcloak::tns::write_tensor;
use idcloak::workbench::dataset::{render_identity, Style};
use idcloak::workbench::import_dataset;

fn main() -> idcloak::Result<()> {
    let dir = std::env::temp_dir().join("idcloak-import-demo");
    fs::create_dir_all(&dir)?;
    let photos = render_identity(77, 16, 6, 1.0, Style::Portrait, 0);
    let mut manifest = String::from("identity=demo\n");
    for (k, x) in photos.iter().enumerate() {
        let name = format!("photo_{k}.tns");
        write_tensor(&dir.join(&name), x)?;
        let split = if k < 2 { "train" } else { "test" };
        manifest.push_str(&format!("{split}={name}\n"));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, &manifest)?;

    let ds = import_dataset(&path)?;
    println!(
        "imported `{}`: {} train, {} test, shape {:?}",
        ds.identity,
        ds.train.len(),
        ds.test.len(),
        ds.shape
    );

    fs::write(&path, format!("{manifest}test=photo_0.tns\n"))?;
    if let Err(e) = import_dataset(&path) {
        println!("overlapping splits rejected (exit code {}): {e}", e.exit_code());
    }
    fs::write(&path, format!("{manifest}test=missing.tns\n"))?;
    if let Err(e) = import_dataset(&path) {
        println!("missing file rejected (exit code {}): {e}", e.exit_code());
    }
    Ok(())
}
