//! Runs the staged pipeline end to end on the small configuration and
//! prints the comparison table it reports.
//!
//! cargo run --release --example pipeline_and_report -- [output dir]

use std::path::PathBuf;

use idcloak::workbench::pipeline::run_pipeline;
use idcloak::workbench::report::emit_report;
use idcloak::workbench::ExperimentConfig;

fn main() -> idcloak::Result<()> {
    let mut cfg = ExperimentConfig::smoke();
    cfg.output_dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("idcloak-smoke"));
    cfg.force = true;
    let root = run_pipeline(&cfg)?;
    let summary = emit_report(&root)?;
    println!(
        "{:<26} {:>9} {:>9} {:>9} {:>9}",
        "defense", "attacker", "ism", "fdfr", "quality"
    );
    for r in &summary.comparison {
        println!(
            "{:<26} {:>9} {:>9.4} {:>9.4} {:>9.4}",
            r.defense, r.attacker, r.test.ism, r.test.fdfr, r.test.quality
        );
    }
    for f in &summary.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
