//! The whole pipeline on the bundled fixture corpus: ingest, sample answers,
//! train the question generator, generate, filter, train and evaluate.
//!
//!     cargo run --example pipeline [-- <output dir>]

use std::path::{Path, PathBuf};

use qagen::pipeline::{report, PipelineConfig, Run};

fn main() -> qagen::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut config = PipelineConfig::load(&fixtures.join("pipeline.toml"))?;
    config.output_dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("qagen-example-run"));
    config.num_runs = 2;
    let mut run = Run::open(config)?;
    let aggregate = run.run_all(true)?;
    print!("{}", report(&run.dir)?);
    println!("F1 {aggregate}");
    Ok(())
}
