//! Writes the synthetic DRIVE-layout fixture used by the integration tests.
//!
//! `cargo run --release --example make_fixture -- [out_dir] [size] [seed]`

use std::path::PathBuf;

use vesselnet::data::synthetic::synthetic_dataset;
use vesselnet::data::{save_sample, Split};

pub const FIXTURE_SIZE: usize = 64;
pub const FIXTURE_SEED: u64 = 2016;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/drive_mini")
    });
    let size = args
        .next()
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(FIXTURE_SIZE);
    let seed = args
        .next()
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(FIXTURE_SEED);
    let (train, test) = synthetic_dataset(size, seed);
    for s in &train {
        save_sample(&out, Split::Training, s, false)?;
    }
    for s in &test {
        save_sample(&out, Split::Test, s, false)?;
    }
    println!(
        "wrote {} training and {} test samples ({size}x{size}) to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}
