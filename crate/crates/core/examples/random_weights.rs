//! Writes a randomly initialized weights file for a network config, so
//! the CLI can run without a training pipeline:
//!
//! ```text
//! cargo run -p spikenet-core --example random_weights -- \
//!     configs/reference.cfg reference.suw [seed]
//! ```

use std::path::Path;
use std::process::ExitCode;

use spikenet_core::graph::{load_config, random_weights, write_weights};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (config, out, seed) = match args.as_slice() {
        [config, out] => (config, out, 0u64),
        [config, out, seed] => match seed.parse() {
            Ok(s) => (config, out, s),
            Err(_) => {
                eprintln!("bad seed '{seed}'");
                return ExitCode::from(2);
            }
        },
        _ => {
            eprintln!("usage: random_weights <config> <out.suw> [seed]");
            return ExitCode::from(2);
        }
    };
    let result = load_config(Path::new(config))
        .and_then(|graph| random_weights(&graph, seed))
        .and_then(|store| {
            write_weights(&store, Path::new(out))?;
            Ok(store.len())
        });
    match result {
        Ok(count) => {
            println!("wrote {out} ({count} records, seed {seed})");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
