//! Command-line front end.
//!
//! Verbs: run, denoise, fuse, profile, gradcheck, dump-features.
//! Exit codes: 0 success, 1 internal error, 2 usage or input error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use spikenet_core::error::Error;

mod args;
mod commands;

use args::Parsed;

const USAGE: &str = "\
usage: spikenet <verb> [options]

verbs:
  run           --config <cfg> --weights <suw> --input <pgm|sut> --out <dir>
                [--tsteps <T>] [--trace]
                  run the network and write raw prediction tensors
  denoise       --input <pgm> --output <pgm> [--downsample]
                  clean a binary plane (fill holes, drop isolated pixels)
  fuse          --config <cfg> --weights-in <suw> --weights-out <suw>
                  fold normalization into per-step conv weights
  profile       --config <cfg> --weights <suw> --input <pgm|sut|dir>
                [--tsteps <T>] [--json]
                  account FLOPs, SOPs, parameters and energy
  gradcheck     [--seed <u64>] [--instances <n>] [--json]
                  verify analytic gradients against finite differences
  dump-features --config <cfg> --weights <suw> --input <pgm|sut> --out <dir>
                [--tsteps <T>] [--limit <n>]
                  write spike feature maps as PGM images

Images: binary P5 PGM (grayscale, replicated to 3 channels) or an F32
tensor file with 1 or 3 channels.
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            if matches!(err, Error::Internal(_)) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn dispatch(args: &[String]) -> Result<(), Error> {
    let Some(verb) = args.first() else {
        eprint!("{USAGE}");
        return Err(Error::Config("missing verb".to_string()));
    };
    let parsed = Parsed::new(&args[1..])?;
    match verb.as_str() {
        "run" => {
            let config = parsed.path("config")?;
            let weights = parsed.path("weights")?;
            let input = parsed.path("input")?;
            let out = parsed.path("out")?;
            let tsteps = parsed.usize_opt("tsteps")?;
            let trace = parsed.flag("trace");
            parsed.finish()?;
            commands::run(&config, &weights, &input, &out, tsteps, trace)
        }
        "denoise" => {
            let input = parsed.path("input")?;
            let output = parsed.path("output")?;
            let downsample = parsed.flag("downsample");
            parsed.finish()?;
            commands::denoise(&input, &output, downsample)
        }
        "fuse" => {
            let config = parsed.path("config")?;
            let weights_in = parsed.path("weights-in")?;
            let weights_out = parsed.path("weights-out")?;
            parsed.finish()?;
            commands::fuse(&config, &weights_in, &weights_out)
        }
        "profile" => {
            let config = parsed.path("config")?;
            let weights = parsed.path("weights")?;
            let input = parsed.path("input")?;
            let tsteps = parsed.usize_opt("tsteps")?;
            let json = parsed.flag("json");
            parsed.finish()?;
            commands::profile(&config, &weights, &input, tsteps, json)
        }
        "gradcheck" => {
            let seed = parsed.u64_opt("seed")?.unwrap_or(0);
            let instances = parsed.usize_opt("instances")?.unwrap_or(20);
            let json = parsed.flag("json");
            parsed.finish()?;
            commands::gradcheck(seed, instances, json)
        }
        "dump-features" => {
            let config = parsed.path("config")?;
            let weights = parsed.path("weights")?;
            let input = parsed.path("input")?;
            let out = parsed.path("out")?;
            let tsteps = parsed.usize_opt("tsteps")?;
            let limit = parsed.usize_opt("limit")?.unwrap_or(8);
            parsed.finish()?;
            commands::dump_features(&config, &weights, &input, &out, tsteps, limit)
        }
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            Ok(())
        }
        other => {
            eprint!("{USAGE}");
            Err(Error::Config(format!("unknown verb '{other}'")))
        }
    }
}

/// Loads a network input image: PGM grayscale replicated to 3 channels,
/// or an F32 tensor file with 1 or 3 channels.
pub(crate) fn load_image(path: &Path) -> Result<spikenet_core::FloatTensor, Error> {
    use spikenet_core::tensor::{FloatTensor, Shape, Tensor};
    let is_pgm = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("pgm"))
        .unwrap_or(false);
    let gray = if is_pgm {
        spikenet_core::pgm::from_pgm_gray(path)?
    } else {
        match spikenet_core::tensor_file::read_tensor(path)? {
            Tensor::Float(f) => f,
            Tensor::Spike(_) => {
                return Err(Error::Format(format!(
                    "{} holds spikes; network input must be an F32 image",
                    path.display()
                )))
            }
        }
    };
    let shape = gray.shape();
    if shape.t != 1 {
        return Err(Error::Shape(format!(
            "input image must have t = 1, got {shape}"
        )));
    }
    match shape.c {
        3 => Ok(gray),
        1 => {
            let mut data = Vec::with_capacity(shape.len() * 3);
            for _ in 0..3 {
                data.extend_from_slice(gray.data());
            }
            Ok(FloatTensor::from_vec(
                Shape::new(1, 3, shape.h, shape.w)?,
                data,
            )?)
        }
        c => Err(Error::Shape(format!(
            "input image must have 1 or 3 channels, got {c}"
        ))),
    }
}

pub(crate) fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
