//! Verb implementations.

use std::fs;
use std::path::Path;

use spikenet_core::denoise::{spike_denoise, DenoiseConfig, Downsample};
use spikenet_core::error::{Error, Result};
use spikenet_core::gradcheck::{self, GradCheckSettings};
use spikenet_core::graph::{
    fuse_weights, load_config, read_weights, write_weights, BoundGraph, ForwardOptions, NetGraph,
};
use spikenet_core::profile::{merge_reports, profile as profile_one, render_json, render_text};
use spikenet_core::tensor_file::write_tensor;
use spikenet_core::{pgm, FloatTensor};

use crate::load_image;

fn load_graph(config: &Path, tsteps: Option<usize>) -> Result<NetGraph> {
    let graph = load_config(config)
        .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    match tsteps {
        Some(t) => graph.with_t_steps(t),
        None => Ok(graph),
    }
}

fn load_store(weights: &Path) -> Result<spikenet_core::graph::WeightStore> {
    read_weights(weights).map_err(|e| Error::Weights(format!("{}: {e}", weights.display())))
}

fn bind(config: &Path, weights: &Path, tsteps: Option<usize>) -> Result<BoundGraph> {
    let graph = load_graph(config, tsteps)?;
    let store = load_store(weights)?;
    BoundGraph::bind(&graph, &store)
}

pub fn run(
    config: &Path,
    weights: &Path,
    input: &Path,
    out_dir: &Path,
    tsteps: Option<usize>,
    trace: bool,
) -> Result<()> {
    let bound = bind(config, weights, tsteps)?;
    let image = load_image(input)?;
    warn_if_out_of_range(&image);
    fs::create_dir_all(out_dir)?;
    let opts = ForwardOptions::default();
    let (outputs, trace_data) = bound.forward(&image, &opts)?;
    for (i, tensor) in outputs.iter().enumerate() {
        let path = crate::out_path(out_dir, &format!("pred{i}.sut"));
        write_tensor(tensor, &path)?;
        println!("wrote {} {}", path.display(), tensor.shape());
    }
    if trace_data.clamped_pixels > 0 {
        eprintln!(
            "warning: clamped {} input pixel(s) into [0, 1]",
            trace_data.clamped_pixels
        );
    }
    if trace {
        for site in &trace_data.if_sites {
            let steps: Vec<String> = site.rates.iter().map(|r| format!("{r:.3}")).collect();
            println!(
                "rate {:<28} overall {:.3}  per-step [{}]",
                site.name,
                site.overall,
                steps.join(", ")
            );
        }
    }
    Ok(())
}

fn warn_if_out_of_range(image: &FloatTensor) {
    let bad = image
        .data()
        .iter()
        .filter(|v| !(0.0..=1.0).contains(*v))
        .count();
    if bad > 0 {
        eprintln!("warning: {bad} input value(s) outside [0, 1] will be clamped");
    }
}

pub fn denoise(input: &Path, output: &Path, downsample: bool) -> Result<()> {
    let plane = pgm::from_pgm(input)?;
    let cfg = DenoiseConfig {
        downsample: if downsample {
            Downsample::MaxPool2
        } else {
            Downsample::None
        },
    };
    let cleaned = spike_denoise(&plane, &cfg)?;
    pgm::to_pgm(&cleaned, 0, 0, output)?;
    Ok(())
}

pub fn fuse(config: &Path, weights_in: &Path, weights_out: &Path) -> Result<()> {
    let graph = load_graph(config, None)?;
    let store = load_store(weights_in)?;
    let folded = fuse_weights(&graph, &store)?;
    write_weights(&folded, weights_out)?;
    println!(
        "wrote {} ({} records)",
        weights_out.display(),
        folded.len()
    );
    Ok(())
}

pub fn profile(
    config: &Path,
    weights: &Path,
    input: &Path,
    tsteps: Option<usize>,
    json: bool,
) -> Result<()> {
    let bound = bind(config, weights, tsteps)?;
    let mut reports = Vec::new();
    if input.is_dir() {
        let mut paths: Vec<_> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("sut"))
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!(
                "no .pgm or .sut inputs in {}",
                input.display()
            )));
        }
        for path in paths {
            reports.push(profile_one(&bound, &load_image(&path)?)?);
        }
    } else {
        reports.push(profile_one(&bound, &load_image(input)?)?);
    }
    let merged = merge_reports(&reports)?;
    if json {
        println!("{}", render_json(&merged)?);
    } else {
        print!("{}", render_text(&merged));
    }
    Ok(())
}

pub fn gradcheck(seed: u64, instances: usize, json: bool) -> Result<()> {
    let report = gradcheck::run(&GradCheckSettings {
        seed,
        instances,
        tolerance: 1e-3,
    })?;
    if json {
        println!("{}", report.render_json()?);
    } else {
        print!("{}", report.render_text());
    }
    if report.passed {
        Ok(())
    } else {
        Err(Error::Internal(
            "analytic gradients disagree with finite differences".to_string(),
        ))
    }
}

pub fn dump_features(
    config: &Path,
    weights: &Path,
    input: &Path,
    out_dir: &Path,
    tsteps: Option<usize>,
    limit: usize,
) -> Result<()> {
    let bound = bind(config, weights, tsteps)?;
    let image = load_image(input)?;
    fs::create_dir_all(out_dir)?;
    let opts = ForwardOptions {
        retain_features: true,
        ..ForwardOptions::default()
    };
    let (_, trace) = bound.forward(&image, &opts)?;
    let mut written = 0usize;
    for dump in &trace.features {
        let shape = dump.spikes.shape();
        let mut remaining = limit;
        'node: for t in 0..shape.t {
            for c in 0..shape.c {
                if remaining == 0 {
                    break 'node;
                }
                let path =
                    crate::out_path(out_dir, &format!("{}_t{}_c{}.pgm", dump.name, t, c));
                pgm::to_pgm(&dump.spikes, t, c, &path)?;
                remaining -= 1;
                written += 1;
            }
        }
    }
    println!("wrote {written} feature map(s) to {}", out_dir.display());
    Ok(())
}
