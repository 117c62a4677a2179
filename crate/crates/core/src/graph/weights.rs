//! Named weight records, their binary container, random initialization
//! and inference-time normalization folding.
//!
//! Container layout, little-endian:
//!
//! ```text
//! magic "SUW1" | u32 record count | records...
//! record: u16 name len | name utf-8 | u8 fused | u8 ndim | ndim x u32 dims
//!         | product x f32 payload
//! ```
//!
//! Folding rewrites every (conv, normalizer) pair into per-step weight
//! records named `<site>.w.t<k>` / `<site>.b.t<k>`; the normalizer records
//! stay in the file flagged `fused` so a bound graph knows to skip them
//! and a second fold attempt fails loudly.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::conv::ConvLayer;
use crate::error::{Error, Result};
use crate::norm::{BatchNorm, StepBn};

use super::blocks::{ConvParams, NormOp};
use super::sites::{ConvSite, SiteNorm};
use super::{NetGraph, NodeKind};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"SUW1";

#[derive(Debug, Clone)]
pub struct WeightRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
    pub fused: bool,
}

impl WeightRecord {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Self {
        WeightRecord {
            name: name.into(),
            dims,
            data,
            fused: false,
        }
    }
}

/// Name-keyed record collection; iteration order is the sorted name order,
/// so files serialize deterministically.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    records: BTreeMap<String, WeightRecord>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    pub fn insert(&mut self, record: WeightRecord) -> Result<()> {
        let declared = record.dims.iter().map(|&d| d as u64).product::<u64>();
        if declared != record.data.len() as u64 {
            return Err(Error::Weights(format!(
                "record '{}': dims {:?} disagree with {} values",
                record.name,
                record.dims,
                record.data.len()
            )));
        }
        if self.records.contains_key(&record.name) {
            return Err(Error::Weights(format!(
                "duplicate record name '{}'",
                record.name
            )));
        }
        self.records.insert(record.name.clone(), record);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightRecord> {
        self.records.get(name)
    }

    /// Inserts, replacing any record of the same name.
    pub fn upsert(&mut self, record: WeightRecord) {
        self.records.insert(record.name.clone(), record);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &WeightRecord> {
        self.records.values()
    }

    pub fn any_fused(&self) -> bool {
        self.iter().any(|r| r.fused)
    }

    fn require(&self, name: &str) -> Result<&WeightRecord> {
        self.get(name)
            .ok_or_else(|| Error::Weights(format!("missing record '{name}'")))
    }
}

pub fn write_weights(store: &WeightStore, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for rec in store.iter() {
        let name = rec.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Weights(format!("record name too long: {}", rec.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rec.fused as u8, rec.dims.len() as u8])?;
        for d in &rec.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &rec.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<WeightStore> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated weights file".to_string()))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!(
            "bad weights magic {:?}, expected {:?}",
            magic, WEIGHTS_MAGIC
        )));
    }
    let mut count_buf = [0u8; 4];
    r.read_exact(&mut count_buf)
        .map_err(|_| Error::Format("truncated weights file".to_string()))?;
    let count = u32::from_le_bytes(count_buf);
    let mut store = WeightStore::new();
    for _ in 0..count {
        let mut len_buf = [0u8; 2];
        r.read_exact(&mut len_buf)
            .map_err(|_| Error::Format("truncated weight record".to_string()))?;
        let mut name = vec![0u8; u16::from_le_bytes(len_buf) as usize];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated weight record".to_string()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("weight record name is not utf-8".to_string()))?;
        let mut head = [0u8; 2];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("truncated weight record".to_string()))?;
        let (fused, ndim) = (head[0] != 0, head[1] as usize);
        if ndim == 0 || ndim > 4 {
            return Err(Error::Format(format!(
                "record '{name}': unsupported rank {ndim}"
            )));
        }
        let mut dims = vec![0u32; ndim];
        for d in dims.iter_mut() {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated weight record".to_string()))?;
            *d = u32::from_le_bytes(buf);
        }
        let total = dims.iter().map(|&d| d as u64).product::<u64>();
        let bytes = total
            .checked_mul(4)
            .and_then(|b| usize::try_from(b).ok())
            .ok_or_else(|| {
                Error::Format(format!("record '{name}': dims {dims:?} overflow"))
            })?;
        let raw = crate::tensor_file::read_payload(&mut r, bytes, "weight record")
            .map_err(|_| Error::Format(format!("truncated payload in record '{name}'")))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "record '{name}' holds non-finite value {bad}"
            )));
        }
        store.insert(WeightRecord {
            name,
            dims,
            data,
            fused,
        })?;
    }
    Ok(store)
}

/// Random parameters for every site of a graph: fan-in scaled uniform
/// conv weights, unit-ish normalizer statistics.
pub fn random_weights(graph: &NetGraph, seed: u64) -> Result<WeightStore> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (convs, norms) = graph.sites()?;
    let t = graph.t_steps;
    let mut store = WeightStore::new();
    for site in &convs {
        let fan_in = site.in_ch * site.k * site.k;
        let limit = 1.0 / (fan_in as f32).sqrt();
        let w: Vec<f32> = (0..site.weight_len())
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let b: Vec<f32> = (0..site.out_ch)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        store.insert(WeightRecord::new(
            format!("{}.w", site.name),
            vec![
                site.out_ch as u32,
                site.in_ch as u32,
                site.k as u32,
                site.k as u32,
            ],
            w,
        ))?;
        store.insert(WeightRecord::new(
            format!("{}.b", site.name),
            vec![site.out_ch as u32],
            b,
        ))?;
        match site.norm {
            SiteNorm::Step { .. } => {
                push_norm_records(&mut store, &mut rng, &format!("{}.bn", site.name), t, site.out_ch)?
            }
            SiteNorm::Plain => {
                push_norm_records(&mut store, &mut rng, &format!("{}.bn", site.name), 1, site.out_ch)?
            }
            SiteNorm::None => {}
        }
    }
    for site in &norms {
        push_norm_records(&mut store, &mut rng, &site.name, t, site.channels)?;
    }
    Ok(store)
}

fn push_norm_records(
    store: &mut WeightStore,
    rng: &mut StdRng,
    prefix: &str,
    t: usize,
    channels: usize,
) -> Result<()> {
    let groups = t * channels;
    let dims = if t == 1 {
        vec![channels as u32]
    } else {
        vec![t as u32, channels as u32]
    };
    // Small running variances scale membranes up toward the firing
    // threshold; plausible untrained statistics would otherwise starve
    // the deeper layers of spikes and leave nothing to exercise.
    let gamma: Vec<f32> = (0..groups).map(|_| rng.random_range(0.8..1.2)).collect();
    let beta: Vec<f32> = (0..groups).map(|_| rng.random_range(-0.1..0.3)).collect();
    let mean: Vec<f32> = (0..groups).map(|_| rng.random_range(-0.05..0.05)).collect();
    let var: Vec<f32> = (0..groups).map(|_| rng.random_range(0.005..0.05)).collect();
    for (suffix, data) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        store.insert(WeightRecord::new(
            format!("{prefix}.{suffix}"),
            dims.clone(),
            data,
        ))?;
    }
    Ok(())
}

fn conv_dims_ok(rec: &WeightRecord, site: &ConvSite) -> bool {
    rec.dims
        == [
            site.out_ch as u32,
            site.in_ch as u32,
            site.k as u32,
            site.k as u32,
        ]
}

/// Shared (single-set) convolution weights for a site; rejects folded
/// per-step records.
pub fn fetch_shared_conv(store: &WeightStore, site: &ConvSite) -> Result<ConvLayer> {
    let w = store.require(&format!("{}.w", site.name))?;
    let b = store.require(&format!("{}.b", site.name))?;
    if !conv_dims_ok(w, site) {
        return Err(Error::Weights(format!(
            "record '{}' has dims {:?}, expected ({}, {}, {}, {})",
            w.name, w.dims, site.out_ch, site.in_ch, site.k, site.k
        )));
    }
    if b.dims != [site.out_ch as u32] {
        return Err(Error::Weights(format!(
            "record '{}' has dims {:?}, expected ({},)",
            b.name, b.dims, site.out_ch
        )));
    }
    ConvLayer::new(
        site.in_ch,
        site.out_ch,
        site.k,
        site.k,
        site.stride,
        site.pad,
        w.data.clone(),
        b.data.clone(),
    )
}

/// Weights for a conv site: shared if `<name>.w` exists, per-step if the
/// folded `<name>.w.t<k>` records do.
pub fn fetch_conv_params(
    store: &WeightStore,
    site: &ConvSite,
    t_steps: usize,
) -> Result<ConvParams> {
    if store.contains(&format!("{}.w", site.name)) {
        return Ok(ConvParams::Shared(fetch_shared_conv(store, site)?));
    }
    if store.contains(&format!("{}.w.t0", site.name)) {
        let mut layers = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let w = store.require(&format!("{}.w.t{t}", site.name))?;
            let b = store.require(&format!("{}.b.t{t}", site.name))?;
            if !conv_dims_ok(w, site) || b.dims != [site.out_ch as u32] {
                return Err(Error::Weights(format!(
                    "folded records for '{}' have unexpected dims",
                    site.name
                )));
            }
            layers.push(ConvLayer::new(
                site.in_ch,
                site.out_ch,
                site.k,
                site.k,
                site.stride,
                site.pad,
                w.data.clone(),
                b.data.clone(),
            )?);
        }
        return Ok(ConvParams::PerStep(layers));
    }
    Err(Error::Weights(format!(
        "no weights for conv site '{}'",
        site.name
    )))
}

fn step_bn_from_records(
    store: &WeightStore,
    prefix: &str,
    channels: usize,
    n: u32,
    t_steps: usize,
) -> Result<StepBn> {
    let gamma = store.require(&format!("{prefix}.gamma"))?;
    let beta = store.require(&format!("{prefix}.beta"))?;
    let mean = store.require(&format!("{prefix}.mean"))?;
    let var = store.require(&format!("{prefix}.var"))?;
    let stored_t = match gamma.dims.as_slice() {
        [t, c] if *c as usize == channels => *t as usize,
        [c] if *c as usize == channels => 1,
        _ => {
            return Err(Error::Weights(format!(
                "record '{}' has dims {:?}, expected (T, {channels})",
                gamma.name, gamma.dims
            )))
        }
    };
    if stored_t < t_steps {
        return Err(Error::Weights(format!(
            "'{prefix}' stores {stored_t} time step(s) but the graph runs {t_steps}"
        )));
    }
    for rec in [beta, mean, var] {
        if rec.dims != gamma.dims {
            return Err(Error::Weights(format!(
                "record '{}' dims disagree with '{}'",
                rec.name, gamma.name
            )));
        }
    }
    if let Some(bad) = var.data.iter().find(|v| **v < 0.0) {
        return Err(Error::Validation(format!(
            "record '{}' holds negative variance {bad}",
            var.name
        )));
    }
    let take = t_steps * channels;
    let mut bn = StepBn::new(t_steps, channels, n)?;
    bn.gamma = gamma.data[..take].to_vec();
    bn.beta = beta.data[..take].to_vec();
    bn.run_mean = mean.data[..take].to_vec();
    bn.run_var = var.data[..take].to_vec();
    bn.stats_ready = true;
    Ok(bn)
}

fn batch_norm_from_records(store: &WeightStore, prefix: &str, channels: usize) -> Result<BatchNorm> {
    let gamma = store.require(&format!("{prefix}.gamma"))?;
    let beta = store.require(&format!("{prefix}.beta"))?;
    let mean = store.require(&format!("{prefix}.mean"))?;
    let var = store.require(&format!("{prefix}.var"))?;
    for rec in [gamma, beta, mean, var] {
        if rec.dims != [channels as u32] {
            return Err(Error::Weights(format!(
                "record '{}' has dims {:?}, expected ({channels},)",
                rec.name, rec.dims
            )));
        }
    }
    if let Some(bad) = var.data.iter().find(|v| **v < 0.0) {
        return Err(Error::Validation(format!(
            "record '{}' holds negative variance {bad}",
            var.name
        )));
    }
    let mut bn = BatchNorm::new(channels)?;
    bn.gamma = gamma.data.clone();
    bn.beta = beta.data.clone();
    bn.run_mean = mean.data.clone();
    bn.run_var = var.data.clone();
    bn.stats_ready = true;
    Ok(bn)
}

/// Normalizer attached to a conv site, or identity once folded.
pub fn fetch_site_norm(store: &WeightStore, site: &ConvSite, t_steps: usize) -> Result<NormOp> {
    match site.norm {
        SiteNorm::None => Ok(NormOp::Identity),
        SiteNorm::Step { n } => {
            let prefix = format!("{}.bn", site.name);
            if store.require(&format!("{prefix}.gamma"))?.fused {
                return Ok(NormOp::Identity);
            }
            Ok(NormOp::Step(step_bn_from_records(
                store,
                &prefix,
                site.out_ch,
                n,
                t_steps,
            )?))
        }
        SiteNorm::Plain => {
            let prefix = format!("{}.bn", site.name);
            if store.require(&format!("{prefix}.gamma"))?.fused {
                return Ok(NormOp::Identity);
            }
            Ok(NormOp::Plain(batch_norm_from_records(
                store,
                &prefix,
                site.out_ch,
            )?))
        }
    }
}

/// Standalone normalization node (SEBN graph node).
pub fn fetch_standalone_norm(
    store: &WeightStore,
    id: &str,
    channels: usize,
    n: u32,
    t_steps: usize,
) -> Result<NormOp> {
    if store.require(&format!("{id}.gamma"))?.fused {
        return Ok(NormOp::Identity);
    }
    Ok(NormOp::Step(step_bn_from_records(
        store, id, channels, n, t_steps,
    )?))
}

/// Folds every (convolution, normalizer) pair of the graph into per-step
/// convolution weights. Fails if the store already holds folded records.
pub fn fuse_weights(graph: &NetGraph, store: &WeightStore) -> Result<WeightStore> {
    if store.any_fused() {
        return Err(Error::Weights(
            "weights are already fused".to_string(),
        ));
    }
    let (convs, _) = graph.sites()?;
    let t_steps = graph.t_steps;
    let mut out = WeightStore::new();
    let mut handled: HashSet<String> = HashSet::new();

    let fold_step = |out: &mut WeightStore,
                         handled: &mut HashSet<String>,
                         site: &ConvSite,
                         bn_prefix: &str,
                         n: u32|
     -> Result<()> {
        let w = store.require(&format!("{}.w", site.name))?;
        let b = store.require(&format!("{}.b", site.name))?;
        if !conv_dims_ok(w, site) {
            return Err(Error::Weights(format!(
                "record '{}' dims {:?} do not match its site",
                w.name, w.dims
            )));
        }
        let bn = step_bn_from_records(store, bn_prefix, site.out_ch, n, t_steps)?;
        let fused = bn.fuse_into_conv(&w.data, &b.data)?;
        for (t, (wt, bt)) in fused.per_step.iter().enumerate() {
            let mut rec = WeightRecord::new(
                format!("{}.w.t{t}", site.name),
                w.dims.clone(),
                wt.clone(),
            );
            rec.fused = true;
            out.insert(rec)?;
            let mut rec = WeightRecord::new(
                format!("{}.b.t{t}", site.name),
                b.dims.clone(),
                bt.clone(),
            );
            rec.fused = true;
            out.insert(rec)?;
        }
        handled.insert(w.name.clone());
        handled.insert(b.name.clone());
        for suffix in ["gamma", "beta", "mean", "var"] {
            let name = format!("{bn_prefix}.{suffix}");
            let mut rec = store.require(&name)?.clone();
            rec.fused = true;
            out.insert(rec)?;
            handled.insert(name);
        }
        Ok(())
    };

    for site in &convs {
        match site.norm {
            SiteNorm::Step { n } => {
                fold_step(&mut out, &mut handled, site, &format!("{}.bn", site.name), n)?
            }
            SiteNorm::Plain => {
                let w = store.require(&format!("{}.w", site.name))?;
                let b = store.require(&format!("{}.b", site.name))?;
                let prefix = format!("{}.bn", site.name);
                let bn = batch_norm_from_records(store, &prefix, site.out_ch)?;
                let (wf, bf) = bn.fuse_into_conv(&w.data, &b.data)?;
                let mut rec = WeightRecord::new(w.name.clone(), w.dims.clone(), wf);
                rec.fused = true;
                out.insert(rec)?;
                let mut rec = WeightRecord::new(b.name.clone(), b.dims.clone(), bf);
                rec.fused = true;
                out.insert(rec)?;
                handled.insert(w.name.clone());
                handled.insert(b.name.clone());
                for suffix in ["gamma", "beta", "mean", "var"] {
                    let name = format!("{prefix}.{suffix}");
                    let mut rec = store.require(&name)?.clone();
                    rec.fused = true;
                    out.insert(rec)?;
                    handled.insert(name);
                }
            }
            SiteNorm::None => {}
        }
    }

    // Standalone CONV nodes whose sole consumer is a SEBN node fold the
    // same way; a conv with other consumers keeps shared weights.
    let channels = graph.infer_channels()?;
    let mut consumer_count = vec![0usize; graph.nodes.len()];
    for node in &graph.nodes {
        for &src in &node.inputs {
            consumer_count[src] += 1;
        }
    }
    for node in graph.nodes.iter() {
        let NodeKind::SeBn { n } = node.kind else {
            continue;
        };
        let src = node.inputs[0];
        let NodeKind::Conv {
            out_ch,
            k,
            stride,
            pad,
        } = graph.nodes[src].kind
        else {
            continue;
        };
        if consumer_count[src] != 1 {
            continue;
        }
        let in_ch = channels[graph.nodes[src].inputs[0]];
        let site = ConvSite {
            name: graph.nodes[src].id.clone(),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            norm: SiteNorm::None,
        };
        fold_step(&mut out, &mut handled, &site, &node.id, n)?;
    }

    for rec in store.iter() {
        if !handled.contains(&rec.name) {
            out.insert(rec.clone())?;
        }
    }
    Ok(out)
}
