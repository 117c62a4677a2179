//! Plain-text network configs.
//!
//! Line grammar (`#` starts a comment, blank lines are skipped):
//!
//! ```text
//! tsteps=<T>
//! node <id> <KIND> [key=value ...] [inputs=<id>,<id>,...]
//! ```
//!
//! Kinds and their keys:
//!
//! | kind       | keys (defaults)                                |
//! |------------|------------------------------------------------|
//! | ENCODER    | out_ch, k=3, stride=1, pad=k/2                 |
//! | DENOISE    | downsample=none|maxpool2, enable=1             |
//! | CONV       | out_ch, k=3, stride=1, pad=k/2                 |
//! | SEBN       | n=1                                            |
//! | IF         | vth=1.0                                        |
//! | SUBLOCK1   | out_ch                                         |
//! | SUBLOCK2   | out_ch                                         |
//! | SPIKESPP   | mid_ch, out_ch, pool_k=5                       |
//! | MAXPOOL    | k=2, stride=k                                  |
//! | UPSAMPLE   | factor=2                                       |
//! | CONCAT     | (none)                                         |
//! | ADD        | (none)                                         |
//! | DETECTHEAD | classes                                        |

use std::collections::HashMap;
use std::path::Path;

use crate::denoise::Downsample;
use crate::error::{Error, Result};
use crate::graph::{NetGraph, NodeKind};

pub fn load_config(path: &Path) -> Result<NetGraph> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<NetGraph> {
    let mut t_steps: Option<usize> = None;
    let mut raw = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
        if let Some(rest) = line.strip_prefix("tsteps=") {
            if t_steps.is_some() {
                return Err(at("tsteps given twice".to_string()));
            }
            let t = rest
                .trim()
                .parse::<usize>()
                .map_err(|_| at(format!("bad tsteps value '{rest}'")))?;
            t_steps = Some(t);
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("node") => {}
            Some(other) => return Err(at(format!("expected 'node' or 'tsteps=', got '{other}'"))),
            None => continue,
        }
        let id = tokens
            .next()
            .ok_or_else(|| at("node is missing an id".to_string()))?
            .to_string();
        let kind_token = tokens
            .next()
            .ok_or_else(|| at(format!("node '{id}' is missing a kind")))?;
        let mut keys: HashMap<&str, &str> = HashMap::new();
        let mut inputs: Vec<String> = Vec::new();
        for tok in tokens {
            let (key, value) = tok
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got '{tok}'")))?;
            if key == "inputs" {
                inputs = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
            } else if keys.insert(key, value).is_some() {
                return Err(at(format!("key '{key}' given twice")));
            }
        }
        let kind = parse_kind(kind_token, &keys)
            .map_err(|e| at(format!("node '{id}': {e}")))?;
        raw.push((id, kind, inputs));
    }
    let t_steps = t_steps.ok_or_else(|| Error::Config("config is missing tsteps=".to_string()))?;
    NetGraph::new(t_steps, raw)
}

fn parse_kind(token: &str, keys: &HashMap<&str, &str>) -> std::result::Result<NodeKind, String> {
    let mut seen: Vec<&str> = Vec::new();
    let mut required = |name: &'static str| -> std::result::Result<usize, String> {
        seen.push(name);
        keys.get(name)
            .ok_or_else(|| format!("missing key '{name}'"))?
            .parse::<usize>()
            .map_err(|_| format!("bad value for '{name}'"))
    };
    macro_rules! optional {
        ($name:literal, $default:expr, $ty:ty) => {{
            seen.push($name);
            match keys.get($name) {
                Some(v) => v
                    .parse::<$ty>()
                    .map_err(|_| format!("bad value for '{}'", $name))?,
                None => $default,
            }
        }};
    }
    let kind = match token {
        "ENCODER" => {
            let out_ch = required("out_ch")?;
            let k = optional!("k", 3, usize);
            let stride = optional!("stride", 1, usize);
            let pad = optional!("pad", k / 2, usize);
            NodeKind::Encoder {
                out_ch,
                k,
                stride,
                pad,
            }
        }
        "CONV" => {
            let out_ch = required("out_ch")?;
            let k = optional!("k", 3, usize);
            let stride = optional!("stride", 1, usize);
            let pad = optional!("pad", k / 2, usize);
            NodeKind::Conv {
                out_ch,
                k,
                stride,
                pad,
            }
        }
        "DENOISE" => {
            seen.push("downsample");
            let downsample = match keys.get("downsample").copied().unwrap_or("none") {
                "none" => Downsample::None,
                "maxpool2" => Downsample::MaxPool2,
                other => return Err(format!("unknown downsample '{other}'")),
            };
            let enabled = optional!("enable", 1, usize) != 0;
            NodeKind::Denoise {
                downsample,
                enabled,
            }
        }
        "SEBN" => {
            let n = optional!("n", 1, u32);
            if n == 0 {
                return Err("n must be >= 1".to_string());
            }
            NodeKind::SeBn { n }
        }
        "IF" => {
            let v_th = optional!("vth", 1.0, f32);
            NodeKind::If { v_th }
        }
        "SUBLOCK1" => NodeKind::SuBlock1 {
            out_ch: required("out_ch")?,
        },
        "SUBLOCK2" => NodeKind::SuBlock2 {
            out_ch: required("out_ch")?,
        },
        "SPIKESPP" => {
            let mid_ch = required("mid_ch")?;
            let out_ch = required("out_ch")?;
            let pool_k = optional!("pool_k", 5, usize);
            NodeKind::SpikeSpp {
                mid_ch,
                out_ch,
                pool_k,
            }
        }
        "MAXPOOL" => {
            let k = optional!("k", 2, usize);
            let stride = optional!("stride", k, usize);
            if k == 0 || stride == 0 {
                return Err("k and stride must be >= 1".to_string());
            }
            NodeKind::MaxPool { k, stride }
        }
        "UPSAMPLE" => {
            let factor = optional!("factor", 2, usize);
            if factor == 0 {
                return Err("factor must be >= 1".to_string());
            }
            NodeKind::Upsample { factor }
        }
        "CONCAT" => NodeKind::Concat,
        "ADD" => NodeKind::Add,
        "DETECTHEAD" => NodeKind::DetectHead {
            classes: required("classes")?,
        },
        other => return Err(format!("unknown node kind '{other}'")),
    };
    for key in keys.keys() {
        if !seen.contains(key) {
            return Err(format!("unknown key '{key}' for {token}"));
        }
    }
    Ok(kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "
# toy net
tsteps=2
node enc ENCODER out_ch=4
node dn DENOISE downsample=maxpool2 inputs=enc
node b1 SUBLOCK1 out_ch=8 inputs=dn
node head DETECTHEAD classes=2 inputs=b1,b1
";

    #[test]
    fn parses_a_small_config() {
        let g = parse_config(SMALL).unwrap();
        assert_eq!(g.t_steps, 2);
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.nodes[2].inputs, vec![1]);
    }

    #[test]
    fn missing_tsteps_rejected() {
        let err = parse_config("node enc ENCODER out_ch=4\n").unwrap_err();
        assert!(err.to_string().contains("tsteps"));
    }

    #[test]
    fn unknown_kind_rejected() {
        let err = parse_config("tsteps=1\nnode x FOO inputs=\n").unwrap_err();
        assert!(err.to_string().contains("unknown node kind"));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config("tsteps=1\nnode enc ENCODER out_ch=4 bogus=1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn unresolved_input_rejected() {
        let err =
            parse_config("tsteps=1\nnode enc ENCODER out_ch=4\nnode d DENOISE inputs=ghost\n")
                .unwrap_err();
        assert!(err.to_string().contains("unknown input"));
    }

    #[test]
    fn cycle_rejected() {
        let text = "tsteps=1
node enc ENCODER out_ch=4
node a MAXPOOL inputs=b
node b MAXPOOL inputs=a
";
        let err = parse_config(text).unwrap_err();
        assert!(err.to_string().contains("cycle"));
    }

    #[test]
    fn two_encoders_rejected() {
        let text = "tsteps=1\nnode a ENCODER out_ch=4\nnode b ENCODER out_ch=4\n";
        let err = parse_config(text).unwrap_err();
        assert!(err.to_string().contains("exactly one ENCODER"));
    }

    #[test]
    fn add_pushes_branch_count_into_feeders() {
        let text = "tsteps=2
node enc ENCODER out_ch=4
node c1 CONV out_ch=4 inputs=enc
node bn1 SEBN inputs=c1
node c2 CONV out_ch=4 inputs=enc
node bn2 SEBN inputs=c2
node sum ADD inputs=bn1,bn2
node fire IF inputs=sum
";
        let g = parse_config(text).unwrap();
        for id in ["bn1", "bn2"] {
            let idx = g.node_index(id).unwrap();
            assert_eq!(g.nodes[idx].kind, NodeKind::SeBn { n: 2 });
        }
    }

    #[test]
    fn head_requires_exactly_two_scales() {
        let base = "tsteps=1\nnode enc ENCODER out_ch=4\nnode b SUBLOCK1 out_ch=8 inputs=enc\n";
        for inputs in ["b", "b,b,b"] {
            let text = format!("{base}node h DETECTHEAD classes=2 inputs={inputs}\n");
            let err = parse_config(&text).unwrap_err();
            assert!(err.to_string().contains("input"), "{err}");
        }
    }

    #[test]
    fn dtype_mismatch_rejected() {
        // DENOISE wants spikes but CONV produces floats.
        let text = "tsteps=1
node enc ENCODER out_ch=4
node c CONV out_ch=4 inputs=enc
node d DENOISE inputs=c
";
        let err = parse_config(text).unwrap_err();
        assert!(err.to_string().contains("expects"), "{err}");
    }

    #[test]
    fn odd_split_rejected() {
        let text = "tsteps=1\nnode enc ENCODER out_ch=4\nnode b SUBLOCK1 out_ch=7 inputs=enc\n";
        let err = parse_config(text).unwrap_err();
        assert!(err.to_string().contains("even out_ch"));
    }
}
