//! Line-oriented text format for reaction networks.
//!
//! ```text
//! # comments run to end of line
//! species H2 O2 H2O
//! 2 H2 + 1 O2 <-> 2 H2O : kf=1, kb=1
//! 0 <-> 1 H2 : kf=0.5, kb=2
//! ```
//!
//! A side is `0` (the empty complex) or `+`-separated terms; each term is an
//! optional integer coefficient (default 1) followed by a species name.

use super::ReactionNetwork;
use crate::error::Error;
use crate::Result;

pub fn parse_network(text: &str) -> Result<ReactionNetwork> {
    let mut species: Vec<String> = Vec::new();
    let mut alpha: Vec<Vec<u32>> = Vec::new();
    let mut beta: Vec<Vec<u32>> = Vec::new();
    let mut k_fw: Vec<f64> = Vec::new();
    let mut k_bw: Vec<f64> = Vec::new();

    for (line_idx, raw) in text.lines().enumerate() {
        let line_no = line_idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };

        if let Some(rest) = line.strip_prefix("species") {
            if !rest.starts_with(char::is_whitespace) && !rest.is_empty() {
                return Err(err(format!("unrecognized directive {line:?}")));
            }
            for name in rest.split_whitespace() {
                if species.iter().any(|s| s == name) {
                    return Err(err(format!("duplicate species {name}")));
                }
                species.push(name.to_string());
            }
            continue;
        }

        // Reaction line: side <-> side : kf=..., kb=...
        let (reaction_part, rate_part) = line
            .split_once(':')
            .ok_or_else(|| err("missing ': kf=..., kb=...' rate section".into()))?;
        let (lhs, rhs) = reaction_part
            .split_once("<->")
            .ok_or_else(|| err("missing '<->' between reaction sides".into()))?;
        let a = parse_side(lhs, &species).map_err(|m| err(m))?;
        let b = parse_side(rhs, &species).map_err(|m| err(m))?;
        if a == b {
            return Err(err("reaction sides are identical".into()));
        }
        let (fw, bw) = parse_rates(rate_part).map_err(|m| err(m))?;
        alpha.push(a);
        beta.push(b);
        k_fw.push(fw);
        k_bw.push(bw);
    }

    if species.is_empty() {
        return Err(Error::Parse { line: 1, msg: "no species declared".into() });
    }
    ReactionNetwork::new(species, alpha, beta, k_fw, k_bw)
}

fn parse_side(text: &str, species: &[String]) -> std::result::Result<Vec<u32>, String> {
    let text = text.trim();
    let mut coeffs = vec![0u32; species.len()];
    if text == "0" {
        return Ok(coeffs);
    }
    if text.is_empty() {
        return Err("empty reaction side (use '0' for the empty complex)".into());
    }
    for term in text.split('+') {
        let tokens: Vec<&str> = term.split_whitespace().collect();
        let (count, name) = match tokens.as_slice() {
            [name] => (1u32, *name),
            [count, name] => {
                let c: u32 = count
                    .parse()
                    .map_err(|_| format!("invalid coefficient {count:?}"))?;
                (c, *name)
            }
            _ => return Err(format!("malformed term {term:?}")),
        };
        let idx = species
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| format!("unknown species {name}"))?;
        coeffs[idx] += count;
    }
    Ok(coeffs)
}

fn parse_rates(text: &str) -> std::result::Result<(f64, f64), String> {
    let mut fw = None;
    let mut bw = None;
    for piece in text.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        let (key, value) = piece
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {piece:?}"))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| format!("invalid rate {:?}", value.trim()))?;
        if !value.is_finite() || value < 0.0 {
            return Err(format!("rate must be finite and nonnegative, got {value}"));
        }
        match key.trim() {
            "kf" => fw = Some(value),
            "kb" => bw = Some(value),
            other => return Err(format!("unknown rate key {other:?}")),
        }
    }
    match (fw, bw) {
        (Some(f), Some(b)) => {
            if f == 0.0 && b == 0.0 {
                Err("kf and kb cannot both be zero".into())
            } else {
                Ok((f, b))
            }
        }
        _ => Err("both kf and kb must be given".into()),
    }
}

/// Canonical text form; `parse_network(serialize_network(n)) == n`.
pub fn serialize_network(net: &ReactionNetwork) -> String {
    let mut out = String::new();
    out.push_str("species");
    for name in net.species_names() {
        out.push(' ');
        out.push_str(name);
    }
    out.push('\n');
    for r in 0..net.reaction_count() {
        out.push_str(&format_side(net.alpha(r), net.species_names()));
        out.push_str(" <-> ");
        out.push_str(&format_side(net.beta(r), net.species_names()));
        out.push_str(&format!(" : kf={:?}, kb={:?}\n", net.k_fw(r), net.k_bw(r)));
    }
    out
}

fn format_side(coeffs: &[u32], names: &[String]) -> String {
    let terms: Vec<String> = coeffs
        .iter()
        .zip(names)
        .filter(|(&c, _)| c > 0)
        .map(|(&c, n)| format!("{c} {n}"))
        .collect();
    if terms.is_empty() {
        "0".to_string()
    } else {
        terms.join(" + ")
    }
}
