//! Parsing of `--source`, `--distortion` and grid flags.

use anyhow::{anyhow, bail, Context, Result};
use rdp_core::baselines::{discretize_gaussian, GaussianSpec};
use rdp_core::io;
use rdp_core::prob::{self, CostMatrix, Distribution};

/// `key=value,key=value` after an optional `kind:` prefix.
fn fields(spec: &str) -> Result<Vec<(String, String)>> {
    spec.split(',')
        .filter(|s| !s.is_empty())
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("expected key=value, got '{kv}'"))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn number(fs: &[(String, String)], key: &str) -> Result<f64> {
    let (_, v) = fs
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| anyhow!("missing '{key}'"))?;
    v.parse::<f64>()
        .with_context(|| format!("'{key}' is not a number: '{v}'"))
}

pub fn parse_source(spec: &str) -> Result<Distribution> {
    if let Some(path) = spec.strip_prefix("file=") {
        return io::load_distribution(path).with_context(|| format!("reading source file {path}"));
    }
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| anyhow!("source must be binary:..., gaussian:... or file=<path>"))?;
    let fs = fields(rest)?;
    match kind {
        "binary" => Ok(Distribution::bernoulli(number(&fs, "p")?)?),
        "gaussian" => {
            let g = GaussianSpec::new(
                number(&fs, "mu")?,
                number(&fs, "sigma")?,
                number(&fs, "S")?,
                number(&fs, "delta")?,
            )?;
            Ok(discretize_gaussian(&g)?)
        }
        other => bail!("unknown source kind '{other}'"),
    }
}

/// Cost on the source's own support.
pub fn parse_cost(spec: &str, p: &Distribution) -> Result<CostMatrix> {
    let n = p.len();
    let c = match spec {
        "hamming" => prob::hamming_matrix(n, n),
        "mse" => prob::squared_error_matrix(p.support(), p.support()),
        _ => {
            let path = spec
                .strip_prefix("file=")
                .ok_or_else(|| anyhow!("distortion must be hamming, mse or file=<path>"))?;
            io::load_cost(path).with_context(|| format!("reading cost file {path}"))?
        }
    };
    if c.rows() != n {
        bail!("cost matrix has {} rows but the source has {n} symbols", c.rows());
    }
    Ok(c)
}

/// `start:stop:count`, endpoints included.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [a, b, k] = parts[..] else {
        bail!("grid must be start:stop:count, got '{spec}'");
    };
    let a: f64 = a.parse().with_context(|| format!("bad grid start '{a}'"))?;
    let b: f64 = b.parse().with_context(|| format!("bad grid stop '{b}'"))?;
    let k: usize = k.parse().with_context(|| format!("bad grid count '{k}'"))?;
    if k == 0 || !a.is_finite() || !b.is_finite() {
        bail!("grid '{spec}' is empty or not finite");
    }
    if k == 1 {
        return Ok(vec![a]);
    }
    Ok((0..k)
        .map(|i| if i + 1 == k { b } else { a + (b - a) * i as f64 / (k - 1) as f64 })
        .collect())
}
