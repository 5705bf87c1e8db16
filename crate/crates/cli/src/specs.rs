//! Parsing of `--graph` and `--grid` arguments.

use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSource {
    /// Prebuilt dense adjacency CSV.
    Adjacency { path: PathBuf },
    /// Feature file turned into a cosine-similarity graph.
    Poi { path: PathBuf },
    /// Edge list turned into a binary K-hop graph.
    KHop { edges: PathBuf, hops: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphSpec {
    pub source: GraphSource,
    pub weight: f64,
}

fn parse_weight(s: &str, whole: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(w) if w.is_finite() && w >= 0.0 => Ok(w),
        _ => Err(format!("graph spec '{whole}': weight '{s}' is not a nonnegative number")),
    }
}

/// Accepts `adj.csv:W`, `poi:features.csv:W` or `khop:edges.csv:K:W`.
pub fn parse_graph_spec(spec: &str) -> Result<GraphSpec, String> {
    let (rest, weight) = spec
        .rsplit_once(':')
        .ok_or_else(|| format!("graph spec '{spec}' must end with ':<weight>'"))?;
    let weight = parse_weight(weight, spec)?;
    let source = if let Some(path) = rest.strip_prefix("poi:") {
        GraphSource::Poi { path: PathBuf::from(path) }
    } else if let Some(body) = rest.strip_prefix("khop:") {
        let (path, hops) = body
            .rsplit_once(':')
            .ok_or_else(|| format!("graph spec '{spec}' must look like khop:<edges>:<K>:<weight>"))?;
        let hops = hops
            .parse::<usize>()
            .ok()
            .filter(|&k| k >= 1)
            .ok_or_else(|| format!("graph spec '{spec}': hop bound '{hops}' must be a positive integer"))?;
        GraphSource::KHop { edges: PathBuf::from(path), hops }
    } else {
        GraphSource::Adjacency { path: PathBuf::from(rest) }
    };
    let path_empty = match &source {
        GraphSource::Adjacency { path } | GraphSource::Poi { path } => path.as_os_str().is_empty(),
        GraphSource::KHop { edges, .. } => edges.as_os_str().is_empty(),
    };
    if path_empty {
        return Err(format!("graph spec '{spec}' has an empty path"));
    }
    Ok(GraphSpec { source, weight })
}

/// Coefficient a `--grid` argument refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridParam {
    Alpha,
    Beta,
    /// Weight of the graph at this position.
    Graph(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub param: GridParam,
    pub values: Vec<f64>,
}

fn parse_number(s: &str, whole: &str) -> Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("grid spec '{whole}': '{s}' is not a finite number"))
}

/// Accepts `name=start:stop:step`, `name=v1,v2,...` or `name=v`.
///
/// Names are `alpha`, `beta`, `gamma` (graph 0), `delta` (graph 1) or
/// `graphN`.
pub fn parse_grid_spec(spec: &str) -> Result<GridSpec, String> {
    let (name, body) = spec
        .split_once('=')
        .ok_or_else(|| format!("grid spec '{spec}' must look like name=start:stop:step"))?;
    let param = match name.trim() {
        "alpha" => GridParam::Alpha,
        "beta" => GridParam::Beta,
        "gamma" => GridParam::Graph(0),
        "delta" => GridParam::Graph(1),
        other => match other.strip_prefix("graph").and_then(|i| i.parse::<usize>().ok()) {
            Some(i) => GridParam::Graph(i),
            None => return Err(format!("grid spec '{spec}': unknown coefficient '{other}'")),
        },
    };
    let values = if body.contains(':') {
        let parts: Vec<&str> = body.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("grid spec '{spec}': range must be start:stop:step"));
        }
        let (start, stop, step) = (
            parse_number(parts[0], spec)?,
            parse_number(parts[1], spec)?,
            parse_number(parts[2], spec)?,
        );
        if step <= 0.0 {
            return Err(format!("grid spec '{spec}': step must be positive"));
        }
        if stop < start {
            return Err(format!("grid spec '{spec}': stop {stop} is below start {start}"));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=count).map(|i| start + i as f64 * step).collect()
    } else {
        body.split(',').map(|v| parse_number(v, spec)).collect::<Result<Vec<_>, _>>()?
    };
    if values.iter().any(|&v| v < 0.0) {
        return Err(format!("grid spec '{spec}': coefficients must be nonnegative"));
    }
    Ok(GridSpec { param, values })
}
