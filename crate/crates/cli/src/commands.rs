use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde_json::json;
use wdgtc::graph::{khop_binary, poi_similarity, Adjacency, GraphPenalty};
use wdgtc::io::{self, fmt_f64, ModelExport};
use wdgtc::metrics::{grid_search, score, ParamGrid, SearchStrategy};
use wdgtc::synth::{apply_missing, generate_wdg, MissingPattern};
use wdgtc::tensor::{DenseTensor, ObservationMask, MAX_MODES};
use wdgtc::{solve, SolverConfig};

use crate::error::{CliError, CliResult};
use crate::manifest::{FileDigest, Phases, RunManifest};
use crate::specs::{GraphSource, GraphSpec, GridParam};
use crate::{Cli, Command, CompleteArgs, EvaluateArgs, GenerateArgs, GridSearchArgs, ReplayArgs, SolverArgs, StrategyArg};

pub type Dims = Vec<usize>;

pub fn parse_dims(s: &str) -> Result<Dims, String> {
    let dims = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|_| format!("'{d}' is not a mode size")))
        .collect::<Result<Vec<_>, _>>()?;
    if !(2..=MAX_MODES).contains(&dims.len()) {
        return Err(format!("need between 2 and {MAX_MODES} modes, got {}", dims.len()));
    }
    if dims.contains(&0) {
        return Err("mode sizes must be positive".into());
    }
    Ok(dims)
}

pub fn parse_missing(s: &str) -> Result<MissingPattern, String> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["random", rate] => {
            let rate: f64 = rate.parse().map_err(|_| format!("'{rate}' is not a rate"))?;
            if !(0.0..1.0).contains(&rate) {
                return Err(format!("missing rate must lie in [0, 1), got {rate}"));
            }
            Ok(MissingPattern::Random { rate })
        }
        ["tail", last, second] => {
            let last_from = last.parse().map_err(|_| format!("'{last}' is not an index"))?;
            let second_from = second.parse().map_err(|_| format!("'{second}' is not an index"))?;
            Ok(MissingPattern::TailBlock { last_from, second_from })
        }
        _ => Err(format!("'{s}' must be random:RATE or tail:LAST_FROM:SECOND_FROM")),
    }
}

pub fn run(command: Command, argv: Vec<String>) -> CliResult<()> {
    match command {
        Command::Complete(a) => complete(a, argv),
        Command::Generate(a) => generate(a, argv),
        Command::Evaluate(a) => evaluate(a, argv),
        Command::GridSearch(a) => grid(a, argv),
        Command::Replay(a) => replay(a),
    }
}

fn read_bytes(path: &Path, digests: &mut Vec<FileDigest>) -> CliResult<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    digests.push(FileDigest::of_bytes(path, &bytes));
    Ok(bytes)
}

fn read_tensor_file(path: &Path, digests: &mut Vec<FileDigest>) -> CliResult<(DenseTensor, ObservationMask)> {
    let bytes = read_bytes(path, digests)?;
    io::read_tensor(bytes.as_slice()).map_err(|e| CliError::in_file(path, e))
}

fn read_mask_file(path: &Path, digests: &mut Vec<FileDigest>) -> CliResult<ObservationMask> {
    let bytes = read_bytes(path, digests)?;
    io::read_mask(bytes.as_slice()).map_err(|e| CliError::in_file(path, e))
}

/// Output files, written in order and digested from the bytes written.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: PathBuf, text: String) {
        self.files.push((path, text.into_bytes()));
    }

    fn write(self, manifest: &mut RunManifest) -> CliResult<()> {
        for (path, bytes) in self.files {
            std::fs::write(&path, &bytes).map_err(|source| CliError::Io { path: path.clone(), source })?;
            manifest.outputs.push(FileDigest::of_bytes(&path, &bytes));
        }
        Ok(())
    }
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> CliResult<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn derived(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn load_graph(
    spec: &GraphSpec,
    n: usize,
    poi_threshold: Option<f64>,
    inputs: &mut Vec<FileDigest>,
) -> CliResult<Adjacency> {
    match &spec.source {
        GraphSource::Adjacency { path } => {
            let bytes = read_bytes(path, inputs)?;
            io::read_adjacency(bytes.as_slice()).map_err(|e| CliError::in_file(path, e))
        }
        GraphSource::Poi { path } => {
            let bytes = read_bytes(path, inputs)?;
            let vectors = io::read_poi(bytes.as_slice()).map_err(|e| CliError::in_file(path, e))?;
            let a = poi_similarity(&vectors)?;
            Ok(match poi_threshold {
                Some(t) => a.thresholded(t),
                None => a,
            })
        }
        GraphSource::KHop { edges, hops } => {
            let bytes = read_bytes(edges, inputs)?;
            let list = io::read_edges(bytes.as_slice()).map_err(|e| CliError::in_file(edges, e))?;
            Ok(khop_binary(n, &list, *hops)?)
        }
    }
}

fn load_graphs(
    args: &SolverArgs,
    shape: &[usize],
    inputs: &mut Vec<FileDigest>,
) -> CliResult<Vec<GraphPenalty>> {
    if args.wdg_mode >= shape.len() {
        return Err(CliError::Usage(format!(
            "--wdg-mode {} is out of range for a {}-mode tensor",
            args.wdg_mode,
            shape.len()
        )));
    }
    let n = shape[args.wdg_mode];
    args.graphs
        .iter()
        .map(|spec| {
            let adj = load_graph(spec, n, args.poi_threshold, inputs)?;
            Ok(GraphPenalty::new(adj, spec.weight)?)
        })
        .collect()
}

fn base_config(args: &SolverArgs, graphs: &[GraphPenalty]) -> SolverConfig {
    SolverConfig {
        max_iter: args.max_iter,
        tol: args.tol,
        seed: args.seed,
        wdg_mode: args.wdg_mode,
        ..SolverConfig::new(args.rank as usize)
    }
    .with_graph_weights_from(graphs)
}

fn threads_from_env() -> CliResult<usize> {
    match std::env::var("WDGTC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t >= 1)
            .ok_or_else(|| CliError::Usage(format!("WDGTC_THREADS must be a positive integer, got '{v}'"))),
    }
}

fn complete(a: CompleteArgs, argv: Vec<String>) -> CliResult<()> {
    let mut phases = Phases::start();
    let mut manifest = RunManifest::new("complete", argv);
    let (x, mask) = read_tensor_file(&a.input, &mut manifest.inputs)?;
    let graphs = load_graphs(&a.solver, x.shape(), &mut manifest.inputs)?;
    let cfg = SolverConfig { alpha: a.alpha, beta: a.beta, ..base_config(&a.solver, &graphs) };
    cfg.validate(graphs.len()).map_err(|e| CliError::Usage(e.to_string()))?;
    phases.mark("load");

    let result = solve(&x, &mask, &cfg, &graphs)?;
    phases.mark("solve");

    let model_out = a.model_out.unwrap_or_else(|| derived(&a.out, "model.json"));
    let trace_out = a.trace_out.unwrap_or_else(|| derived(&a.out, "trace.csv"));
    let manifest_out = a.manifest.unwrap_or_else(|| derived(&a.out, "manifest.json"));

    let mut trace = String::from("sweep,objective,rank,loss_before_refresh,loss_after_refresh\n");
    let _ = writeln!(trace, "0,{},,,", fmt_f64(result.objective_trace[0]));
    for (i, s) in result.sweeps.iter().enumerate() {
        let _ = writeln!(
            trace,
            "{},{},{},{},{}",
            i + 1,
            fmt_f64(s.objective),
            s.rank,
            fmt_f64(s.loss_before_refresh),
            fmt_f64(s.loss_after_refresh)
        );
    }
    let mut outputs = Outputs::default();
    outputs.add(a.out.clone(), io::tensor_to_string(&result.completed, None)?);
    outputs.add(model_out.clone(), ModelExport::from_model(&result.model).to_json() + "\n");
    outputs.add(trace_out.clone(), trace);
    outputs.write(&mut manifest)?;
    phases.mark("write");

    manifest.config = json!({
        "input": a.input,
        "out": a.out,
        "model_out": model_out,
        "trace_out": trace_out,
        "graphs": a.solver.graphs,
        "poi_threshold": a.solver.poi_threshold,
        "solver": cfg,
        "final_rank": result.final_rank,
        "sweeps": result.sweeps.len(),
        "termination": result.termination,
    });
    manifest.timings_ms = phases.timings;
    write_manifest(&manifest_out, &manifest)
}

fn generate(a: GenerateArgs, argv: Vec<String>) -> CliResult<()> {
    let mut phases = Phases::start();
    let mut manifest = RunManifest::new("generate", argv);
    if !(a.noise.is_finite() && a.noise >= 0.0) {
        return Err(CliError::Usage(format!("--noise must be finite and nonnegative, got {}", a.noise)));
    }
    let sigma = if a.noise_relative {
        a.noise * generate_wdg(&a.dims, a.clusters, a.rank_per_cluster, 0.0, a.seed)?.signal_rms()
    } else {
        a.noise
    };
    let scenario = generate_wdg(&a.dims, a.clusters, a.rank_per_cluster, sigma, a.seed)?;
    let mask_seed = a.mask_seed.unwrap_or(a.seed.wrapping_add(1000));
    let mask = apply_missing(&a.dims, a.missing, mask_seed)?;
    phases.mark("generate");

    std::fs::create_dir_all(&a.out_dir).map_err(|source| CliError::Io { path: a.out_dir.clone(), source })?;
    let file = |name: &str| a.out_dir.join(name);
    let mut clusters = String::from("entity,cluster\n");
    for (i, c) in scenario.cluster_of.iter().enumerate() {
        let _ = writeln!(clusters, "{i},{c}");
    }
    let mut outputs = Outputs::default();
    outputs.add(file("truth.csv"), io::tensor_to_string(&scenario.truth, None)?);
    outputs.add(file("observed.csv"), io::tensor_to_string(&scenario.truth, Some(&mask))?);
    outputs.add(file("mask.csv"), io::mask_to_string(&mask));
    outputs.add(file("eval_mask.csv"), io::mask_to_string(&mask.complement()));
    outputs.add(file("graph_block.csv"), io::adjacency_to_string(&scenario.graphs[0]));
    outputs.add(file("graph_noisy.csv"), io::adjacency_to_string(&scenario.graphs[1]));
    outputs.add(file("clusters.csv"), clusters);
    outputs.add(file("planted_model.json"), ModelExport::from_model(&scenario.planted_model).to_json() + "\n");
    outputs.write(&mut manifest)?;
    phases.mark("write");

    manifest.config = json!({
        "dims": a.dims,
        "clusters": a.clusters,
        "rank_per_cluster": a.rank_per_cluster,
        "noise": a.noise,
        "noise_relative": a.noise_relative,
        "noise_sigma": sigma,
        "missing": a.missing,
        "seed": a.seed,
        "mask_seed": mask_seed,
        "observed_cells": mask.observed_count(),
        "out_dir": a.out_dir,
    });
    manifest.timings_ms = phases.timings;
    write_manifest(&file("manifest.json"), &manifest)
}

fn evaluate(a: EvaluateArgs, argv: Vec<String>) -> CliResult<()> {
    let mut phases = Phases::start();
    let mut manifest = RunManifest::new("evaluate", argv);
    let (pred, pred_listed) = read_tensor_file(&a.pred, &mut manifest.inputs)?;
    let (truth, truth_listed) = read_tensor_file(&a.truth, &mut manifest.inputs)?;
    if pred.shape() != truth.shape() {
        return Err(CliError::Domain(format!(
            "prediction shape {:?} differs from truth shape {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let eval_mask = match &a.mask {
        Some(p) => read_mask_file(p, &mut manifest.inputs)?,
        None => truth_listed.clone(),
    };
    for (label, listed) in [("prediction", &pred_listed), ("truth", &truth_listed)] {
        if eval_mask.shape() == listed.shape() && !covers(listed, &eval_mask) {
            return Err(CliError::Domain(format!("{label} file does not list every evaluated cell")));
        }
    }
    if let Some(mode) = a.per_slice_mode {
        if mode >= truth.ndim() {
            return Err(CliError::Usage(format!("--per-slice-mode {mode} exceeds the {} modes", truth.ndim())));
        }
    }
    let report = score(&pred, &truth, &eval_mask, a.per_slice_mode)?;
    phases.mark("score");

    let mut outputs = Outputs::default();
    outputs.add(a.out.clone(), serde_json::to_string_pretty(&report).expect("report serializes") + "\n");
    let slices_out = report.per_slice.as_ref().map(|slices| {
        let path = a.per_slice_out.clone().unwrap_or_else(|| derived(&a.out, "slices.csv"));
        let mut csv = String::from("index,res,sq_residual,cells\n");
        for s in slices {
            let _ = writeln!(csv, "{},{},{},{}", s.index, fmt_f64(s.res), fmt_f64(s.sq_residual), s.cells);
        }
        outputs.add(path.clone(), csv);
        path
    });
    outputs.write(&mut manifest)?;
    phases.mark("write");

    manifest.config = json!({
        "pred": a.pred,
        "truth": a.truth,
        "mask": a.mask,
        "per_slice_mode": a.per_slice_mode,
        "out": a.out,
        "per_slice_out": slices_out,
    });
    manifest.timings_ms = phases.timings;
    let manifest_out = a.manifest.unwrap_or_else(|| derived(&a.out, "manifest.json"));
    write_manifest(&manifest_out, &manifest)
}

fn covers(listed: &ObservationMask, wanted: &ObservationMask) -> bool {
    listed.flags().iter().zip(wanted.flags()).all(|(&l, &w)| l || !w)
}

fn build_grid(a: &GridSearchArgs) -> CliResult<ParamGrid> {
    let n = a.solver.graphs.len();
    let mut grid = ParamGrid {
        alpha: vec![0.0],
        beta: vec![0.0],
        graph_weights: a.solver.graphs.iter().map(|g| vec![g.weight]).collect(),
    };
    let mut seen = BTreeSet::new();
    for spec in &a.grids {
        let key = match spec.param {
            GridParam::Alpha => 0,
            GridParam::Beta => 1,
            GridParam::Graph(i) => i + 2,
        };
        if !seen.insert(key) {
            return Err(CliError::Usage(format!("coefficient {:?} has more than one --grid", spec.param)));
        }
        match spec.param {
            GridParam::Alpha => grid.alpha = spec.values.clone(),
            GridParam::Beta => grid.beta = spec.values.clone(),
            GridParam::Graph(i) if i < n => grid.graph_weights[i] = spec.values.clone(),
            GridParam::Graph(i) => {
                return Err(CliError::Usage(format!("--grid for graph {i} but only {n} --graph given")));
            }
        }
    }
    Ok(grid)
}

fn grid(a: GridSearchArgs, argv: Vec<String>) -> CliResult<()> {
    let mut phases = Phases::start();
    let mut manifest = RunManifest::new("grid-search", argv);
    let grid = build_grid(&a)?;
    let threads = threads_from_env()?;
    let (x, train) = read_tensor_file(&a.input, &mut manifest.inputs)?;
    let val = read_mask_file(&a.val_mask, &mut manifest.inputs)?;
    let (truth, truth_listed) = read_tensor_file(&a.truth, &mut manifest.inputs)?;
    if truth.shape() != x.shape() {
        return Err(CliError::Domain(format!("truth shape {:?} differs from input shape {:?}", truth.shape(), x.shape())));
    }
    if val.shape() == truth_listed.shape() && !covers(&truth_listed, &val) {
        return Err(CliError::Domain("truth file does not list every validation cell".into()));
    }
    let graphs = load_graphs(&a.solver, x.shape(), &mut manifest.inputs)?;
    let base = base_config(&a.solver, &graphs);
    let strategy = match a.strategy {
        StrategyArg::Exhaustive => SearchStrategy::Exhaustive,
        StrategyArg::PerBeta => SearchStrategy::PerBeta { seed: a.strategy_seed },
    };
    phases.mark("load");

    let outcome = grid_search(&x, &train, &val, &truth, &graphs, &grid, strategy, &base, threads)?;
    phases.mark("search");

    let mut csv = String::from("alpha,beta");
    for i in 0..graphs.len() {
        let _ = write!(csv, ",graph{i}");
    }
    csv.push_str(",mse,mape,res,final_rank\n");
    for row in &outcome.table {
        let _ = write!(csv, "{},{}", fmt_f64(row.alpha), fmt_f64(row.beta));
        for w in &row.graph_weights {
            let _ = write!(csv, ",{}", fmt_f64(*w));
        }
        let _ = writeln!(csv, ",{},{},{},{}", fmt_f64(row.mse), fmt_f64(row.mape), fmt_f64(row.res), row.final_rank);
    }
    let mut outputs = Outputs::default();
    outputs.add(a.out.clone(), csv);
    outputs.write(&mut manifest)?;
    phases.mark("write");

    let best = &outcome.table[outcome.best_index];
    manifest.config = json!({
        "input": a.input,
        "val_mask": a.val_mask,
        "truth": a.truth,
        "graphs": a.solver.graphs,
        "poi_threshold": a.solver.poi_threshold,
        "grid": grid,
        "strategy": strategy,
        "threads": threads,
        "base": base,
        "best_index": outcome.best_index,
        "best": outcome.best,
        "best_scores": { "mse": best.mse, "mape": best.mape, "res": best.res, "final_rank": best.final_rank },
    });
    manifest.timings_ms = phases.timings;
    let manifest_out = a.manifest.unwrap_or_else(|| derived(&a.out, "manifest.json"));
    write_manifest(&manifest_out, &manifest)
}

fn replay(a: ReplayArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.manifest).map_err(|source| CliError::Io { path: a.manifest.clone(), source })?;
    let recorded: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: a.manifest.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let cli = Cli::try_parse_from(&recorded.argv)
        .map_err(|e| CliError::Usage(format!("recorded arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Usage("a manifest cannot record a replay".into()));
    }
    run(cli.command, recorded.argv.clone())?;
    let mut mismatched = Vec::new();
    for out in &recorded.outputs {
        let path = PathBuf::from(&out.path);
        let bytes = std::fs::read(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
        if FileDigest::of_bytes(&path, &bytes) != *out {
            mismatched.push(out.path.clone());
        }
    }
    if mismatched.is_empty() {
        println!("replayed {}: {} outputs match", recorded.command, recorded.outputs.len());
        Ok(())
    } else {
        Err(CliError::Domain(format!("outputs differ from the manifest: {}", mismatched.join(", "))))
    }
}
