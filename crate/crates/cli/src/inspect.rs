use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Args;
use physgraph::biasgen::{evaluate_bias, NodeBiasSnapshot};
use physgraph::ppo::build_policy;
use physgraph::{ContactSet, GraphBiasCache, KinematicGraph, NodeId, PolicyModel, RunConfig, ToyEnv};

use crate::{model_from_checkpoint, ConfigArgs};

pub const COMPONENTS: [&str; 5] = ["spatial", "edge", "geometric", "anatomical", "composite"];
pub const COEFFICIENTS_FILE: &str = "coefficients.csv";

#[derive(Clone, Debug, Args)]
pub struct InspectArgs {
    /// Trained weights; omit to inspect a freshly initialized model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Initialization seed for fresh models and the default (reset) pose.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV lines `node,x,y,z` in meters; unlisted nodes keep their reset pose.
    #[arg(long)]
    pub positions: Option<PathBuf>,
    /// CSV lines `node_a,node_b`, one contact per line.
    #[arg(long)]
    pub contacts: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Headerless CSV records; `#` starts a comment line.
fn records(path: &Path) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn node(graph: &KinematicGraph, name: &str, path: &Path, line: usize) -> Result<NodeId> {
    graph
        .node_by_name(name)
        .map_err(|_| anyhow::anyhow!("{}:{line}: unknown node `{name}`", path.display()))
}

pub fn read_positions(path: &Path, graph: &KinematicGraph, positions: &mut [[f64; 3]]) -> Result<()> {
    for (line, rec) in records(path)? {
        if rec.len() != 4 {
            bail!("{}:{line}: expected `node,x,y,z`", path.display());
        }
        let id = node(graph, &rec[0], path, line)?;
        for k in 0..3 {
            positions[id.0][k] = rec[k + 1]
                .parse()
                .with_context(|| format!("{}:{line}: `{}` is not a number", path.display(), &rec[k + 1]))?;
        }
    }
    Ok(())
}

pub fn read_contacts(path: &Path, graph: &KinematicGraph) -> Result<ContactSet> {
    let mut set = ContactSet::default();
    for (line, rec) in records(path)? {
        if rec.len() != 2 {
            bail!("{}:{line}: expected `node_a,node_b`", path.display());
        }
        let (u, v) = (node(graph, &rec[0], path, line)?, node(graph, &rec[1], path, line)?);
        set.insert(u, v).with_context(|| format!("{}:{line}", path.display()))?;
    }
    Ok(set)
}

/// Token-space `[T, T]` slice of head `h` from a node-space `[H, N, N]` array.
fn lifted(values: &[f64], n: usize, h: usize, token_nodes: &[Option<NodeId>]) -> Vec<Vec<f64>> {
    token_nodes
        .iter()
        .map(|ti| {
            token_nodes
                .iter()
                .map(|tj| match (ti, tj) {
                    (Some(u), Some(v)) => values[h * n * n + u.0 * n + v.0],
                    _ => 0.0,
                })
                .collect()
        })
        .collect()
}

fn write_matrix(path: &Path, names: &[String], m: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(std::iter::once("token").chain(names.iter().map(String::as_str)))?;
    for (name, row) in names.iter().zip(m) {
        w.write_record(std::iter::once(name.clone()).chain(row.iter().map(|v| v.to_string())))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<component>_h<head>.csv` for every component and head plus the
/// coefficient file; returns the written paths.
pub fn run(args: &InspectArgs) -> Result<Vec<PathBuf>> {
    let (cfg, model): (RunConfig, Box<dyn PolicyModel>) = match &args.checkpoint {
        Some(p) => {
            let (cfg, _, _, m) = model_from_checkpoint(p, &args.config)?;
            (cfg, m)
        }
        None => {
            let cfg = args.config.load()?;
            let scene = cfg.scene()?;
            let m = build_policy(&cfg, &scene.graph, scene.action_dim(), args.seed)?;
            (cfg, m)
        }
    };
    let Some(bias) = model.bias_params() else {
        bail!("architecture {} has no attention biases", cfg.arch);
    };
    let scene = Arc::new(cfg.scene()?);
    let graph = &scene.graph;
    let cache = GraphBiasCache::new(graph, cfg.encoder.heads, &cfg.encoder.bias)?;

    let mut positions = ToyEnv::new(scene.clone(), cfg.env.clone(), args.seed)?.observe().positions;
    if let Some(p) = &args.positions {
        read_positions(p, graph, &mut positions)?;
    }
    let contacts = match &args.contacts {
        Some(p) => read_contacts(p, graph)?,
        None => ContactSet::default(),
    };
    let snap: NodeBiasSnapshot = evaluate_bias(model.store(), bias, &cache, &contacts, &positions)?;

    fs::create_dir_all(&args.out)?;
    let names = model.token_map().names();
    let token_nodes = model.token_map().token_nodes();
    let mut written = Vec::new();
    for comp in COMPONENTS {
        let data = match comp {
            "spatial" => &snap.spatial,
            "edge" => &snap.edge,
            "geometric" => &snap.geometric,
            "anatomical" => &snap.anatomical,
            _ => &snap.composite,
        };
        for h in 0..snap.heads {
            let path = args.out.join(format!("{comp}_h{h}.csv"));
            write_matrix(&path, &names, &lifted(data, snap.n, h, &token_nodes))?;
            written.push(path);
        }
    }

    let v = bias.values(model.store());
    let path = args.out.join(COEFFICIENTS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["name", "value"])?;
    let mut put = |k: String, x: f64| w.write_record([k, x.to_string()]);
    put("lambda_sp".into(), v.lambda_sp)?;
    put("lambda_edge".into(), v.lambda_edge)?;
    put("lambda_geo".into(), v.lambda_geo)?;
    for (h, x) in v.lambda_anat.iter().enumerate() {
        put(format!("lambda_anat_h{h}"), *x)?;
    }
    for (h, x) in v.w_geo.iter().enumerate() {
        put(format!("w_geo_h{h}"), *x)?;
    }
    put("sigma".into(), v.sigma)?;
    put("alpha_ser".into(), v.alpha_ser)?;
    put("alpha_syn".into(), v.alpha_syn)?;
    w.flush()?;
    written.push(path);
    println!("wrote {} files to {}", written.len(), args.out.display());
    Ok(written)
}
