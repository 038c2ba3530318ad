//! Command-line front end for the `hmgl` library.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use hmgl::eval::{self, AblationSuite, RetrievalSplit};
use hmgl::exec::set_thread_limit;
use hmgl::gradcheck;
use hmgl::matching::{self, RankedMatch};
use hmgl::storage;
use hmgl::synth::{self, SynthSpec};
use hmgl::trainer;
use hmgl::{ClusterMode, Config, Execution, GroupSample};

pub const RANKING_HEADER: &str = "query_id,rank,gallery_id,p,p_nod,p_sub,p_glo,sub_skipped";
pub const EPOCH_HEADER: &str = "epoch,id,triplet,reconstruction,total";

#[derive(Debug, Parser)]
#[command(name = "hmgl", version, about = "Multi-relational graph learning for group re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset (manifest + embeddings).
    Synth(SynthArgs),
    /// Train a model; writes a checkpoint and prints per-epoch losses as CSV.
    Train(TrainArgs),
    /// Rank a gallery view for every query of another view.
    Match(MatchArgs),
    /// Score a ranking CSV against a dataset.
    Eval(EvalArgs),
    /// Run an ablation suite.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub groups: usize,
    #[arg(long, default_value_t = 2)]
    pub views: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthSpec::benchmark(0).noise_scale)]
    pub noise: f64,
    #[arg(long, default_value_t = SynthSpec::benchmark(0).occlusion_rate)]
    pub occlusion_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = SynthSpec::benchmark(0).members_range.0)]
    pub min_members: usize,
    #[arg(long, default_value_t = SynthSpec::benchmark(0).members_range.1)]
    pub max_members: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0003)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Reconstruction loss weight.
    #[arg(long, default_value_t = 0.2)]
    pub delta: f64,
    /// Number of graph convolution layers.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 0.3)]
    pub margin: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// Appearance mask threshold.
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    /// Output feature width; defaults to the embedding width.
    #[arg(long)]
    pub out_dim: Option<usize>,
    /// Also write `<out>.epoch<K>` every K epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.3)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Spectral cluster count: an integer, or `auto` for round((N+M)/4).
    #[arg(long, default_value = "3", value_parser = parse_clusters)]
    pub clusters: ClusterMode,
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub query_view: u32,
    #[arg(long, default_value_t = 1)]
    pub gallery_view: u32,
    #[command(flatten)]
    pub scales: ScaleArgs,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub rankings: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub gallery_view: u32,
    /// Row label in the metrics CSV.
    #[arg(long, default_value = "msm")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_parser = parse_suite)]
    pub suite: AblationSuite,
    #[arg(long, default_value_t = 0)]
    pub query_view: u32,
    #[arg(long, default_value_t = 1)]
    pub gallery_view: u32,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long)]
    pub threads: Option<usize>,
}

fn parse_clusters(s: &str) -> std::result::Result<ClusterMode, String> {
    if s == "auto" {
        return Ok(ClusterMode::Ratio);
    }
    s.parse::<usize>()
        .map(ClusterMode::Fixed)
        .map_err(|_| format!("expected an integer or `auto`, got `{s}`"))
}

fn parse_suite(s: &str) -> std::result::Result<AblationSuite, String> {
    s.parse().map_err(|e: hmgl::Error| e.to_string())
}

impl TrainArgs {
    /// Training configuration for a dataset of the given embedding width
    /// and member-identity count.
    pub fn config(&self, embed_dim: usize, num_classes: usize) -> Config {
        Config {
            embed_dim,
            out_dim: self.out_dim.unwrap_or(embed_dim),
            layers: self.layers,
            num_classes,
            tau: self.tau,
            margin: self.margin,
            delta: self.delta,
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch,
            seed: self.seed,
            ..Config::default()
        }
    }
}

impl ScaleArgs {
    pub fn apply(&self, config: &Config) -> Config {
        Config {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            clusters: self.clusters,
            tau: self.tau,
            ..config.clone()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth_cmd(&a),
        Command::Train(a) => train_cmd(&a, out),
        Command::Match(a) => match_cmd(&a, out),
        Command::Eval(a) => eval_cmd(&a, out),
        Command::Ablate(a) => ablate_cmd(&a, out),
        Command::Gradcheck(a) => gradcheck_cmd(&a, out),
    }
}

fn limit_threads(threads: Option<usize>) {
    if let Some(t) = threads {
        set_thread_limit(t);
    }
}

fn load(dir: &Path) -> Result<Vec<GroupSample>> {
    let data = storage::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    ensure!(!data.is_empty(), "dataset {} is empty", dir.display());
    Ok(data)
}

fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_group_ids: a.groups,
        members_range: (a.min_members, a.max_members),
        dim: a.dim,
        views: a.views,
        noise_scale: a.noise,
        occlusion_rate: a.occlusion_rate,
        seed: a.seed,
        ..SynthSpec::benchmark(a.seed)
    };
    let data = synth::generate(&spec)?;
    storage::save_dataset(&a.out, &data).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    limit_threads(a.threads);
    let data = load(&a.data)?;
    let dim = data[0].dim();
    let classes = data.iter().flat_map(|s| s.member_labels()).max().map_or(1, |m| m + 1);
    let config = a.config(dim, classes);
    writeln!(out, "{EPOCH_HEADER}")?;
    let outcome = trainer::train_with(&data, &config, Execution::Parallel, |log, params| {
        let line = format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            log.epoch, log.id, log.triplet, log.reconstruction, log.total
        );
        writeln!(out, "{line}")?;
        if a.checkpoint_every.is_some_and(|k| k > 0 && log.epoch % k == 0) {
            let mut path = a.out.clone().into_os_string();
            path.push(format!(".epoch{}", log.epoch));
            storage::write_checkpoint(Path::new(&path), params, &config)?;
        }
        Ok(())
    })?;
    storage::write_checkpoint(&a.out, &outcome.params, &config)
        .with_context(|| format!("writing checkpoint {}", a.out.display()))?;
    Ok(())
}

fn ranking_rows(split: &RetrievalSplit, ranked: &[Vec<RankedMatch>]) -> String {
    let mut csv = String::from(RANKING_HEADER);
    csv.push('\n');
    for (q, list) in split.queries.iter().zip(ranked) {
        for (rank, m) in list.iter().enumerate() {
            let s = m.score;
            csv.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
                q.group_id,
                rank + 1,
                split.gallery[m.gallery_index].group_id,
                s.p,
                s.p_nod,
                s.p_sub,
                s.p_glo,
                s.sub_skipped
            ));
        }
    }
    csv
}

fn match_cmd(a: &MatchArgs, out: &mut dyn Write) -> Result<()> {
    limit_threads(a.threads);
    let data = load(&a.data)?;
    let (params, ckpt_config) = storage::read_checkpoint(&a.ckpt)?;
    let config = a.scales.apply(&ckpt_config);
    config.validate()?;
    let split = RetrievalSplit::new(&data, a.query_view, a.gallery_view)?;
    let ranked = matching::match_all(&split.queries, &split.gallery, &params, &config, Execution::Parallel)?;
    out.write_all(ranking_rows(&split, &ranked).as_bytes())?;
    Ok(())
}

/// Parses a ranking CSV into per-query gallery id lists, ordered by rank.
pub fn read_rankings(path: &Path) -> Result<BTreeMap<u32, Vec<u32>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RANKING_HEADER => {}
        _ => bail!("{}: expected header `{RANKING_HEADER}`", path.display()),
    }
    let mut by_query: BTreeMap<u32, Vec<(usize, u32)>> = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        ensure!(fields.len() == 8, "{}:{}: expected 8 fields", path.display(), i + 1);
        let parse = |k: usize| -> Result<usize> {
            fields[k]
                .trim()
                .parse()
                .with_context(|| format!("{}:{}: field {}", path.display(), i + 1, k + 1))
        };
        by_query
            .entry(parse(0)? as u32)
            .or_default()
            .push((parse(1)?, parse(2)? as u32));
    }
    Ok(by_query
        .into_iter()
        .map(|(q, mut v)| {
            v.sort_unstable();
            (q, v.into_iter().map(|(_, g)| g).collect())
        })
        .collect())
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let data = load(&a.data)?;
    let gallery: BTreeSet<u32> = data
        .iter()
        .filter(|s| s.view_id == a.gallery_view)
        .map(|s| s.group_id)
        .collect();
    let rankings = read_rankings(&a.rankings)?;
    let (ids, truths): (Vec<Vec<u32>>, Vec<BTreeSet<u32>>) = rankings
        .into_iter()
        .map(|(q, r)| (r, gallery.iter().copied().filter(|&g| g == q).collect()))
        .unzip();
    let m = eval::metrics(&ids, &truths)?;
    out.write_all(eval::metrics_csv(&[(a.label.clone(), m)]).as_bytes())?;
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    limit_threads(a.threads);
    let data = load(&a.data)?;
    let (params, config) = storage::read_checkpoint(&a.ckpt)?;
    let split = RetrievalSplit::new(&data, a.query_view, a.gallery_view)?;
    let rows = eval::ablate(&data, &split, &config, a.suite, Some(&params), Execution::Parallel)?;
    out.write_all(eval::metrics_csv(&rows).as_bytes())?;
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    limit_threads(a.threads);
    let instance = gradcheck::random_instance(a.seed, a.dim, a.layers)?;
    let reports = gradcheck::check_gradients(&instance, gradcheck::DEFAULT_STEP, Execution::Parallel)?;
    writeln!(out, "tensor,entries,max_abs_error,max_rel_error")?;
    for r in &reports {
        writeln!(
            out,
            "{},{},{:.3e},{:.3e}",
            r.name, r.entries, r.max_abs_error, r.max_rel_error
        )?;
    }
    let worst = gradcheck::worst(&reports);
    ensure!(
        worst < gradcheck::DEFAULT_TOLERANCE,
        "max relative error {worst:.3e} exceeds {:.0e}",
        gradcheck::DEFAULT_TOLERANCE
    );
    Ok(())
}
