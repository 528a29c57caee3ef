//! The `soyo` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data
//! or file-format errors. `SOYO_SEED` is used when `--seed` is absent.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::Config;
use crate::dfr::{DomainRecord, DomainStore};
use crate::error::{Error, Result};
use crate::gmc::{fit_compressor, select_k, CompressorKind, CovKind};
use crate::harness::{
    compare_selectors, comparison_to_csv, compute_selection_metrics, confusion_to_csv, generate_stream,
    ingest_features, run_incremental, sessions_to_csv, write_stream, FeatureStream, SelectorKind,
};
use crate::io::{read_feat, write_feat, FeatFile, ModelStore, Provenance};
use crate::rng::{tags, RngStream};
use crate::selectors::DomainSelector;
use crate::types::{DomainId, LevelId};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "soyo", version, about = "Domain selection with compressed-feature rehearsal")]
struct Cli {
    /// Seed for every random stream (falls back to SOYO_SEED, then the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "soyo-out")]
    out: PathBuf,
    /// Suppress informational output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads (0 = one per core). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-level feature stream as FEAT files.
    Gen(GenArgs),
    /// Fit compressors to a FEAT file or to every train split of a stream.
    FitGmc(FitArgs),
    /// Tabulate BIC over a range of component counts.
    BicSweep(BicArgs),
    /// Draw pseudo-features from a stored compressor.
    Resample(ResampleArgs),
    /// Train the fusion network incrementally and save the final store.
    Train(TrainArgs),
    /// Route every sample of a stream with a saved store.
    Predict(PredictArgs),
    /// Run the incremental protocol for one selector.
    Run(RunArgs),
    /// Run all selectors on the same stream and seeds.
    Compare(StreamArg),
    /// Summarize a saved store and its parameter counts.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    domains: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    class_offset: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    correlation: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct StreamArg {
    /// Directory of FEAT files; a stream is generated from the config if absent.
    #[arg(long)]
    stream: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CompressorArg {
    Gmm,
    Meanstd,
    Pca,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CovArg {
    Diag,
    Full,
}

impl From<CovArg> for CovKind {
    fn from(c: CovArg) -> Self {
        match c {
            CovArg::Diag => CovKind::Diagonal,
            CovArg::Full => CovKind::Full,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct CompressorArgs {
    #[arg(long, value_enum, default_value = "gmm")]
    compressor: CompressorArg,
    /// Mixture components (default from config).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    cov: Option<CovArg>,
    /// PCA components (default from config).
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// A single FEAT file, stored as domain 1.
    #[arg(long, conflicts_with = "stream", required_unless_present = "stream")]
    input: Option<PathBuf>,
    /// Level assigned to `--input`.
    #[arg(long, default_value = "last")]
    level: String,
    #[arg(long)]
    stream: Option<PathBuf>,
    #[command(flatten)]
    comp: CompressorArgs,
}

#[derive(Args, Debug)]
struct BicArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    k_min: usize,
    #[arg(long, default_value_t = 10)]
    k_max: usize,
    #[arg(long, value_enum)]
    cov: Option<CovArg>,
}

#[derive(Args, Debug)]
struct ResampleArgs {
    #[arg(long)]
    store: PathBuf,
    /// 1-based domain number.
    #[arg(long, default_value_t = 1)]
    domain: usize,
    #[arg(long, default_value = "last")]
    level: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    stream: StreamArg,
    #[command(flatten)]
    comp: CompressorArgs,
    /// Fine-tune on current-domain data only, without rehearsal.
    #[arg(long)]
    no_dfr: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SelectorArg {
    SoyoGmc,
    SoyoMeanstd,
    SoyoPca,
    Nmc,
    Kmeans,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    stream: StreamArg,
    #[arg(long, value_enum, default_value = "soyo-gmc")]
    selector: SelectorArg,
    #[arg(long)]
    no_dfr: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RouteArg {
    Auto,
    Mdfn,
    Nmc,
    Kmeans,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value = "auto")]
    selector: RouteArg,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    store: PathBuf,
}

struct Ctx {
    cfg: Config,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance { seed: self.cfg.seed, config_hash: self.cfg.hash() }
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.out_file(name)?;
        crate::io::write_atomic(&p, contents.as_bytes())?;
        Ok(p)
    }

    /// `<command>.json`: provenance plus a command-specific payload.
    fn write_json<T: Serialize>(&self, command: &str, payload: &T) -> Result<()> {
        let doc = serde_json::json!({
            "command": command,
            "seed": self.cfg.seed,
            "config_hash": self.cfg.hash(),
            "result": payload,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        text.push('\n');
        self.write(&format!("{command}.json"), &text).map(|_| ())
    }

    fn stream(&self, arg: &StreamArg) -> Result<FeatureStream> {
        match &arg.stream {
            Some(dir) => ingest_features(dir),
            None => generate_stream(&self.cfg.stream_config()),
        }
    }

    fn compressor(&self, a: &CompressorArgs) -> CompressorKind {
        let h = &self.cfg.harness;
        match a.compressor {
            CompressorArg::Gmm => {
                CompressorKind::Gmm { k: a.k.unwrap_or(h.gmm_components), cov: a.cov.map_or(h.gmm_cov, Into::into) }
            }
            CompressorArg::Meanstd => CompressorKind::MeanStd,
            CompressorArg::Pca => CompressorKind::Pca { n: a.n.unwrap_or(h.pca_components) },
        }
    }

    fn save_store(&self, mut store: ModelStore) -> Result<PathBuf> {
        store.provenance = self.provenance();
        let p = self.out_file("model.store")?;
        store.save(&p)?;
        Ok(p)
    }
}

fn parse_level(s: &str) -> Result<LevelId> {
    s.parse()
}

/// Runs the tool on `argv` (including the program name) and returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run_cli(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            }
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("SOYO_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("SOYO_SEED is not an unsigned integer: '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn run_cli(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = resolve_seed(cli.seed)? {
        cfg.seed = seed;
    }
    let ctx = Ctx { cfg, out: cli.out.clone(), quiet: cli.quiet };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| dispatch(ctx, cli.cmd))
}

fn dispatch(mut ctx: Ctx, cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => {
            let s = &mut ctx.cfg.stream;
            let apply = |dst: &mut usize, v: Option<usize>| {
                if let Some(v) = v {
                    *dst = v;
                }
            };
            apply(&mut s.n_domains, a.domains);
            apply(&mut s.dim, a.dim);
            apply(&mut s.n_train, a.n_train);
            apply(&mut s.n_test, a.n_test);
            let applyf = |dst: &mut f64, v: Option<f64>| {
                if let Some(v) = v {
                    *dst = v;
                }
            };
            applyf(&mut s.domain_separation, a.separation);
            applyf(&mut s.class_offset_scale, a.class_offset);
            applyf(&mut s.within_noise, a.noise);
            applyf(&mut s.level_correlation, a.correlation);
            ctx.cfg.validate()?;
            gen(&ctx)
        }
        Command::FitGmc(a) => fit(&ctx, &a),
        Command::BicSweep(a) => bic_sweep(&ctx, &a),
        Command::Resample(a) => resample(&ctx, &a),
        Command::Train(a) => {
            let kind = SelectorKind::Soyo { compressor: ctx.compressor(&a.comp), balance: !a.no_dfr };
            run(&ctx, &a.stream, kind, "train")
        }
        Command::Predict(a) => predict(&ctx, &a),
        Command::Run(a) => {
            let h = &ctx.cfg.harness;
            let balance = !a.no_dfr;
            let kind = match a.selector {
                SelectorArg::SoyoGmc => SelectorKind::Soyo { compressor: h.gmc(), balance },
                SelectorArg::SoyoMeanstd => SelectorKind::Soyo { compressor: CompressorKind::MeanStd, balance },
                SelectorArg::SoyoPca => {
                    SelectorKind::Soyo { compressor: CompressorKind::Pca { n: h.pca_components }, balance }
                }
                SelectorArg::Nmc => SelectorKind::Nmc,
                SelectorArg::Kmeans => SelectorKind::KmeansKnn { m: h.kmeans_centers },
            };
            run(&ctx, &a.stream, kind, "run")
        }
        Command::Compare(a) => compare(&ctx, &a),
        Command::Inspect(a) => inspect(&ctx, &a),
    }
}

fn gen(ctx: &Ctx) -> Result<()> {
    let stream = generate_stream(&ctx.cfg.stream_config())?;
    std::fs::create_dir_all(&ctx.out)?;
    let paths = write_stream(&stream, &ctx.out)?;
    let names: Vec<String> =
        paths.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect();
    ctx.write_json("gen", &serde_json::json!({ "stream": ctx.cfg.stream, "files": names }))?;
    ctx.say(format!("wrote {} FEAT files to {}", names.len(), ctx.out.display()));
    Ok(())
}

fn fit(ctx: &Ctx, a: &FitArgs) -> Result<()> {
    let kind = ctx.compressor(&a.comp);
    let em = ctx.cfg.em.clone();
    let root = RngStream::new(ctx.cfg.seed, 0);
    let mut store = DomainStore::new();
    let fit_one = |tau: usize, level: LevelId, x: &crate::types::FeatureMatrix| {
        let cfg = em.clone().with_seed(root.path(&[tags::EM, tau as u64 + 1, level.tag()]));
        fit_compressor(x, kind, &cfg)
    };
    match (&a.input, &a.stream) {
        (Some(input), _) => {
            let level = parse_level(&a.level)?;
            let f = read_feat(input)?;
            let m = fit_one(0, level, &f.features)?;
            store.push(DomainRecord { models: [(level, m)].into(), n_train: f.features.n_rows() });
        }
        (None, Some(dir)) => {
            let stream = ingest_features(dir)?;
            for (tau, split) in stream.domains.iter().enumerate() {
                let mut models = std::collections::BTreeMap::new();
                for (level, x) in split.train.levels() {
                    models.insert(*level, fit_one(tau, *level, x)?);
                }
                store.push(DomainRecord { models, n_train: split.train.n_rows() });
            }
        }
        (None, None) => return Err(Error::InvalidConfig("either --input or --stream is required".into())),
    }
    let ms = ModelStore { domains: store, ..ModelStore::default() };
    let summary = ms.summary(ctx.cfg.harness.backbone_params);
    let p = ctx.save_store(ms)?;
    ctx.write_json("fit-gmc", &serde_json::json!({ "compressor": kind.to_string(), "summary": summary }))?;
    ctx.say(format!(
        "{kind}: {} records, {} parameters -> {}",
        summary.records.len(),
        summary.compressor_params,
        p.display()
    ));
    Ok(())
}

fn bic_sweep(ctx: &Ctx, a: &BicArgs) -> Result<()> {
    if a.k_min == 0 || a.k_min > a.k_max {
        return Err(Error::InvalidConfig("need 1 <= k_min <= k_max".into()));
    }
    let x = read_feat(&a.input)?.features;
    let mut em = ctx.cfg.em_config();
    if let Some(c) = a.cov {
        em.cov_kind = c.into();
    }
    let (best, table) = select_k(&x, a.k_min..=a.k_max, &em)?;
    let mut csv = String::from("k,bic\n");
    let mut text = String::from("    K             BIC\n");
    for (k, b) in &table {
        let _ = writeln!(csv, "{k},{b}");
        let mark = if *k == best { "  <- min" } else { "" };
        let _ = writeln!(text, "{k:>5} {b:>15.4}{mark}");
    }
    ctx.write("bic.csv", &csv)?;
    ctx.write_json("bic-sweep", &serde_json::json!({ "best_k": best, "table": table }))?;
    ctx.say(text.trim_end());
    Ok(())
}

fn resample(ctx: &Ctx, a: &ResampleArgs) -> Result<()> {
    let store = ModelStore::load(&a.store)?;
    let level = parse_level(&a.level)?;
    if a.domain == 0 || a.domain > store.domains.len() {
        return Err(Error::InvalidConfig(format!("domain must be in 1..={}", store.domains.len())));
    }
    let set = store.domains.resample(
        DomainId(a.domain - 1),
        level,
        a.n,
        RngStream::new(ctx.cfg.seed, 0).substream(tags::DFR),
    )?;
    let p = ctx.out_file("resampled.feat")?;
    write_feat(&p, &FeatFile::new(set.features))?;
    ctx.write_json("resample", &serde_json::json!({ "domain": a.domain, "level": level, "n": a.n }))?;
    ctx.say(format!("wrote {} rows to {}", a.n, p.display()));
    Ok(())
}

fn run(ctx: &Ctx, stream: &StreamArg, kind: SelectorKind, command: &str) -> Result<()> {
    let stream = ctx.stream(stream)?;
    let outcome = run_incremental(&stream, kind, &ctx.cfg.harness_config())?;
    let csv_name = if command == "train" { "train.csv" } else { "sessions.csv" };
    ctx.write(csv_name, &sessions_to_csv(&outcome.reports))?;
    let last = outcome.reports.last().expect("at least one session");
    ctx.write("confusion.csv", &confusion_to_csv(last))?;
    ctx.write_json(command, &serde_json::json!({ "selector": kind, "sessions": outcome.reports }))?;
    let p = ctx.save_store(outcome.store)?;
    for r in &outcome.reports {
        ctx.say(format!(
            "session {}: S_T={:.4} A_T={:.4} (oracle {:.4})",
            r.session, r.selection_accuracy, r.accuracy_proxy, r.oracle_accuracy
        ));
    }
    ctx.say(format!("{} -> {}", kind.name(), p.display()));
    Ok(())
}

fn predict(ctx: &Ctx, a: &PredictArgs) -> Result<()> {
    let store = ModelStore::load(&a.store)?;
    let stream = ingest_features(&a.stream)?;
    let use_train = match a.split.as_str() {
        "test" => false,
        "train" => true,
        other => return Err(Error::InvalidConfig(format!("split must be train or test, got '{other}'"))),
    };
    let missing = |what: &str| Error::IncompleteStore(format!("store has no {what} block"));
    let selector: &dyn DomainSelector = match a.selector {
        RouteArg::Mdfn => store.mdfn.as_ref().ok_or_else(|| missing("mdfn"))?,
        RouteArg::Nmc => store.nmc.as_ref().ok_or_else(|| missing("nmc"))?,
        RouteArg::Kmeans => store.kmeans.as_ref().ok_or_else(|| missing("kmeans"))?,
        RouteArg::Auto => {
            if let Some(m) = &store.mdfn {
                m
            } else if let Some(m) = &store.nmc {
                m
            } else {
                store.kmeans.as_ref().ok_or_else(|| missing("selector"))?
            }
        }
    };
    let t = selector.n_domains().max(stream.n_domains());
    let mut csv = String::from("domain,row,predicted\n");
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (tau, split) in stream.domains.iter().enumerate() {
        let batch = if use_train { &split.train } else { &split.test };
        let p = selector.select(batch.levels())?;
        for (i, d) in p.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{}", tau + 1, i, d.display_number());
        }
        truth.extend_from_slice(batch.labels());
        pred.extend(p);
    }
    let m = compute_selection_metrics(&truth, &pred, t)?;
    ctx.write("predictions.csv", &csv)?;
    ctx.write_json("predict", &m)?;
    ctx.say(format!("S_T={:.4} over {} samples", m.accuracy, truth.len()));
    Ok(())
}

fn compare(ctx: &Ctx, a: &StreamArg) -> Result<()> {
    let stream = ctx.stream(a)?;
    let report = compare_selectors(&stream, &ctx.cfg.harness_config())?;
    ctx.write("comparison.csv", &comparison_to_csv(&report))?;
    ctx.write_json("compare", &report)?;
    let mut text =
        format!("{:<16}{:>8}{:>8}{:>8}{:>12}{:>12}\n", "selector", "S_T", "A_T", "oracle", "memory %", "extra %");
    for r in &report.rows {
        let _ = writeln!(
            text,
            "{:<16}{:>8.4}{:>8.4}{:>8.4}{:>12.6}{:>12.6}",
            r.selector,
            r.selection_accuracy,
            r.accuracy_proxy,
            r.oracle_accuracy,
            100.0 * r.memory_ratio,
            100.0 * r.extra_ratio
        );
    }
    ctx.say(text.trim_end());
    Ok(())
}

fn inspect(ctx: &Ctx, a: &InspectArgs) -> Result<()> {
    let store = ModelStore::load(&a.store)?;
    let p = &store.provenance;
    let mut text = format!(
        "store: {} domains, seed={}, config_hash={}\n",
        store.domains.len(),
        p.seed,
        if p.config_hash.is_empty() { "-" } else { &p.config_hash }
    );
    if let Some(m) = &store.mdfn {
        let _ = writeln!(text, "mdfn: {} domains, d={}, {} parameters", m.n_domains(), m.dim, m.param_count());
    }
    let _ = write!(text, "{}", store.summary(ctx.cfg.harness.backbone_params));
    // inspect only reads; it always prints
    println!("{text}");
    Ok(())
}
