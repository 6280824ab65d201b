//! `posterpanel` command-line driver.
//!
//! Exit codes: 0 on success, 1 when a pipeline stage fails, 2 for usage
//! errors (bad flags, missing or unparsable input files).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use posterpanel::canvas::{parse_document, serialize_document};
use posterpanel::discussion::Discussion;
use posterpanel::feedback::{FeedbackUnit, ThemeDescriptor};
use posterpanel::gateway::{decode_png, AssetStore};
use posterpanel::persona::{self, BriefPage, MarketingBrief};
use posterpanel::theme::{self, TemplateIndex, DEFAULT_OVERLAP_ROUNDS};
use posterpanel::{CanvasDocument, Gateway};
use posterpanel_service::pipeline::{self, Review};
use posterpanel_service::{build_gateway, BackendSpec, ServiceConfig, SessionManager, TemplateLibrary};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "posterpanel", version, about = "Persona-driven feedback for poster designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// live, fallback, or scripted:<fixture dir>. Overrides the config file.
    #[arg(long)]
    backend: Option<String>,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Builds the panel, collects feedback, and auto-discusses every conflict.
    Run {
        /// Brief: a text file or a PNG page image.
        brief: PathBuf,
        /// Draft poster in canvas JSON.
        draft: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Round limit per discussion.
        #[arg(long)]
        max_rounds: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Embeds every template in a directory and writes the index file.
    IngestTemplates {
        /// Directory of template canvas JSON files.
        dir: PathBuf,
        /// Index file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Prints the ids of the k templates closest to a tone and color.
    QueryThemes {
        #[arg(long)]
        tone: String,
        #[arg(long)]
        color: String,
        /// Number of results.
        #[arg(short, long)]
        k: Option<usize>,
        /// Index file from ingest-templates.
        #[arg(long)]
        index: PathBuf,
        /// Print ids with similarities as JSON.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Serves the session API.
    Serve {
        /// Listen address; port 0 picks a free port.
        #[arg(long)]
        bind: Option<String>,
        /// Where sessions and assets are stored.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Template corpus directory.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Prebuilt index for the corpus.
        #[arg(long)]
        index: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Applies an item or conclusion ref from a run directory to its draft.
    Apply {
        /// Output directory of an earlier `run`.
        run_dir: PathBuf,
        /// Item id such as `p1.title`, or `conclusion:<discussion>:<round>`.
        reference: String,
        /// Template id, for theme refs.
        #[arg(long)]
        template: Option<String>,
        /// Template corpus directory, for theme refs.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Where to write the edited canvas JSON.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Run {
            brief,
            draft,
            out,
            max_rounds,
            common,
        } => cmd_run(&brief, &draft, &out, max_rounds, &common),
        Command::IngestTemplates { dir, out, common } => cmd_ingest_templates(&dir, &out, &common),
        Command::QueryThemes {
            tone,
            color,
            k,
            index,
            json,
            common,
        } => cmd_query_themes(ThemeDescriptor { tone, color }, k, &index, json, &common),
        Command::Serve {
            bind,
            data_dir,
            templates,
            index,
            common,
        } => cmd_serve(bind, data_dir, templates, index, &common),
        Command::Apply {
            run_dir,
            reference,
            template,
            templates,
            out,
            common,
        } => cmd_apply(&run_dir, &reference, template.as_deref(), templates.as_deref(), &out, &common),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<ServiceConfig> {
    let mut cfg = match &common.config {
        Some(p) => ServiceConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => ServiceConfig::default(),
    };
    if let Some(b) = &common.backend {
        cfg.backend = b.parse::<BackendSpec>().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn gateway(cfg: &ServiceConfig, assets: AssetStore) -> Result<Gateway> {
    build_gateway(&cfg.backend, cfg, assets).map_err(|e| CliError::Usage(e.to_string()))
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn read_document(path: &Path) -> Result<CanvasDocument> {
    let bytes = read_input(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{} is not UTF-8", path.display())))?;
    parse_document(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_brief(gw: &Gateway, path: &Path) -> Result<MarketingBrief> {
    let bytes = read_input(path)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "brief".into());
    let page = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let img = decode_png(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        BriefPage::Image(gw.assets().put(&img).map_err(CliError::runtime)?)
    } else {
        BriefPage::Text(String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{} is not UTF-8", path.display())))?)
    };
    let brief = MarketingBrief {
        pages: vec![page],
        source_name: name,
    };
    brief.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(brief)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

#[derive(Serialize)]
struct FeedbackFile<'a> {
    items: &'a [posterpanel::feedback::FeedbackItem],
    failures: &'a [posterpanel::feedback::PersonaFailure],
    units: &'a [FeedbackUnit],
}

fn cmd_run(brief: &Path, draft: &Path, out: &Path, max_rounds: Option<u32>, common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(r) = max_rounds {
        cfg.max_rounds = r;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !brief.is_file() {
        return Err(CliError::Usage(format!("no brief file at {}", brief.display())));
    }
    let doc = read_document(draft)?;
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let discussions_dir = out.join("discussions");
    if discussions_dir.exists() {
        fs::remove_dir_all(&discussions_dir).map_err(CliError::runtime)?;
    }
    let assets = AssetStore::on_disk(out.join("assets")).map_err(CliError::runtime)?;
    let gw = gateway(&cfg, assets)?;
    let brief = read_brief(&gw, brief)?;

    let (extract, set) = persona::construct_panel(&gw, &brief).map_err(|e| CliError::Runtime(format!("personas: {e}")))?;
    let review: Review = pipeline::review(&gw, &doc, &set, &extract).map_err(|e| CliError::Runtime(format!("feedback: {e}")))?;
    let (discussions, units) =
        pipeline::auto_discuss(&gw, &review, &set, &extract, &doc, cfg.max_rounds).map_err(|e| CliError::Runtime(format!("discussion: {e}")))?;

    write_file(&out.join("draft.json"), serialize_document(&doc).as_bytes())?;
    write_json(&out.join("extract.json"), &extract)?;
    write_json(&out.join("personas.json"), &set)?;
    write_json(
        &out.join("feedback.json"),
        &FeedbackFile {
            items: &review.items,
            failures: &review.failures,
            units: &units,
        },
    )?;
    for d in &discussions {
        write_json(&discussions_dir.join(format!("{}.json", d.unit_id.replace(':', "-"))), d)?;
    }
    for f in &review.failures {
        eprintln!("warning: persona {} gave no feedback: {}", f.persona_id, f.message);
    }
    println!(
        "{} personas, {} items, {} units, {} discussions -> {}",
        set.personas.len(),
        review.items.len(),
        units.len(),
        discussions.len(),
        out.display()
    );
    Ok(())
}

fn cmd_ingest_templates(dir: &Path, out: &Path, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let gw = gateway(&cfg, AssetStore::in_memory())?;
    let report = theme::ingest_templates(&gw, dir).map_err(CliError::runtime)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    report.index.save(out).map_err(CliError::runtime)?;
    println!("{} templates -> {}", report.index.len(), out.display());
    Ok(())
}

fn cmd_query_themes(descriptor: ThemeDescriptor, k: Option<usize>, index: &Path, as_json: bool, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let k = k.unwrap_or(cfg.k);
    if k == 0 {
        return Err(CliError::Usage("k must be at least 1".into()));
    }
    if !index.is_file() {
        return Err(CliError::Usage(format!("no index file at {}", index.display())));
    }
    let index = TemplateIndex::load(index).map_err(|e| CliError::Usage(e.to_string()))?;
    let gw = gateway(&cfg, AssetStore::in_memory())?;
    let ranked = theme::query_templates(&gw, &index, &descriptor, k).map_err(CliError::runtime)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&ranked).map_err(CliError::runtime)?);
    } else {
        for r in &ranked.ranked {
            println!("{}", r.template_id);
        }
    }
    Ok(())
}

fn cmd_serve(bind: Option<String>, data_dir: Option<PathBuf>, templates: Option<PathBuf>, index: Option<PathBuf>, common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(b) = bind {
        cfg.bind = b;
    }
    if let Some(d) = data_dir {
        cfg.data_dir = d;
    }
    if templates.is_some() {
        cfg.templates = templates;
    }
    if index.is_some() {
        cfg.index = index;
    }
    fs::create_dir_all(&cfg.data_dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", cfg.data_dir.display())))?;
    let assets = AssetStore::on_disk(cfg.data_dir.join("assets")).map_err(CliError::runtime)?;
    // The live backend holds a blocking HTTP client, which must be created
    // and dropped outside the async runtime.
    let gw = Arc::new(gateway(&cfg, assets)?);
    let library = match &cfg.templates {
        Some(dir) => Some(TemplateLibrary::load(&gw, dir, cfg.index.as_deref()).map_err(CliError::runtime)?),
        None => None,
    };
    let mgr = Arc::new(SessionManager::open(cfg.clone(), gw.clone(), library).map_err(CliError::runtime)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::runtime)?;
    let served = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.bind)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {}: {e}", cfg.bind)))?;
        let addr = listener.local_addr().map_err(CliError::runtime)?;
        println!("listening on http://{addr}");
        posterpanel_service::api::serve(mgr, listener).await.map_err(CliError::runtime)
    });
    rt.shutdown_timeout(std::time::Duration::from_secs(5));
    drop(gw);
    served
}

fn load_run(run_dir: &Path) -> Result<(CanvasDocument, Vec<FeedbackUnit>, Vec<Discussion>)> {
    let doc = read_document(&run_dir.join("draft.json"))?;
    let feedback: serde_json::Value = serde_json::from_slice(&read_input(&run_dir.join("feedback.json"))?)
        .map_err(|e| CliError::Usage(format!("feedback.json: {e}")))?;
    let units: Vec<FeedbackUnit> =
        serde_json::from_value(feedback["units"].clone()).map_err(|e| CliError::Usage(format!("feedback.json units: {e}")))?;
    let mut discussions = Vec::new();
    let dir = run_dir.join("discussions");
    if dir.is_dir() {
        let mut paths: Vec<_> = fs::read_dir(&dir)
            .map_err(CliError::runtime)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let d: Discussion = serde_json::from_slice(&read_input(&p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            discussions.push(d);
        }
    }
    Ok((doc, units, discussions))
}

fn cmd_apply(run_dir: &Path, reference: &str, template: Option<&str>, templates: Option<&Path>, out: &Path, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let (doc, units, discussions) = load_run(run_dir)?;
    // Generated images go next to the output document, leaving the run
    // directory untouched.
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let assets = AssetStore::on_disk(out_dir.join("assets")).map_err(CliError::runtime)?;
    let gw = gateway(&cfg, assets)?;
    let resolved = pipeline::resolve_ref(reference, &units, &discussions, &doc).map_err(|e| match e {
        pipeline::PipelineError::UnknownRef(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;
    let corpus: BTreeMap<String, CanvasDocument> = match (template, templates) {
        (Some(_), Some(dir)) => theme::load_corpus(dir).map_err(|e| CliError::Usage(e.to_string()))?.0,
        (Some(_), None) => return Err(CliError::Usage("--template needs --templates <dir>".into())),
        _ => BTreeMap::new(),
    };
    let chosen = match template {
        Some(id) => Some((
            id,
            corpus.get(id).ok_or_else(|| CliError::Usage(format!("unknown template `{id}`")))?,
        )),
        None => None,
    };
    let applied = pipeline::apply_resolved(&gw, &doc, &resolved, chosen, DEFAULT_OVERLAP_ROUNDS).map_err(|e| match e {
        pipeline::PipelineError::TemplateRequired => CliError::Usage(format!("{e}; pass --template and --templates")),
        other => CliError::Runtime(other.to_string()),
    })?;
    write_file(out, serialize_document(&applied.document).as_bytes())?;
    let summary = json!({
        "ref": resolved.reference,
        "unit_id": resolved.unit_id,
        "target": resolved.target,
        "template_id": applied.template_id,
    });
    println!("{summary}");
    Ok(())
}
