use std::collections::BTreeMap;
use std::io::{BufRead, IsTerminal, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pwm_core::agreement::{
    agreement_report, band, fleiss_kappa, judge, leave_one_out, aggregate_wins, validation_sample, AgreementBand,
    AgreementReport, AnnotationMatrix, ContributionReport, Verdict, WinsReport,
};
use pwm_core::classifier::{
    majority_baseline_f1, split_indices, train_classifier, BackendId, ClassifierRouting, ModelVariant, Route,
    TrainConfig,
};
use pwm_core::engine::{Engine, EngineOptions, TemplatePatch};
use pwm_core::gateway::Gateway;
use pwm_core::library::{Library, PromptFilter};
use pwm_core::model::{Classification, Dimension, Vocabulary};
use pwm_core::optimizer::Suggestion;
use pwm_core::template::{Binding, VariableSpec};
use pwm_core::Error;
use pwm_service::{to_body, ApiError, ServiceConfig, DEFAULT_DEV_ORIGIN, DEFAULT_PORT};

use crate::args::*;
use crate::config::CliConfig;
use crate::output::{suggestion_line, Human};

pub enum Failure {
    /// Bad flags or configuration: exit code 2.
    Usage(String),
    /// Engine refused the operation: exit code 1.
    Domain(ApiError),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e.into())
    }
}

type Outcome = Result<(), Failure>;

pub struct Ctx {
    pub config: CliConfig,
}

impl Ctx {
    fn emit<T: Serialize + Human>(&self, value: &T) {
        match self.config.format {
            Format::Json => println!("{}", to_body(value)),
            Format::Human => print!("{}", value.human()),
        }
    }

    fn options(&self) -> Result<EngineOptions, Failure> {
        let options = EngineOptions::from_env()?;
        Ok(if self.config.offline { options.with_gateway(Gateway::offline()) } else { options })
    }

    fn new_library(&self, sample: bool) -> Library {
        let mut lib = if sample { Library::sample() } else { Library::default() };
        // Trainable routes only make sense once a model is registered.
        lib.config.classifier.routing = ClassifierRouting::uniform(BackendId::Heuristic);
        if let Some(v) = &self.config.vocabulary {
            lib.config.vocabulary_path = Some(v.to_string_lossy().into_owned());
        }
        lib
    }

    fn engine(&self) -> Result<Engine, Failure> {
        let path = &self.config.library;
        if !path.exists() {
            if std::io::stdin().is_terminal() && std::io::stderr().is_terminal() && self.config.format == Format::Human {
                eprint!("library {} does not exist. Create an empty one? [y/N] ", path.display());
                let mut answer = String::new();
                std::io::stdin().read_line(&mut answer).map_err(Error::from)?;
                if answer.trim().eq_ignore_ascii_case("y") {
                    return Ok(Engine::create(path, self.new_library(false), self.options()?)?);
                }
            }
            return Err(Failure::Domain(
                Error::NotFound { kind: "library", id: format!("{} (run `pwm library init`)", path.display()) }.into(),
            ));
        }
        let engine = Engine::open(path, self.options()?)?;
        for w in engine.startup_warnings() {
            log::info!("{w}");
        }
        Ok(engine)
    }
}

fn read_text(arg: Option<String>) -> Result<String, Failure> {
    match arg {
        Some(t) if t != "-" => Ok(t),
        _ => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(Error::from)?;
            Ok(s.trim_end_matches(['\n', '\r']).to_string())
        }
    }
}

pub fn run(ctx: &Ctx, command: Command) -> Outcome {
    match command {
        Command::Prompt(c) => prompt(ctx, c),
        Command::Template(c) => template(ctx, c),
        Command::Library(c) => library(ctx, c),
        Command::Classify { id, backend } => {
            let mut engine = ctx.engine()?;
            let r = engine.classify(&id, backend)?;
            engine.save()?;
            ctx.emit(&r);
            Ok(())
        }
        Command::Classifier(ClassifierCmd::Train { dataset, dimension, variant, seed, out, register }) => {
            train(ctx, &dataset, dimension, variant, seed, out, register)
        }
        Command::Agreement(c) => agreement(ctx, c),
        Command::Serve(args) => serve(ctx, args),
    }
}

// ---------------------------------------------------------------------------
// prompts

fn prompt(ctx: &Ctx, cmd: PromptCmd) -> Outcome {
    let mut engine = ctx.engine()?;
    match cmd {
        PromptCmd::Add { text } => {
            let r = engine.add_prompt(&read_text(text)?)?;
            engine.save()?;
            ctx.emit(&r);
        }
        PromptCmd::Edit { id, text } => {
            let r = engine.update_prompt(&id, &read_text(text)?)?;
            engine.save()?;
            ctx.emit(&r);
        }
        PromptCmd::Rm { id } => {
            let r = engine.delete_prompt(&id)?;
            engine.save()?;
            ctx.emit(&r);
        }
        PromptCmd::Show { id } => ctx.emit(&engine.get_prompt(&id)?),
        PromptCmd::List(f) => {
            let filter = PromptFilter { intent: f.intent, role: f.role, sdlc: f.sdlc, ptype: f.ptype };
            ctx.emit(&engine.list_prompts(&filter)?);
        }
        PromptCmd::Similar { id, threshold } => ctx.emit(&engine.similar(&id, threshold)?),
        PromptCmd::Optimize { id, apply_all, kinds, list } => {
            let r = engine.optimize(&id)?;
            engine.save()?;
            if list {
                ctx.emit(&r);
            } else if apply_all {
                let kinds = (!kinds.is_empty()).then_some(kinds.as_slice());
                engine.accept_all(&id, kinds)?;
                engine.save()?;
                ctx.emit(&engine.get_prompt(&id)?);
            } else {
                review(&mut engine, &id, &mut std::io::stdin().lock())?;
                ctx.emit(&engine.get_prompt(&id)?);
            }
        }
    }
    Ok(())
}

/// Interactive accept/reject loop. Questions go to stderr so stdout stays
/// machine-readable. Nothing is applied without an explicit "a".
fn review(engine: &mut Engine, id: &str, input: &mut dyn BufRead) -> Outcome {
    let mut skipped: Vec<String> = Vec::new();
    let mut stderr = std::io::stderr();
    loop {
        let current = engine.get_prompt(id)?;
        let Some(next) = current.suggestions.iter().find(|s| !skipped.contains(&s.id)).cloned() else {
            break;
        };
        let _ = writeln!(stderr, "\n{}", current.prompt.text);
        let _ = writeln!(stderr, "  {}", suggestion_line(&next, Some(&current.prompt.text)));
        match ask(input, &mut stderr)? {
            Answer::Accept => {
                accept_one(engine, &next)?;
            }
            Answer::Reject => {
                engine.reject(&next.id)?;
                engine.save()?;
            }
            Answer::Skip => skipped.push(next.id.clone()),
            Answer::Quit => break,
        }
    }
    Ok(())
}

fn accept_one(engine: &mut Engine, s: &Suggestion) -> Outcome {
    let r = engine.accept(&s.id)?;
    engine.save()?;
    if let Some(t) = r.template {
        eprintln!("created template {}", t.id);
    }
    Ok(())
}

enum Answer {
    Accept,
    Reject,
    Skip,
    Quit,
}

fn ask(input: &mut dyn BufRead, out: &mut dyn Write) -> Result<Answer, Failure> {
    loop {
        let _ = write!(out, "  [a]ccept, [r]eject, [s]kip, [q]uit? ");
        let _ = out.flush();
        let mut line = String::new();
        // End of input quits; it never counts as consent.
        if input.read_line(&mut line).map_err(Error::from)? == 0 {
            let _ = writeln!(out);
            return Ok(Answer::Quit);
        }
        match line.trim().to_ascii_lowercase().as_str() {
            "a" | "accept" | "y" => return Ok(Answer::Accept),
            "r" | "reject" | "n" => return Ok(Answer::Reject),
            "s" | "skip" | "" => return Ok(Answer::Skip),
            "q" | "quit" => return Ok(Answer::Quit),
            _ => continue,
        }
    }
}

// ---------------------------------------------------------------------------
// templates

fn template(ctx: &Ctx, cmd: TemplateCmd) -> Outcome {
    let mut engine = ctx.engine()?;
    match cmd {
        TemplateCmd::Extract { prompt_id, mode } => {
            let r = engine.extract_template(&prompt_id, mode)?;
            engine.save()?;
            ctx.emit(&r);
        }
        TemplateCmd::Render { id, vars, lenient } => {
            let mut binding = Binding::new();
            for (k, v) in vars {
                if binding.insert(k.clone(), v).is_some() {
                    return Err(Failure::Usage(format!("--var {k} given more than once")));
                }
            }
            ctx.emit(&engine.render_template(&id, &binding, !lenient)?);
        }
        TemplateCmd::List => ctx.emit(&engine.list_templates()),
        TemplateCmd::Show { id } => ctx.emit(&engine.get_template(&id)?),
        TemplateCmd::Edit { id, body, variables, renames } => {
            if body.is_none() && variables.is_none() && renames.is_empty() {
                return Err(Failure::Usage("nothing to edit: pass --body, --variables or --rename".into()));
            }
            let variables: Option<Vec<VariableSpec>> = variables
                .map(|v| serde_json::from_str(&v).map_err(|e| Failure::Usage(format!("--variables: {e}"))))
                .transpose()?;
            let mut patch = TemplatePatch { body, variables };
            if !renames.is_empty() {
                let current = engine.get_template(&id)?;
                let mut body = patch.body.take().unwrap_or(current.body);
                let mut vars = patch.variables.take().unwrap_or(current.variables);
                for (old, new) in renames {
                    let spec = vars.iter_mut().find(|v| v.name == old).ok_or(Error::UnknownVariable(old.clone()))?;
                    spec.name = new.clone();
                    body = body.replace(&format!("{{{{{old}}}}}"), &format!("{{{{{new}}}}}"));
                }
                patch = TemplatePatch { body: Some(body), variables: Some(vars) };
            }
            let t = engine.edit_template(&id, patch)?;
            engine.save()?;
            ctx.emit(&t);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// library

#[derive(Debug, Serialize)]
struct FileReport {
    path: PathBuf,
    prompts: usize,
    templates: usize,
}

impl Human for FileReport {
    fn human(&self) -> String {
        format!("{}: {} prompts, {} templates\n", self.path.display(), self.prompts, self.templates)
    }
}

fn file_report(path: &Path, lib: &Library) -> FileReport {
    FileReport { path: path.to_path_buf(), prompts: lib.prompts.len(), templates: lib.templates.len() }
}

fn library(ctx: &Ctx, cmd: LibraryCmd) -> Outcome {
    match cmd {
        LibraryCmd::Init { sample, force } => {
            let path = &ctx.config.library;
            if path.exists() && !force {
                return Err(Error::InvalidParameter(format!("{} already exists; pass --force to overwrite", path.display()))
                    .into());
            }
            let engine = Engine::create(path, ctx.new_library(sample), ctx.options()?)?;
            ctx.emit(&file_report(path, engine.library()));
        }
        LibraryCmd::Dedup { threshold, dry_run } => {
            let mut engine = ctx.engine()?;
            if dry_run {
                ctx.emit(&engine.dedup_plan(threshold)?);
            } else {
                let r = engine.dedup(threshold)?;
                engine.save()?;
                ctx.emit(&r);
            }
        }
        LibraryCmd::Summary => ctx.emit(&ctx.engine()?.summary()),
        LibraryCmd::Export { path } => {
            let engine = ctx.engine()?;
            if path.as_os_str() == "-" {
                print!("{}", engine.export_json());
            } else {
                engine.export(&path)?;
                ctx.emit(&file_report(&path, engine.library()));
            }
        }
        LibraryCmd::Import { path } => {
            let mut engine = ctx.engine()?;
            engine.import(&path)?;
            engine.save()?;
            ctx.emit(&file_report(&ctx.config.library, engine.library()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// classifier training

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabeledLine {
    text: String,
    labels: BTreeMap<Dimension, String>,
}

/// A library file (classified prompts) or JSON lines of {text, labels}.
fn load_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<(String, Classification)>, Failure> {
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    if let Ok(lib) = Library::from_json(&text) {
        return Ok(lib
            .prompts_in_order()
            .into_iter()
            .filter_map(|p| p.classification.clone().map(|c| (p.text.clone(), c)))
            .collect());
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: LabeledLine = serde_json::from_str(line).map_err(|e| {
            Failure::from(Error::Parse { line: i + 1, column: e.column(), message: e.to_string() })
        })?;
        let conf = Dimension::ALL.iter().map(|&d| (d, 1.0)).collect();
        out.push((row.text, Classification::from_names(vocab, &row.labels, conf, "dataset")?));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct TrainReport {
    dimension: Dimension,
    variant: ModelVariant,
    path: PathBuf,
    train_size: usize,
    test_size: usize,
    heldout_weighted_f1: f64,
    majority_baseline_f1: f64,
    registered: bool,
}

impl Human for TrainReport {
    fn human(&self) -> String {
        let mut s = format!(
            "{} {} model -> {}\n  train {} / test {}\n  held-out weighted F1 {:.4} (majority baseline {:.4})\n",
            self.dimension,
            self.variant.as_str(),
            self.path.display(),
            self.train_size,
            self.test_size,
            self.heldout_weighted_f1,
            self.majority_baseline_f1
        );
        if self.registered {
            s.push_str("  registered in the library\n");
        }
        s
    }
}

fn train(
    ctx: &Ctx,
    dataset: &Path,
    dimension: Dimension,
    variant: ModelVariant,
    seed: u64,
    out: Option<PathBuf>,
    register: bool,
) -> Outcome {
    let vocab = match &ctx.config.vocabulary {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::default(),
    };
    let data = load_dataset(dataset, &vocab)?;
    let config = TrainConfig { seed, ..TrainConfig::default() };
    let model = train_classifier(&data, dimension, variant, &vocab, &config)?;
    let (train_idx, test_idx) = split_indices(data.len(), seed);
    let label = |i: &usize| data[*i].1.label(dimension).name.clone();
    let baseline = majority_baseline_f1(
        &train_idx.iter().map(label).collect::<Vec<_>>(),
        &test_idx.iter().map(label).collect::<Vec<_>>(),
    )?;
    let path = out.unwrap_or_else(|| PathBuf::from(format!("model-{}.json", dimension.as_str().to_ascii_lowercase())));
    model.save(&path)?;
    if register {
        let mut lib = Library::load(&ctx.config.library)?;
        let stored = std::path::absolute(&path).map_err(Error::from)?;
        lib.config.classifier.model_paths.insert(dimension, stored.to_string_lossy().into_owned());
        lib.config.classifier.routing.routes.insert(dimension, Route { backend: BackendId::Trainable, variant: Some(variant) });
        lib.save(&ctx.config.library)?;
    }
    ctx.emit(&TrainReport {
        dimension,
        variant,
        path,
        train_size: model.train_size,
        test_size: model.test_size,
        heldout_weighted_f1: model.heldout_weighted_f1,
        majority_baseline_f1: baseline,
        registered: register,
    });
    Ok(())
}

// ---------------------------------------------------------------------------
// agreement

fn read_matrix(path: &Path) -> Result<AnnotationMatrix, Failure> {
    let file = std::fs::File::open(path).map_err(Error::from)?;
    Ok(AnnotationMatrix::from_csv(file)?)
}

fn tag(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn band_name(b: AgreementBand) -> String {
    serde_json::to_value(b).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

#[derive(Debug, Serialize)]
struct KappaReport {
    kappa: f64,
    band: AgreementBand,
    items: usize,
    raters: usize,
    categories: usize,
}

impl Human for KappaReport {
    fn human(&self) -> String {
        format!(
            "kappa {:.4}  {}\n  {} items, {} raters, {} categories\n",
            self.kappa,
            band_name(self.band),
            self.items,
            self.raters,
            self.categories
        )
    }
}

impl Human for AgreementReport {
    fn human(&self) -> String {
        let mut s = String::new();
        for (tag, k) in &self.per_category_kappa {
            s.push_str(&format!("{k:>8.4}  {tag}\n"));
        }
        s.push_str(&format!("{:>8.4}  total  {}\n", self.total_kappa, band_name(self.band)));
        s
    }
}

#[derive(Debug, Serialize)]
struct LooReport {
    matrices: BTreeMap<String, ContributionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wins: Option<WinsReport>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:+.4}"))
}

impl Human for LooReport {
    fn human(&self) -> String {
        let mut s = String::new();
        for (tag, r) in &self.matrices {
            s.push_str(&format!("{tag}: kappa {:.4}\n", r.k_all));
            for (rater, d) in &r.delta {
                s.push_str(&format!("  {:>8}  {rater}\n", opt(*d)));
            }
            if let Some(w) = &r.winner {
                s.push_str(&format!("  largest contribution: {w}\n"));
            }
        }
        if let Some(w) = &self.wins {
            s.push_str("category wins:\n");
            for (rater, n) in &w.wins {
                s.push_str(&format!("  {n:>3}  {rater}  (delta sum {:+.4})\n", w.total_delta[rater]));
            }
            s.push_str(&format!("winner: {}\n", w.winner));
        }
        s
    }
}

#[derive(Debug, Serialize)]
struct ValidateReport {
    sample_size: usize,
    error_count: usize,
    error_rate: f64,
    verdict: Verdict,
}

impl Human for ValidateReport {
    fn human(&self) -> String {
        let v = if self.verdict == Verdict::Pass { "PASS" } else { "FAIL" };
        format!("{v}: {} errors in {} ({:.1}%, threshold < 5%)\n", self.error_count, self.sample_size, self.error_rate * 100.0)
    }
}

fn agreement(ctx: &Ctx, cmd: AgreementCmd) -> Outcome {
    match cmd {
        AgreementCmd::Kappa { matrices } if matrices.len() == 1 => {
            let m = read_matrix(&matrices[0])?;
            let kappa = fleiss_kappa(&m)?;
            ctx.emit(&KappaReport {
                kappa,
                band: band(kappa),
                items: m.items().len(),
                raters: m.raters().len(),
                categories: m.categories().len(),
            });
        }
        AgreementCmd::Kappa { matrices } => {
            let mut all = BTreeMap::new();
            for p in &matrices {
                if all.insert(tag(p), read_matrix(p)?).is_some() {
                    return Err(Failure::Usage(format!("two matrices named {}", tag(p))));
                }
            }
            ctx.emit(&agreement_report(&all)?);
        }
        AgreementCmd::Loo { matrices } => {
            let mut reports = BTreeMap::new();
            for p in &matrices {
                if reports.insert(tag(p), leave_one_out(&read_matrix(p)?)?).is_some() {
                    return Err(Failure::Usage(format!("two matrices named {}", tag(p))));
                }
            }
            let wins = if reports.len() > 1 {
                let deltas = reports.iter().map(|(k, r)| (k.clone(), r.delta.clone())).collect();
                Some(aggregate_wins(&deltas)?)
            } else {
                None
            };
            ctx.emit(&LooReport { matrices: reports, wins });
        }
        AgreementCmd::Validate { n, errors } => {
            let verdict = judge(n, errors)?;
            ctx.emit(&ValidateReport { sample_size: n, error_count: errors, error_rate: errors as f64 / n as f64, verdict });
        }
        AgreementCmd::Sample { dataset, n, seed } => {
            let text = std::fs::read_to_string(&dataset).map_err(Error::from)?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            for line in validation_sample(&lines, n, seed)? {
                println!("{line}");
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// serve

fn serve(ctx: &Ctx, args: ServeArgs) -> Outcome {
    let mut cors_origins = args.cors_origins;
    if args.dev {
        cors_origins.insert(0, DEFAULT_DEV_ORIGIN.to_string());
    }
    let host = args.host.unwrap_or(std::net::IpAddr::from([127, 0, 0, 1]));
    let config = ServiceConfig {
        bind: std::net::SocketAddr::new(host, args.port.unwrap_or(DEFAULT_PORT)),
        token: args.token,
        cors_origins,
    };
    config.validate().map_err(Failure::Usage)?;
    let engine = ctx.engine()?;
    eprintln!("serving {} on http://{}", ctx.config.library.display(), config.bind);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(Error::from)?;
    runtime.block_on(pwm_service::serve(engine, config)).map_err(Error::from)?;
    Ok(())
}
