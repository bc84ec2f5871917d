use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pwm_core::classifier::{BackendId, ModelVariant};
use pwm_core::model::Dimension;
use pwm_core::optimizer::SuggestionKind;
use pwm_core::template::ExtractionMode;

#[derive(Debug, Parser)]
#[command(name = "pwm", version, about = "Manage, optimize and templatize a library of LLM prompts")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Library file [default: from .pwm.toml, else pwm-library.json]
    #[arg(long, short = 'l', global = true, env = "PWM_LIBRARY")]
    pub library: Option<PathBuf>,
    /// Taxonomy vocabulary recorded in a newly created library
    #[arg(long, global = true)]
    pub vocabulary: Option<PathBuf>,
    /// Never contact the LLM gateway
    #[arg(long, global = true)]
    pub offline: bool,
    #[arg(long, value_enum, global = true)]
    pub format: Option<Format>,
    /// Config file [default: ./.pwm.toml, then ~/.pwm.toml]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Human,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add, edit, inspect and optimize prompts
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Extract, render and edit templates
    #[command(subcommand)]
    Template(TemplateCmd),
    /// Library-wide operations
    #[command(subcommand)]
    Library(LibraryCmd),
    /// (Re)classify a stored prompt
    Classify {
        id: String,
        #[arg(long, value_parser = parse_backend)]
        backend: Option<BackendId>,
    },
    /// Train classifier models
    #[command(subcommand)]
    Classifier(ClassifierCmd),
    /// Inter-rater agreement tools
    #[command(subcommand)]
    Agreement(AgreementCmd),
    /// Run the local HTTP service
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum PromptCmd {
    /// Add a prompt; reads stdin when TEXT is omitted or "-"
    Add { text: Option<String> },
    /// Replace a prompt's text
    Edit { id: String, text: Option<String> },
    /// Delete a prompt
    Rm { id: String },
    /// Show a prompt with its pending suggestions
    Show { id: String },
    /// List prompts, optionally filtered by taxonomy label
    List(FilterArgs),
    /// Review optimization suggestions
    Optimize {
        id: String,
        /// Accept every pending suggestion without asking
        #[arg(long)]
        apply_all: bool,
        /// With --apply-all, only these kinds (repeatable)
        #[arg(long = "kind", value_parser = parse_kind, requires = "apply_all")]
        kinds: Vec<SuggestionKind>,
        /// Only print the pending suggestions
        #[arg(long, conflicts_with = "apply_all")]
        list: bool,
    },
    /// Prompts similar to the given one
    Similar {
        id: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub intent: Option<String>,
    #[arg(long)]
    pub role: Option<String>,
    #[arg(long)]
    pub sdlc: Option<String>,
    #[arg(long = "type")]
    pub ptype: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum TemplateCmd {
    /// Extract a template from a prompt and its similar prompts
    Extract {
        prompt_id: String,
        #[arg(long, value_parser = parse_mode, default_value = "aligned")]
        mode: ExtractionMode,
    },
    /// Render a template
    Render {
        id: String,
        /// Variable binding NAME=VALUE (repeatable)
        #[arg(long = "var", value_parser = parse_binding)]
        vars: Vec<(String, String)>,
        /// Leave unbound placeholders in place instead of failing
        #[arg(long)]
        lenient: bool,
    },
    List,
    Show { id: String },
    /// Edit a template; body and variable names must stay in one-to-one correspondence
    Edit {
        id: String,
        #[arg(long)]
        body: Option<String>,
        /// Replacement variable list as a JSON array of {name, description, example_values}
        #[arg(long)]
        variables: Option<String>,
        /// Rename a variable in body and table: OLD=NEW (repeatable)
        #[arg(long = "rename", value_parser = parse_binding)]
        renames: Vec<(String, String)>,
    },
}

#[derive(Debug, Subcommand)]
pub enum LibraryCmd {
    /// Create a new library file
    Init {
        /// Seed it with the bundled two-prompt sample
        #[arg(long)]
        sample: bool,
        /// Overwrite an existing file
        #[arg(long)]
        force: bool,
    },
    /// Remove near-duplicate prompts
    Dedup {
        #[arg(long)]
        threshold: Option<f64>,
        /// Report what would be removed without changing the file
        #[arg(long)]
        dry_run: bool,
    },
    Summary,
    Export { path: PathBuf },
    /// Replace the library with the contents of a file
    Import { path: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum ClassifierCmd {
    /// Train one dimension from a labelled dataset (JSON lines of
    /// {"text", "labels": {DIM: label}}, or a library file)
    Train {
        dataset: PathBuf,
        #[arg(long, value_parser = parse_dimension)]
        dimension: Dimension,
        #[arg(long, value_parser = parse_variant, default_value = "forest")]
        variant: ModelVariant,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Model output path [default: model-<dimension>.json]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record the model in the library's classifier settings
        #[arg(long)]
        register: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum AgreementCmd {
    /// Fleiss' kappa of one matrix, or per file plus pooled for several
    Kappa {
        #[arg(required = true)]
        matrices: Vec<PathBuf>,
    },
    /// Leave-one-out rater contributions; several files aggregate wins
    Loo {
        #[arg(required = true)]
        matrices: Vec<PathBuf>,
    },
    /// Pass/fail verdict for a manual validation sample
    Validate {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        errors: usize,
    },
    /// Draw a reproducible validation sample from a JSON-lines dataset
    Sample {
        dataset: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, short = 'p')]
    pub port: Option<u16>,
    /// Bind address [default: 127.0.0.1]
    #[arg(long)]
    pub host: Option<std::net::IpAddr>,
    /// Require `Authorization: Bearer <token>`
    #[arg(long, env = "PWM_SERVICE_TOKEN")]
    pub token: Option<String>,
    /// Allow the web UI dev server origin
    #[arg(long)]
    pub dev: bool,
    /// Extra allowed CORS origin (repeatable)
    #[arg(long = "cors-origin")]
    pub cors_origins: Vec<String>,
}

fn parse_binding(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected NAME=VALUE, got {s:?}")),
    }
}

fn parse_kind(s: &str) -> Result<SuggestionKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
        .map_err(|_| format!("unknown suggestion kind {s:?} (anonymization, spelling, grammar, template)"))
}

fn parse_backend(s: &str) -> Result<BackendId, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown backend {s:?} (heuristic, trainable, llm)"))
}

fn parse_mode(s: &str) -> Result<ExtractionMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown mode {s:?} (aligned, llm)"))
}

fn parse_dimension(s: &str) -> Result<Dimension, String> {
    s.parse().map_err(|e: pwm_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    s.parse().map_err(|e: pwm_core::Error| e.to_string())
}
