//! Human-readable rendering. The json format bypasses all of this and prints
//! the service body bytes instead.

use std::fmt::Write as _;

use pwm_core::engine::{
    ClassifyResponse, DeleteResponse, ExtractResponse, PromptList, PromptResponse, RenderResponse, SimilarList,
    SuggestionList, SuggestionResponse, TemplateList,
};
use pwm_core::library::{DedupReport, LibrarySummary};
use pwm_core::model::{Classification, Prompt};
use pwm_core::optimizer::Suggestion;
use pwm_core::template::Template;

pub trait Human {
    fn human(&self) -> String;
}

fn chars(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}

fn labels(c: &Option<Classification>) -> String {
    match c {
        Some(c) => format!("{} | {} | {} | {}", c.intent.name, c.role.name, c.sdlc.name, c.ptype.name),
        None => "unclassified".into(),
    }
}

fn one_line(text: &str, max: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= max {
        flat
    } else {
        format!("{}…", flat.chars().take(max - 1).collect::<String>())
    }
}

pub fn suggestion_line(s: &Suggestion, text: Option<&str>) -> String {
    let mut line = format!("{} {:<13} {:.2}", s.id, s.kind.as_str(), s.confidence);
    match text {
        Some(t) if s.kind.as_str() != "TEMPLATE" => {
            let _ = write!(line, "  {:?} -> {:?}", chars(t, s.span.start, s.span.end), s.replacement);
        }
        _ => {
            let _ = write!(line, "  -> {:?}", one_line(&s.replacement, 70));
        }
    }
    if !s.rationale.is_empty() {
        let _ = write!(line, "  ({})", s.rationale);
    }
    line
}

fn warnings(out: &mut String, warnings: &[String]) {
    for w in warnings {
        let _ = writeln!(out, "warning: {w}");
    }
}

fn prompt_block(p: &Prompt) -> String {
    format!("{}  [{}]\n  {}\n", p.id, labels(&p.classification), p.text.replace('\n', "\n  "))
}

impl Human for PromptResponse {
    fn human(&self) -> String {
        let mut out = prompt_block(&self.prompt);
        if self.suggestions.is_empty() {
            out.push_str("no pending suggestions\n");
        } else {
            let _ = writeln!(out, "{} pending suggestion(s):", self.suggestions.len());
            for s in &self.suggestions {
                let _ = writeln!(out, "  {}", suggestion_line(s, Some(&self.prompt.text)));
            }
        }
        warnings(&mut out, &self.warnings);
        out
    }
}

impl Human for PromptList {
    fn human(&self) -> String {
        if self.prompts.is_empty() {
            return "no prompts\n".into();
        }
        self.prompts
            .iter()
            .map(|p| format!("{}  {}  [{}]\n", p.id, one_line(&p.text, 60), labels(&p.classification)))
            .collect()
    }
}

impl Human for DeleteResponse {
    fn human(&self) -> String {
        format!("deleted {}\n", self.deleted)
    }
}

impl Human for SuggestionList {
    fn human(&self) -> String {
        let mut out = format!("{}: {} pending suggestion(s)\n", self.prompt_id, self.suggestions.len());
        for s in &self.suggestions {
            let _ = writeln!(out, "  {}", suggestion_line(s, None));
        }
        warnings(&mut out, &self.warnings);
        out
    }
}

impl Human for SuggestionResponse {
    fn human(&self) -> String {
        let verb = match self.suggestion.status {
            pwm_core::optimizer::SuggestionStatus::Accepted => "accepted",
            pwm_core::optimizer::SuggestionStatus::Rejected => "rejected",
            pwm_core::optimizer::SuggestionStatus::Pending => "pending",
        };
        let mut out = format!("{verb} {}\n", self.suggestion.id);
        if let Some(t) = &self.template {
            let _ = writeln!(out, "created template {}", t.id);
        }
        out.push_str(&prompt_block(&self.prompt));
        out
    }
}

impl Human for SimilarList {
    fn human(&self) -> String {
        if self.similar.is_empty() {
            return format!("nothing similar to {} at ≥ {:.2}\n", self.prompt_id, self.threshold);
        }
        self.similar
            .iter()
            .map(|s| {
                format!(
                    "{:.4}  {}  {}  (lev {:.3}, jac {:.3}, cos {:.3})\n",
                    s.score.ensemble,
                    s.prompt_id,
                    one_line(&s.text, 50),
                    s.score.levenshtein,
                    s.score.jaccard,
                    s.score.cosine
                )
            })
            .collect()
    }
}

impl Human for Template {
    fn human(&self) -> String {
        let mut out = format!("{}\n  {}\n", self.id, self.body);
        for v in &self.variables {
            let _ = write!(out, "  {{{{{}}}}}", v.name);
            if !v.description.is_empty() {
                let _ = write!(out, "  {}", v.description);
            }
            if !v.example_values.is_empty() {
                let _ = write!(out, "  e.g. {}", v.example_values.join(", "));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "  sources: {}", self.source_prompt_ids.join(", "));
        if !self.tombstoned_source_ids.is_empty() {
            let _ = writeln!(out, "  deleted sources: {}", self.tombstoned_source_ids.join(", "));
        }
        out
    }
}

impl Human for ExtractResponse {
    fn human(&self) -> String {
        let mut out = self.template.human();
        if let Some(r) = &self.fallback_reason {
            let _ = writeln!(out, "note: used aligned extraction ({r})");
        }
        out
    }
}

impl Human for TemplateList {
    fn human(&self) -> String {
        if self.templates.is_empty() {
            return "no templates\n".into();
        }
        self.templates.iter().map(|t| format!("{}  {}\n", t.id, one_line(&t.body, 70))).collect()
    }
}

impl Human for RenderResponse {
    fn human(&self) -> String {
        format!("{}\n", self.text)
    }
}

impl Human for ClassifyResponse {
    fn human(&self) -> String {
        let c = &self.classification;
        let mut out = format!("{}  ({})\n", self.prompt_id, c.classifier_id);
        for label in [&c.intent, &c.role, &c.sdlc, &c.ptype] {
            let conf = c.confidence_per_dimension.get(&label.dimension).copied().unwrap_or(0.0);
            let _ = writeln!(out, "  {:<7}{}  ({conf:.2})", label.dimension.as_str(), label.name);
        }
        warnings(&mut out, &self.warnings);
        out
    }
}

impl Human for LibrarySummary {
    fn human(&self) -> String {
        let mut out = format!("{} prompts, {} classified\n", self.prompt_count, self.classified_count);
        if !self.topics.is_empty() {
            let _ = writeln!(out, "topics: {}", self.topics.join(", "));
        }
        for (title, dist) in [("intent", &self.intent_distribution), ("role", &self.role_distribution)] {
            let _ = writeln!(out, "{title}:");
            for (k, v) in dist {
                let _ = writeln!(out, "  {v:>4}  {k}");
            }
        }
        let src = if self.source == "offline" { "TL;DR (extractive, offline)" } else { "TL;DR" };
        let _ = writeln!(out, "{src}:\n  {}", self.tldr);
        out
    }
}

impl Human for DedupReport {
    fn human(&self) -> String {
        let mut out = format!("{} removed, {} kept\n", self.removed_ids.len(), self.kept_ids.len());
        for c in &self.clusters {
            let _ = writeln!(out, "  keep {}  drop {}", c[0], c[1..].join(", "));
        }
        out
    }
}
