//! Synthetic multi-project corpus: projects share Java method templates but
//! each writes its summaries with its own leading phrase.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{CodeSummaryPair, ProjectCorpus};
use crate::error::Result;
use crate::seed::{derive_seed_str, rng};
use crate::textcodec::{tokenize_code, tokenize_summary};

/// `(project id, summary prefix)`; the last entry is the usual target.
pub const STYLES: [(&str, &str); 4] = [
    ("alpha", "checks whether"),
    ("beta", "returns true if"),
    ("gamma", "determines if"),
    ("delta", "returns whether"),
];

const NOUNS: [&str; 100] = [
    "account", "address", "agent", "alarm", "album", "anchor", "answer", "archive", "array", "asset", "badge",
    "balance", "banner", "basket", "batch", "beacon", "bucket", "budget", "buffer", "bundle", "button", "cache",
    "camera", "canvas", "capsule", "cargo", "cart", "catalog", "channel", "chart", "cipher", "client", "cluster",
    "column", "comment", "config", "console", "contact", "cookie", "counter", "coupon", "cursor", "dataset",
    "device", "dialog", "digest", "domain", "draft", "driver", "engine", "entry", "event", "feature", "filter",
    "folder", "font", "form", "frame", "gateway", "graph", "grid", "group", "handle", "header", "image", "index",
    "invoice", "job", "journal", "kernel", "label", "layer", "ledger", "lease", "lock", "mailbox", "manifest",
    "matrix", "member", "message", "meter", "module", "monitor", "node", "order", "packet", "page", "panel",
    "parser", "payload", "pipeline", "player", "pointer", "policy", "portal", "profile", "queue", "record",
    "region", "report",
];

const ADJECTIVES: [&str; 45] = [
    "active", "blocked", "broken", "busy", "cached", "clean", "closed", "compact", "complete", "connected",
    "current", "damaged", "dirty", "disabled", "empty", "enabled", "encrypted", "expired", "frozen", "full",
    "hidden", "idle", "invalid", "locked", "loaded", "mapped", "muted", "nested", "offline", "online", "open",
    "paused", "pending", "pinned", "primary", "private", "public", "ready", "remote", "running", "sealed",
    "secure", "shared", "sorted", "stale",
];

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_ascii_uppercase().to_string() + c.as_str()).unwrap_or_default()
}

fn method(template: usize, noun: &str, adj: &str) -> String {
    let (n, a) = (capitalize(noun), capitalize(adj));
    match template {
        0 => format!("public boolean is{a}{n}() {{ return {noun}.is{a}(); }}"),
        1 => format!("boolean check{n}{a}({n} {noun}) {{ return {noun} != null && {noun}.is{a}(); }}"),
        2 => format!("public boolean {noun}Is{a}() {{ return this.{noun}.get{a}(); }}"),
        _ => format!("static boolean {adj}{n}(final {n} {noun}) {{ if ({noun} == null) {{ return false; }} return {noun}.{adj}; }}"),
    }
}

/// `pairs_per_project` pairs for each of the given styles, drawn from
/// shared templates and word pools.
pub fn style_projects(styles: &[(&str, &str)], pairs_per_project: usize, seed: u64) -> Result<Vec<ProjectCorpus>> {
    styles
        .iter()
        .map(|&(id, prefix)| {
            let mut r = rng(derive_seed_str(seed, "synth", id));
            let pairs = (0..pairs_per_project)
                .map(|i| {
                    let noun = *NOUNS.choose(&mut r).expect("non-empty");
                    let adj = *ADJECTIVES.choose(&mut r).expect("non-empty");
                    let code = method(r.gen_range(0..4), noun, adj);
                    CodeSummaryPair {
                        project_id: id.to_string(),
                        code_tokens: tokenize_code(&code),
                        summary_tokens: tokenize_summary(&format!("{prefix} the {noun} is {adj}")),
                        file_path: format!("src/{id}/Gen{}.java", i / 25),
                        line: 1 + (i % 25) * 4,
                    }
                })
                .collect();
            ProjectCorpus::new(id, pairs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projects_share_templates_but_not_styles() {
        let ps = style_projects(&STYLES, 20, 1).unwrap();
        assert_eq!(ps.len(), 4);
        for (p, (id, prefix)) in ps.iter().zip(STYLES) {
            assert_eq!(p.project_id, id);
            assert_eq!(p.len(), 20);
            let lead: Vec<String> = tokenize_summary(prefix);
            assert!(p.pairs.iter().all(|x| x.summary_tokens.starts_with(&lead)));
            assert!(p.pairs.iter().all(|x| x.code_tokens.contains(&"boolean".to_string())));
        }
        assert_eq!(style_projects(&STYLES, 20, 1).unwrap(), ps);
        assert_ne!(ps[0].pairs[0].code_tokens, ps[1].pairs[0].code_tokens);
    }
}
