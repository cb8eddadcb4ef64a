//! Markdown report assembled from the latest stage manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};
use serde_json::{json, Value};

use discourse_core::lir::Method;

use crate::exemplars::ClusterExemplars;
use crate::manifest::{self, RunManifest};
use crate::stages::{Ctx, StageRun};

fn num(v: &Value, digits: usize) -> String {
    v.as_f64().map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

fn by_stage<'a>(manifests: &'a BTreeMap<String, RunManifest>, stage: &str) -> Vec<&'a RunManifest> {
    manifests.values().filter(|m| m.stage == stage).collect()
}

fn method_order(name: &str) -> usize {
    Method::ALL
        .iter()
        .position(|m| m.as_str() == name)
        .unwrap_or(Method::ALL.len())
}

fn corpus_section(out: &mut String, manifests: &BTreeMap<String, RunManifest>) {
    let Some(m) = manifests.get("ingest") else {
        return;
    };
    let x = &m.metrics;
    out.push_str("## Corpus\n\n");
    let _ = writeln!(
        out,
        "{} utterances in {} dialogues; {} particle-final windows.\n",
        x["utterances"], x["dialogues"], x["windows"]
    );
    if let Some(per) = x["windows_per_particle"].as_object() {
        out.push_str("| Particle | Windows |\n|---|---|\n");
        for (p, n) in per {
            let _ = writeln!(out, "| {p} | {n} |");
        }
        out.push('\n');
    }
}

fn training_section(out: &mut String, manifests: &BTreeMap<String, RunManifest>) {
    let train = by_stage(manifests, "train");
    let rank = by_stage(manifests, "eval-rank");
    if train.is_empty() && rank.is_empty() {
        return;
    }
    out.push_str("## Training and ranking\n\n");
    if !train.is_empty() {
        out.push_str("| Task | Examples | Final epoch loss | Training accuracy |\n|---|---|---|---|\n");
        for m in train {
            let x = &m.metrics;
            let last = x["epoch_losses"].as_array().and_then(|v| v.last()).cloned().unwrap_or(Value::Null);
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                x["task"].as_str().unwrap_or("?"),
                x["examples"],
                num(&last, 4),
                num(&x["train_accuracy"], 4)
            );
        }
        out.push('\n');
    }
    if !rank.is_empty() {
        out.push_str("| Task | Measure | Groups | Value |\n|---|---|---|---|\n");
        for m in rank {
            let x = &m.metrics;
            match x["task"].as_str() {
                Some("ppred") => {
                    let _ = writeln!(out, "| ppred | accuracy | {} | {} |", x["examples"], num(&x["ppred_accuracy"], 4));
                }
                _ => {
                    for (key, label) in [
                        ("r2_at_1", "R_2@1 (training groups)"),
                        ("r10_at_1", "R_10@1"),
                        ("r3_at_1_substitution", "R_3@1 (particle substitution)"),
                    ] {
                        let e = &x[key];
                        let _ = writeln!(out, "| nsp | {label} | {} | {} |", e["groups"], num(&e["recall_at_1"], 4));
                    }
                }
            }
        }
        out.push('\n');
    }
}

fn silhouette_section(out: &mut String, manifests: &BTreeMap<String, RunManifest>) {
    let runs = by_stage(manifests, "cluster");
    if runs.is_empty() {
        return;
    }
    let mut methods: Vec<String> = runs
        .iter()
        .filter_map(|m| m.metrics["method"].as_str().map(String::from))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    methods.sort_by_key(|m| (method_order(m), m.clone()));
    let mut table: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for m in &runs {
        let x = &m.metrics;
        let (Some(tag), Some(method)) = (x["model_tag"].as_str(), x["method"].as_str()) else {
            continue;
        };
        let all = &x["scopes"]["all"];
        let cell = if all["silhouette"].is_null() {
            "n/a".to_string()
        } else {
            format!("{} (k={})", num(&all["silhouette"], 4), all["clusters"])
        };
        table.entry(tag.to_string()).or_default().insert(method.to_string(), cell);
    }
    out.push_str("## Silhouette scores\n\n");
    out.push_str(
        "All particles together; silhouette of the best DBSCAN cell on the 2D t-SNE coordinates, noise excluded.\n\n",
    );
    let _ = writeln!(out, "| Model | {} |", methods.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(methods.len()));
    for (tag, row) in &table {
        let cells: Vec<&str> = methods
            .iter()
            .map(|m| row.get(m).map_or("", String::as_str))
            .collect();
        let _ = writeln!(out, "| {tag} | {} |", cells.join(" | "));
    }
    out.push('\n');
}

fn ari_section(out: &mut String, manifests: &BTreeMap<String, RunManifest>) {
    let runs = by_stage(manifests, "eval-ari");
    if runs.is_empty() {
        return;
    }
    out.push_str("## Clusters and pragmatic functions\n\n");
    out.push_str("ARI between per-particle clusters and annotated functions; `*` marks p < 0.01.\n\n");
    let mut runs = runs;
    runs.sort_by_key(|m| {
        (
            m.metrics["task"].as_str().unwrap_or("").to_string(),
            method_order(m.metrics["method"].as_str().unwrap_or("")),
        )
    });
    for m in runs {
        let x = &m.metrics;
        let _ = writeln!(
            out,
            "### {} / {}\n",
            x["task"].as_str().unwrap_or("?"),
            x["method"].as_str().unwrap_or("?")
        );
        out.push_str("| Particle | Clusters | Noise | Labelled points | ARI | p-value |\n|---|---|---|---|---|---|\n");
        if let Some(per) = x["particles"].as_object() {
            for (p, v) in per {
                let star = if v["p_value"].as_f64().is_some_and(|p| p < 0.01) { " *" } else { "" };
                let _ = writeln!(
                    out,
                    "| {p} | {} | {} | {} | {} | {}{star} |",
                    v.get("clusters").cloned().unwrap_or(Value::Null),
                    v.get("noise").cloned().unwrap_or(Value::Null),
                    v.get("labelled_points").cloned().unwrap_or(Value::Null),
                    num(&v["ari"], 4),
                    num(&v["p_value"], 4),
                );
            }
        }
        out.push('\n');
    }
}

fn exemplar_section(out: &mut String, manifests: &BTreeMap<String, RunManifest>, root: &Path) {
    let mut blocks = Vec::new();
    for m in by_stage(manifests, "cluster") {
        if m.metrics["method"].as_str() != Some(Method::LirWord.as_str()) {
            continue;
        }
        for (rel, _) in m.outputs.iter().filter(|(k, _)| k.ends_with("/exemplars.json")) {
            let scope = rel.rsplit('/').nth(1).unwrap_or("");
            if scope == "all" {
                continue;
            }
            let Ok(text) = std::fs::read_to_string(root.join(rel)) else {
                continue;
            };
            let Ok(groups) = serde_json::from_str::<Vec<ClusterExemplars>>(&text) else {
                continue;
            };
            let mut b = String::new();
            let _ = writeln!(b, "### {} / {scope}\n", m.metrics["task"].as_str().unwrap_or("?"));
            for g in groups {
                let _ = writeln!(b, "- cluster {} ({} members)", g.cluster, g.size);
                for e in g.exemplars {
                    let _ = writeln!(b, "  - `{}` {}", e.id, e.text);
                }
            }
            blocks.push(b);
        }
    }
    if blocks.is_empty() {
        return;
    }
    out.push_str("## Cluster exemplars (lir-word)\n\n");
    out.push_str("Utterances nearest each cluster centroid.\n\n");
    for b in blocks {
        out.push_str(&b);
        out.push('\n');
    }
}

fn figure_section(out: &mut String, manifests: &BTreeMap<String, RunManifest>, root: &Path) {
    let figs: Vec<&String> = by_stage(manifests, "cluster")
        .into_iter()
        .flat_map(|m| m.outputs.keys())
        .filter(|k| k.ends_with(".svg") && root.join(k).exists())
        .collect();
    if figs.is_empty() {
        return;
    }
    out.push_str("## Figures\n\nColours: lah blue, meh orange, hor green.\n\n");
    for f in figs {
        let _ = writeln!(out, "- [{f}]({f})");
    }
    out.push('\n');
}

fn mt_section(out: &mut String, manifests: &BTreeMap<String, RunManifest>) {
    out.push_str("## Machine translation\n\n");
    let bt = manifests.get("backtranslate");
    let ev = manifests.get("eval-mt");
    if bt.is_none() && ev.is_none() {
        out.push_str("Translation stages were not run; section omitted.\n");
        return;
    }
    if let Some(m) = bt {
        out.push_str("Back-translation, held-out BLEU per iteration:\n\n");
        out.push_str("| Iteration | Pairs | Synthetic added | Held-out BLEU |\n|---|---|---|---|\n");
        if let Some(its) = m.metrics["iterations"].as_array() {
            for it in its {
                let bleu = it["heldout_bleu"].as_f64().map(|b| json!(b * 100.0)).unwrap_or(Value::Null);
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} |",
                    it["iteration"],
                    it["pairs"],
                    it["synthetic_added"],
                    num(&bleu, 2)
                );
            }
        }
        out.push('\n');
    }
    if let Some(m) = ev {
        let x = &m.metrics;
        let _ = writeln!(out, "Evaluation set: {} pairs, BLEU {}.", x["pairs"], num(&x["bleu"], 2));
        if !x["sentiment"].is_null() {
            let s = &x["sentiment"]["match"];
            let _ = writeln!(
                out,
                "Sentiment agreement between manual and machine translations: {}{}.",
                num(&s["accuracy"], 4),
                if s["degenerate_classifier"].as_bool() == Some(true) {
                    " (classifier returned a single label)"
                } else {
                    ""
                }
            );
        }
    }
}

/// Renders the report for `manifests`, reading exemplars under `root`.
pub fn render(manifests: &BTreeMap<String, RunManifest>, root: &Path) -> String {
    let mut out = String::from("# Discourse particle report\n\n");
    corpus_section(&mut out, manifests);
    training_section(&mut out, manifests);
    silhouette_section(&mut out, manifests);
    ari_section(&mut out, manifests);
    exemplar_section(&mut out, manifests, root);
    figure_section(&mut out, manifests, root);
    mt_section(&mut out, manifests);
    out
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let manifests: BTreeMap<String, RunManifest> = manifest::latest(&ctx.out)?
        .into_iter()
        .filter(|(_, m)| m.stage != "report" && m.stage != "synth")
        .collect();
    if manifests.is_empty() {
        bail!("no stage manifests under {}", ctx.out.join("manifests").display());
    }
    let md = render(&manifests, &ctx.out);
    let mut run = StageRun::new(ctx, "report", "report")?;
    run.write_rel("report.md", md.as_bytes())?;
    run.finish(json!({"manifests": manifests.keys().collect::<Vec<_>>()}))?;
    Ok(())
}
