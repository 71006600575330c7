//! CSV and Markdown rendering of audit and evaluation tables.
//!
//! Every output starts with a provenance header (config hash, annotator
//! version, tool version). Rendering is pure, so identical inputs give
//! byte-identical files.

use std::fmt::Write as _;

use crate::aggregate::{PercentTable, SynsetRankRow};
use crate::diversity::DiversityScore;
use crate::eval::{Cell, StratifiedTable};

pub const TOOL_VERSION: &str = concat!("audit ", env!("CARGO_PKG_VERSION"));

pub const COUNTING_NOTE: &str =
    "percentages are over detected faces; an image listed under several synsets counts once per synset";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportHeader {
    pub config_hash: String,
    pub annotator_version: String,
    pub tool_version: String,
}

impl ReportHeader {
    pub fn new(config_hash: impl Into<String>, annotator_version: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            annotator_version: annotator_version.into(),
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    fn fields(&self) -> String {
        format!(
            "config_hash={} annotator_version={} tool_version={}",
            self.config_hash, self.annotator_version, self.tool_version
        )
    }

    pub fn csv(&self) -> String {
        format!("# {}\n", self.fields())
    }

    pub fn markdown(&self) -> String {
        format!("<!-- {} -->\n", self.fields())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn top_level_csv(table: &PercentTable, header: &ReportHeader) -> String {
    let mut out = header.csv();
    out.push_str("age_group,male,female,all,n_male,n_female,n_all\n");
    for (r, label) in PercentTable::ROW_LABELS.iter().enumerate() {
        let _ = writeln!(
            out,
            "{label},{},{},{},{},{},{}",
            table.cell(r, 0),
            table.cell(r, 1),
            table.cell(r, 2),
            table.counts[r][0],
            table.counts[r][1],
            table.counts[r][2]
        );
    }
    out
}

pub fn top_level_markdown(table: &PercentTable, title: &str, header: &ReportHeader) -> String {
    let mut out = header.markdown();
    let _ = writeln!(out, "\n### {title}\n");
    out.push_str("| % of Dataset | Male | Female | All |\n|---|---:|---:|---:|\n");
    for (r, label) in PercentTable::ROW_LABELS.iter().enumerate() {
        let _ = writeln!(
            out,
            "| {label} | {} | {} | {} |",
            table.cell(r, 0),
            table.cell(r, 1),
            table.cell(r, 2)
        );
    }
    let _ = writeln!(out, "\n{} faces; {COUNTING_NOTE}.", table.total);
    out
}

pub fn ranking_csv(rows: &[SynsetRankRow], header: &ReportHeader) -> String {
    let mut out = header.csv();
    out.push_str("rank,wnid,label,pct_male,pct_female,n_faces,n_images,n_detected_images\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            i + 1,
            r.wnid,
            csv_field(&r.label),
            r.pct_male,
            r.pct_female,
            r.n_faces,
            r.n_images,
            r.n_detected_images
        );
    }
    out
}

/// Side-by-side top-`k` table: most male-annotated and most female-annotated synsets.
pub fn rankings_markdown(
    male: &[SynsetRankRow],
    female: &[SynsetRankRow],
    top_k: usize,
    title: &str,
    header: &ReportHeader,
) -> String {
    let mut out = header.markdown();
    let _ = writeln!(out, "\n### {title}\n");
    out.push_str("| Synset | % of Faces Male | Synset | % of Faces Female |\n|---|---:|---|---:|\n");
    let n = male.len().max(female.len()).min(top_k);
    for i in 0..n {
        let m = male.get(i);
        let f = female.get(i);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            m.map_or(String::new(), |r| r.label.clone()),
            m.map_or(String::new(), |r| r.pct_male.to_string()),
            f.map_or(String::new(), |r| r.label.clone()),
            f.map_or(String::new(), |r| r.pct_female.to_string()),
        );
    }
    let _ = writeln!(out, "\n{} synsets pass the filters; {COUNTING_NOTE}.", male.len());
    out
}

fn cell_text(c: &Cell) -> String {
    c.value.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

pub fn stratified_csv(table: &StratifiedTable, header: &ReportHeader) -> String {
    let mut out = header.csv();
    let _ = writeln!(out, "# metric={}", table.metric_name);
    out.push_str("stratum,male,female,all,n_male,n_female,n_all\n");
    for (label, row) in table.row_labels.iter().zip(&table.cells) {
        let _ = writeln!(
            out,
            "{label},{},{},{},{},{},{}",
            cell_text(&row[0]),
            cell_text(&row[1]),
            cell_text(&row[2]),
            row[0].n,
            row[1].n,
            row[2].n
        );
    }
    out
}

pub fn stratified_markdown(table: &StratifiedTable, title: &str, header: &ReportHeader) -> String {
    let mut out = header.markdown();
    let _ = writeln!(out, "\n### {title}\n");
    let cols = table.column_labels();
    let _ = writeln!(out, "| {} | {} | {} | {} |", table.metric_name, cols[0], cols[1], cols[2]);
    out.push_str("|---|---:|---:|---:|\n");
    for (label, row) in table.row_labels.iter().zip(&table.cells) {
        let _ = writeln!(
            out,
            "| {label} | {} | {} | {} |",
            cell_text(&row[0]),
            cell_text(&row[1]),
            cell_text(&row[2])
        );
    }
    out
}

pub fn diversity_csv(scores: &[DiversityScore], header: &ReportHeader) -> String {
    let mut out = header.csv();
    out.push_str("wnid,n_images,compressed_bytes,codec_id\n");
    for s in scores {
        let _ = writeln!(out, "{},{},{},{}", s.wnid, s.n_images, s.compressed_bytes, csv_field(&s.codec_id));
    }
    out
}
