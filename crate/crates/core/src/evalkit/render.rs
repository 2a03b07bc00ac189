use crate::data::EvalReport;

pub const MISSING: &str = "-";

/// Percent with one decimal, e.g. `0.041` -> `4.1%`.
pub fn format_wer(wer: Option<f64>) -> String {
    match wer {
        Some(w) => format!("{:.1}%", w * 100.0),
        None => MISSING.to_string(),
    }
}

pub fn format_bleu(bleu: Option<f64>) -> String {
    match bleu {
        Some(b) => format!("{b:.2}"),
        None => MISSING.to_string(),
    }
}

/// `doc / reseg`, or a single placeholder when both are missing.
pub fn format_bleu_pair(doc: Option<f64>, reseg: Option<f64>) -> String {
    if doc.is_none() && reseg.is_none() {
        return MISSING.to_string();
    }
    format!("{} / {}", format_bleu(doc), format_bleu(reseg))
}

fn table(title: &str, columns: &[String], rows: &[(String, Vec<String>)]) -> String {
    let mut widths: Vec<usize> = std::iter::once("system".len())
        .chain(columns.iter().map(|c| c.chars().count()))
        .collect();
    for (name, cells) in rows {
        widths[0] = widths[0].max(name.chars().count());
        for (i, c) in cells.iter().enumerate() {
            widths[i + 1] = widths[i + 1].max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = format!("{title}\n");
    out.push_str(&line(
        std::iter::once("system")
            .chain(columns.iter().map(String::as_str))
            .collect(),
    ));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("| {} |\n", rule.join(" | ")));
    for (name, cells) in rows {
        out.push_str(&line(
            std::iter::once(name.as_str())
                .chain(cells.iter().map(String::as_str))
                .collect(),
        ));
    }
    out
}

/// WER and BLEU tables, one row per system and one column per test set in
/// first-seen order. A table is omitted when no report carries its metric.
pub fn render_report(reports: &[EvalReport]) -> String {
    let mut columns: Vec<String> = Vec::new();
    for r in reports {
        for t in &r.test_sets {
            if !columns.contains(&t.id) {
                columns.push(t.id.clone());
            }
        }
    }
    let has_wer = reports
        .iter()
        .flat_map(|r| &r.test_sets)
        .any(|t| t.wer.is_some());
    let has_bleu = reports
        .iter()
        .flat_map(|r| &r.test_sets)
        .any(|t| t.bleu_doc.is_some() || t.bleu_reseg.is_some());
    let mut sections = Vec::new();
    if has_wer {
        let rows = reports
            .iter()
            .map(|r| {
                let cells = columns
                    .iter()
                    .map(|c| format_wer(r.test_set(c).and_then(|t| t.wer)))
                    .collect();
                (r.system.clone(), cells)
            })
            .collect::<Vec<_>>();
        sections.push(table("WER", &columns, &rows));
    }
    if has_bleu {
        let rows = reports
            .iter()
            .map(|r| {
                let cells = columns
                    .iter()
                    .map(|c| {
                        let t = r.test_set(c);
                        format_bleu_pair(t.and_then(|t| t.bleu_doc), t.and_then(|t| t.bleu_reseg))
                    })
                    .collect();
                (r.system.clone(), cells)
            })
            .collect::<Vec<_>>();
        sections.push(table("BLEU (doc / reseg)", &columns, &rows));
    }
    sections.join("\n")
}
