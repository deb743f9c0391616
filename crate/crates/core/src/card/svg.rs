use std::fmt::Write;

use super::CardModel;
use crate::analysis::{Histogram, SplitHistogram};

/// Fixed colors and font of every card.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Style {
    pub changed: &'static str,
    pub unchanged: &'static str,
    pub frame: &'static str,
    pub text: &'static str,
    pub font: &'static str,
}

pub const STYLE: Style = Style {
    changed: "#ff7f0e",
    unchanged: "#1f77b4",
    frame: "#bbbbbb",
    text: "#222222",
    font: "sans-serif",
};

const WIDTH: f64 = 900.0;
const MARGIN: f64 = 20.0;
const S_HEIGHT: f64 = 130.0;
const C_HEIGHT: f64 = 240.0;
const D_HEIGHT: f64 = 200.0;
const A_HEIGHT: f64 = 200.0;
const R_HEIGHT: f64 = 230.0;

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn text(out: &mut String, x: f64, y: f64, size: u32, anchor: &str, body: &str) {
    let _ = writeln!(
        out,
        r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" text-anchor="{anchor}">{}</text>"#,
        esc(body)
    );
}

fn rect(out: &mut String, x: f64, y: f64, w: f64, h: f64, fill: &str) {
    let _ = writeln!(
        out,
        r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
        w.max(0.0),
        h.max(0.0)
    );
}

fn frame(out: &mut String, x: f64, y: f64, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="{}"/>"#,
        STYLE.frame
    );
    text(out, x + 6.0, y + 16.0, 12, "start", title);
}

fn empty_mark(out: &mut String, x: f64, y: f64, what: &str) {
    let _ = writeln!(
        out,
        r#"<text class="empty" x="{x:.2}" y="{y:.2}" font-size="11" fill="{}">{}</text>"#,
        STYLE.changed,
        esc(what)
    );
}

/// Plot area inside a frame: left, top, width, height.
fn inner(x: f64, y: f64, w: f64, h: f64) -> (f64, f64, f64, f64) {
    (x + 30.0, y + 26.0, w - 40.0, h - 50.0)
}

fn edge_labels(out: &mut String, x: f64, y: f64, w: f64, edges: &[f64]) {
    let first = edges[0];
    let last = edges[edges.len() - 1];
    text(out, x, y + 14.0, 10, "start", &format!("{first}"));
    text(out, x + w, y + 14.0, 10, "end", &format!("{last}"));
}

fn split_histogram_panel(
    out: &mut String,
    (x, y, w, h): (f64, f64, f64, f64),
    title: &str,
    hist: &SplitHistogram,
    any_changed: bool,
) {
    frame(out, x, y, w, h, title);
    let (px, py, pw, ph) = inner(x, y, w, h);
    let max = hist
        .changed
        .iter()
        .chain(&hist.unchanged)
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let bins = hist.changed.len();
    let slot = pw / bins as f64;
    for k in 0..bins {
        let bx = px + k as f64 * slot;
        let hc = ph * hist.changed[k] as f64 / max;
        let hu = ph * hist.unchanged[k] as f64 / max;
        rect(out, bx, py + ph - hc, slot / 2.0, hc, STYLE.changed);
        rect(out, bx + slot / 2.0, py + ph - hu, slot / 2.0, hu, STYLE.unchanged);
    }
    text(out, px - 4.0, py + 8.0, 10, "end", &format!("{}", max as usize));
    edge_labels(out, px, py + ph, pw, &hist.edges);
    if !any_changed {
        empty_mark(out, px + pw - 120.0, py + 10.0, "changed: no samples");
    }
}

fn histogram_panel(out: &mut String, (x, y, w, h): (f64, f64, f64, f64), title: &str, hist: &Histogram) {
    frame(out, x, y, w, h, title);
    let (px, py, pw, ph) = inner(x, y, w, h);
    let total: usize = hist.counts.iter().sum();
    if total == 0 {
        empty_mark(out, px, py + 20.0, "no changed samples");
        return;
    }
    let max = hist.counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let slot = pw / hist.counts.len() as f64;
    for (k, &c) in hist.counts.iter().enumerate() {
        let bh = ph * c as f64 / max;
        rect(out, px + k as f64 * slot, py + ph - bh, slot * 0.9, bh, STYLE.changed);
    }
    text(out, px - 4.0, py + 8.0, 10, "end", &format!("{}", max as usize));
    edge_labels(out, px, py + ph, pw, &hist.edges);
}

fn section_s(out: &mut String, card: &CardModel, top: f64) {
    let s = &card.s;
    let _ = writeln!(out, r#"<g id="section-S">"#);
    frame(out, MARGIN, top, WIDTH - 2.0 * MARGIN, S_HEIGHT - 10.0, "S");
    text(
        out,
        MARGIN + 30.0,
        top + 20.0,
        14,
        "start",
        &format!("{} | {} | {}", s.dataset, s.technique, s.strategy),
    );
    text(
        out,
        MARGIN + 30.0,
        top + 40.0,
        11,
        "start",
        &format!(
            "n {} | m {} | classes {} | seed {} | qm {:.2} -> {:.2}",
            s.n, s.m, s.num_classes, s.seed, s.qm_original, s.qm_perturbed
        ),
    );
    text(
        out,
        MARGIN + 30.0,
        top + 60.0,
        12,
        "start",
        &format!(
            "changed {} | unchanged {} | ratio {:.2}",
            s.changed, s.unchanged, s.changed_ratio
        ),
    );
    let bx = MARGIN + 30.0;
    let bw = WIDTH - 2.0 * MARGIN - 60.0;
    let cw = bw * s.changed_ratio;
    rect(out, bx, top + 72.0, cw, 28.0, STYLE.changed);
    rect(out, bx + cw, top + 72.0, bw - cw, 28.0, STYLE.unchanged);
    let _ = writeln!(out, "</g>");
}

fn section_c(out: &mut String, card: &CardModel, top: f64) {
    let c = &card.c;
    let any_changed = card.s.changed > 0;
    let _ = writeln!(out, r#"<g id="section-C">"#);
    let panel_w = (WIDTH - 2.0 * MARGIN) / 3.0;
    let h = C_HEIGHT - 10.0;

    let x = MARGIN;
    frame(out, x, top, panel_w, h, "C: per class");
    let (px, py, pw, ph) = inner(x, top, panel_w, h);
    let max = c
        .per_class
        .iter()
        .map(|pc| pc.changed.max(pc.unchanged))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let slot = pw / c.per_class.len().max(1) as f64;
    for (k, pc) in c.per_class.iter().enumerate() {
        let gx = px + k as f64 * slot;
        let hu = ph * pc.unchanged as f64 / max;
        if any_changed {
            let hc = ph * pc.changed as f64 / max;
            rect(out, gx, py + ph - hc, slot * 0.45, hc, STYLE.changed);
            rect(out, gx + slot * 0.45, py + ph - hu, slot * 0.45, hu, STYLE.unchanged);
            text(out, gx + slot * 0.45, py + ph + 14.0, 10, "middle", &format!("{} ({}/{})", pc.class, pc.changed, pc.unchanged));
        } else {
            rect(out, gx, py + ph - hu, slot * 0.9, hu, STYLE.unchanged);
            text(out, gx + slot * 0.45, py + ph + 14.0, 10, "middle", &format!("{} ({})", pc.class, pc.unchanged));
        }
    }

    let x = MARGIN + panel_w;
    frame(out, x, top, panel_w, h, "C: class changes");
    let mut line = 0;
    for (from, row) in c.change_matrix.iter().enumerate() {
        for (to, &count) in row.iter().enumerate() {
            if count > 0 && line < 12 {
                text(out, x + 12.0, top + 36.0 + 15.0 * line as f64, 11, "start", &format!("{from} -> {to}: {count}"));
                line += 1;
            }
        }
    }
    if line == 0 {
        empty_mark(out, x + 12.0, top + 36.0, "no class changes");
    }

    histogram_panel(out, (MARGIN + 2.0 * panel_w, top, panel_w, h), "C: perturbed at flip", &c.perturbed_count);
    let _ = writeln!(out, "</g>");
}

fn two_panels(out: &mut String, id: &str, top: f64, height: f64, panels: [(&str, &SplitHistogram); 2], any_changed: bool) {
    let _ = writeln!(out, r#"<g id="section-{id}">"#);
    let w = (WIDTH - 2.0 * MARGIN) / 2.0;
    for (i, (title, hist)) in panels.into_iter().enumerate() {
        split_histogram_panel(out, (MARGIN + i as f64 * w, top, w, height - 10.0), title, hist, any_changed);
    }
    let _ = writeln!(out, "</g>");
}

fn section_r(out: &mut String, card: &CardModel, top: f64) {
    let r = &card.r;
    let _ = writeln!(out, r#"<g id="section-R">"#);
    let (x, w, h) = (MARGIN, WIDTH - 2.0 * MARGIN, R_HEIGHT - 10.0);
    frame(out, x, top, w, h, "R: mean series");
    let (px, py, pw, ph) = inner(x, top, w, h);
    let all = r.changed.iter().chain(&r.unchanged).flatten().copied();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (series, color, label) in [
        (&r.changed, STYLE.changed, "changed"),
        (&r.unchanged, STYLE.unchanged, "unchanged"),
    ] {
        let Some(series) = series else {
            let y = if label == "changed" { py + 10.0 } else { py + 24.0 };
            empty_mark(out, px + pw - 140.0, y, &format!("{label}: no samples"));
            continue;
        };
        let step = if series.len() > 1 { pw / (series.len() - 1) as f64 } else { 0.0 };
        let points: Vec<String> = series
            .iter()
            .enumerate()
            .map(|(t, v)| format!("{:.2},{:.2}", px + t as f64 * step, py + ph - ph * (v - lo) / span))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="{label}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
    }
    if lo.is_finite() {
        text(out, px - 4.0, py + 8.0, 10, "end", &format!("{hi}"));
        text(out, px - 4.0, py + ph, 10, "end", &format!("{lo}"));
    }
    let _ = writeln!(out, "</g>");
}

/// SVG 1.1 rendering of a card, sections stacked S, C, D, A, R.
pub fn render_svg(card: &CardModel) -> String {
    let height = S_HEIGHT + C_HEIGHT + D_HEIGHT + A_HEIGHT + R_HEIGHT + MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="{}" fill="{}">"#,
        STYLE.font, STYLE.text
    );
    let _ = writeln!(
        out,
        "<title>{}</title>\n<desc>config {}</desc>",
        esc(&format!("{} / {} / {}", card.s.dataset, card.s.technique, card.s.strategy)),
        esc(&card.s.config_hash)
    );
    let any_changed = card.s.changed > 0;
    let mut top = MARGIN / 2.0;
    section_s(&mut out, card, top);
    top += S_HEIGHT;
    section_c(&mut out, card, top);
    top += C_HEIGHT;
    two_panels(&mut out, "D", top, D_HEIGHT, [("D: euclidean", &card.d.euclidean), ("D: cosine", &card.d.cosine)], any_changed);
    top += D_HEIGHT;
    two_panels(&mut out, "A", top, A_HEIGHT, [("A: skewness", &card.a.skewness), ("A: mean", &card.a.mean)], any_changed);
    top += A_HEIGHT;
    section_r(&mut out, card, top);
    out.push_str("</svg>\n");
    out
}
