use super::{CaseRecord, DistributionPlot, HarnessError, SuiteReport, SweepPoint};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn category_color(cat: &str) -> &'static str {
    match cat {
        "declaration-variable" | "identifier" => "#d62728",
        "function name" => "#ff7f0e",
        "macro-like" => "#e377c2",
        "API" => "#2ca02c",
        "keyword" => "#1f77b4",
        "literal" => "#9467bd",
        "operator" => "#17becf",
        "delimiter" => "#7f7f7f",
        _ => "#bcbd22",
    }
}

/// Sorted mean-IG bars colored by lexical category, with the fitted Cond-Idf
/// curve on its own axis.
pub fn render_distribution_svg(plot: &DistributionPlot, limit: usize) -> String {
    let n = plot.words.len().min(limit.max(1));
    let (w, h, pad) = (960.0, 380.0, 50.0);
    let bw = (w - 2.0 * pad) / n.max(1) as f64;
    let ig_max = plot.mean_ig[..n].iter().cloned().fold(1e-12, f64::max);
    let (fmin, fmax) = plot.fitted[..n]
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let fspan = if fmax > fmin { fmax - fmin } else { 1.0 };
    let plot_h = h - 2.0 * pad;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="20" font-size="13">Mean IG by token, label {} (r = {:.3})</text>"#,
        esc(&plot.label),
        plot.pearson_r
    );
    let _ = writeln!(
        s,
        r##"<line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}" stroke="#333"/>"##,
        y = h - pad,
        x2 = w - pad
    );
    for i in 0..n {
        let bh = plot.mean_ig[i] / ig_max * plot_h;
        let x = pad + i as f64 * bw;
        let _ = writeln!(
            s,
            r#"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{bw2:.2}" height="{bh:.2}" fill="{c}"><title>{t} ({cat}): {v:.4}</title></rect>"#,
            y = h - pad - bh,
            bw2 = (bw * 0.85).max(0.5),
            c = category_color(&plot.categories[i]),
            t = esc(&plot.words[i]),
            cat = esc(&plot.categories[i]),
            v = plot.mean_ig[i]
        );
    }
    let pts: Vec<String> = (0..n)
        .map(|i| {
            let x = pad + (i as f64 + 0.5) * bw;
            let y = h - pad - (plot.fitted[i] - fmin) / fspan * plot_h;
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="red" stroke-dasharray="5,3" stroke-width="2"/>"#,
        pts.join(" ")
    );
    let mut seen: Vec<&str> = Vec::new();
    for c in &plot.categories[..n] {
        if !seen.contains(&c.as_str()) {
            seen.push(c);
        }
    }
    for (k, c) in seen.iter().enumerate() {
        let y = 36.0 + 13.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="9" height="9" fill="{col}"/><text x="{tx}" y="{ty}">{name}</text>"#,
            x = w - 170.0,
            col = category_color(c),
            tx = w - 156.0,
            ty = y + 8.0,
            name = esc(c)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// ADV (solid) and INTER (dashed) accuracy against batch size, one color per training variant.
pub fn render_sweep_svg(task: &str, points: &[SweepPoint]) -> String {
    let (w, h, pad) = (520.0, 320.0, 50.0);
    let xs: Vec<usize> = points
        .iter()
        .map(|p| p.batch_size)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="22" font-size="13">{} accuracy vs batch size</text>"#,
        esc(task)
    );
    let px = |b: usize| {
        let i = xs.iter().position(|&x| x == b).unwrap_or(0);
        pad + (w - 2.0 * pad) * i as f64 / (xs.len().max(2) - 1) as f64
    };
    let py = |v: f64| h - pad - v * (h - 2.0 * pad);
    for &b in &xs {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{b}</text>"#, px(b), h - pad + 16.0);
    }
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, pad - 6.0, py(v) + 4.0);
    }
    let mut legend_y = 40.0;
    for (bpr, color, label) in [(false, "#1f77b4", "adv-train"), (true, "#d62728", "adv-train+BPR")] {
        let line: Vec<&SweepPoint> = points.iter().filter(|p| p.bpr == bpr).collect();
        if line.is_empty() {
            continue;
        }
        for (metric, dash, get) in [
            ("ADV", "", (|p: &SweepPoint| p.adv) as fn(&SweepPoint) -> f64),
            ("INTER", r#" stroke-dasharray="5 4""#, |p: &SweepPoint| p.inter),
        ] {
            let pts: Vec<String> = line
                .iter()
                .map(|p| format!("{:.1},{:.1}", px(p.batch_size), py(get(p))))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="series" points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}><title>{label} {metric}</title></polyline>"#,
                pts.join(" ")
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{legend_y}" width="10" height="10" fill="{color}"/><text x="{tx}" y="{ty}">{label}</text>"#,
            x = w - 150.0,
            tx = w - 136.0,
            ty = legend_y + 9.0
        );
        legend_y += 16.0;
    }
    s.push_str("</svg>\n");
    s
}

/// Tokens shaded by their normalized attribution weight.
pub fn render_case_html(case: &CaseRecord) -> String {
    let mut body = String::new();
    for (i, ((t, &wt), &b)) in case
        .tokens
        .iter()
        .zip(&case.per_token)
        .zip(&case.biased)
        .enumerate()
    {
        let mut style = String::new();
        if wt > 0.0 {
            let _ = write!(style, "background:rgba(0,150,60,{:.3});", wt.min(1.0));
        }
        if b {
            style.push_str("text-decoration:underline;");
        }
        if case.target == Some(i) {
            style.push_str("outline:1px solid #333;");
        }
        if style.is_empty() {
            let _ = write!(body, r#"<span title="0">{}</span> "#, esc(t));
        } else {
            let _ = write!(
                body,
                r#"<span style="{style}" title="{wt:.4}">{}</span> "#,
                esc(t)
            );
        }
    }
    format!(
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>{id}</title>\n\
<style>body{{font-family:monospace;background:#fff;max-width:60em;margin:2em auto;line-height:1.9}}</style></head>\n\
<body><h3>{id}</h3><p>label: {label} &middot; predicted: {pred}</p>\n<p>{body}</p>\n\
<p><small>shade = attribution weight; underline = project-specific name</small></p></body></html>\n",
        id = esc(&case.sample_id),
        label = esc(&case.label),
        pred = esc(&case.predicted),
    )
}

pub fn tables_csv(suite: &SuiteReport) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ratio_keys = [
        "top1_contains",
        "top2_contains",
        "top3_contains",
        "top1_only",
        "top2_only",
        "top3_only",
    ];
    let mut header: Vec<String> = [
        "task", "setting", "nonstandard", "valid", "seeds", "intra_mean", "intra_std", "inter_mean",
        "inter_std", "adv_mean", "adv_std", "delta_adv", "attack_success",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(ratio_keys.iter().map(|s| s.to_string()));
    header.push("alignment_r".into());
    let csv_err = |e: csv::Error| HarnessError::Config(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in &suite.reports {
        let a = &r.aggregate;
        let mut row = vec![
            format!("{:?}", r.task),
            r.setting.clone(),
            r.nonstandard.to_string(),
            r.valid.to_string(),
            r.results.len().to_string(),
            format!("{:.4}", a.intra.mean),
            format!("{:.4}", a.intra.std),
            format!("{:.4}", a.inter.mean),
            format!("{:.4}", a.inter.std),
            format!("{:.4}", a.adv.mean),
            format!("{:.4}", a.adv.std),
            r.delta_adv.map_or(String::new(), |d| format!("{d:.4}")),
            format!("{:.4}", a.attack_success.mean),
        ];
        for k in ratio_keys {
            row.push(a.bias_ratio.get(k).map_or(String::new(), |s| format!("{:.4}", s.mean)));
        }
        row.push(format!("{:.4}", a.alignment_r.mean));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Writes metrics.json, tables.csv, the distribution plots, the batch-size
/// sweep and the case pages under `out_dir`. Returns the written paths.
pub fn emit_report(suite: &SuiteReport, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |rel: String, content: &str| -> Result<(), HarnessError> {
        let p = out_dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, content)?;
        written.push(p);
        Ok(())
    };
    let json = serde_json::to_string_pretty(suite).expect("report serializes");
    put("metrics.json".into(), &(json + "\n"))?;
    put("tables.csv".into(), &tables_csv(suite)?)?;
    let mut first_plot = true;
    for r in &suite.reports {
        let tag = format!("{:?}_{}", r.task, slug(&r.setting));
        if let Some(plot) = &r.distribution {
            let svg = render_distribution_svg(plot, r.config.plot_limit);
            if first_plot {
                put("distribution.svg".into(), &svg)?;
                first_plot = false;
            }
            put(format!("plots/distribution_{tag}.svg"), &svg)?;
        }
        for c in &r.cases {
            put(format!("cases/{tag}/{}.html", slug(&c.sample_id)), &render_case_html(c))?;
        }
    }
    for (task, points) in &suite.sweep {
        if !points.is_empty() {
            put(format!("plots/batch_sweep_{task}.svg"), &render_sweep_svg(task, points))?;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plot(n: usize) -> DistributionPlot {
        DistributionPlot {
            label: "vulnerable".into(),
            words: (0..n).map(|i| format!("w{i}")).collect(),
            categories: (0..n).map(|i| if i % 2 == 0 { "identifier" } else { "API" }.to_string()).collect(),
            mean_ig: (0..n).map(|i| 1.0 / (i + 1) as f64).collect(),
            cond_idf: vec![0.0; n],
            fitted: (0..n).map(|i| i as f64).collect(),
            pearson_r: -0.5,
        }
    }

    #[test]
    fn bar_count_is_capped() {
        assert_eq!(render_distribution_svg(&plot(80), 60).matches("class=\"bar\"").count(), 60);
        assert_eq!(render_distribution_svg(&plot(12), 60).matches("class=\"bar\"").count(), 12);
    }

    #[test]
    fn zero_weight_has_default_background() {
        let c = CaseRecord {
            sample_id: "p<1>".into(),
            tokens: vec!["a".into(), "<b>".into()],
            per_token: vec![0.0, 1.0],
            biased: vec![false, true],
            label: "x".into(),
            predicted: "y".into(),
            target: None,
        };
        let html = render_case_html(&c);
        assert!(html.contains(r#"<span title="0">a</span>"#));
        assert!(html.contains("rgba(0,150,60,1.000)"));
        assert!(html.contains("&lt;b&gt;"));
        assert!(!html.contains("<b>"));
    }

    #[test]
    fn empty_suite_writes_metrics_without_svg() {
        let dir = tempfile::tempdir().unwrap();
        let suite = SuiteReport {
            base: Default::default(),
            reports: vec![],
            sweep: Default::default(),
        };
        let files = emit_report(&suite, dir.path()).unwrap();
        assert!(files.iter().all(|f| f.extension().unwrap() != "svg"));
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(json["reports"].as_array().unwrap().len(), 0);
    }
}
