//! Metrics tables and static SVG plots.
//!
//! `metrics.csv` columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `identity` | dataset identity label |
//! | `split` | `train` or `test`: which published split the attacker trained on |
//! | `defense` | defense arm name |
//! | `attack` | attacker fine-tuning method |
//! | `attacker` | `same_arch` or `alt_arch` (cross-architecture transfer) |
//! | `prompt` | evaluation prompt text, `{}` marking the identity token |
//! | `seed` | experiment seed |
//! | `ism_proxy`, `fdfr_proxy`, `quality_proxy` | proxy metrics |
//! | `n` | number of generations scored |
//!
//! `comparison.csv` holds one row per (defense, attack, attacker) with the
//! mean of every metric on each split. `ablation.csv` holds the test-split
//! rows of the three cloak variants, no-objective first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::threat::{Defense, MetricsReport};

pub const METRICS_COLUMNS: [&str; 11] = [
    "identity",
    "split",
    "defense",
    "attack",
    "attacker",
    "prompt",
    "seed",
    "ism_proxy",
    "fdfr_proxy",
    "quality_proxy",
    "n",
];

pub const COMPARISON_COLUMNS: [&str; 10] = [
    "defense",
    "attack",
    "attacker",
    "ism_train",
    "ism_test",
    "fdfr_train",
    "fdfr_test",
    "quality_train",
    "quality_test",
    "rows",
];

pub const ABLATION_COLUMNS: [&str; 6] = ["variant", "defense", "ism_proxy", "fdfr_proxy", "quality_proxy", "rows"];

/// Ablation rows in table order: no objective, single point, full subspace.
pub const ABLATION_VARIANTS: [(&str, Defense); 3] = [
    ("no_objective", Defense::GradientAvgUniversal),
    ("single_point", Defense::IdCloakSinglePoint),
    ("subspace", Defense::IdCloak),
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub identity: String,
    pub split: String,
    pub defense: String,
    pub attack: String,
    pub attacker: String,
    pub prompt: String,
    pub seed: u64,
    pub ism_proxy: f64,
    pub fdfr_proxy: f64,
    pub quality_proxy: f64,
    pub n: usize,
}

impl MetricsRow {
    #[allow(clippy::too_many_arguments)]
    pub fn from_report(
        identity: &str,
        split: &str,
        defense: Defense,
        attack: &str,
        attacker: &str,
        prompt: &str,
        seed: u64,
        r: &MetricsReport,
    ) -> Self {
        Self {
            identity: identity.into(),
            split: split.into(),
            defense: defense.name().into(),
            attack: attack.into(),
            attacker: attacker.into(),
            prompt: prompt.into(),
            seed,
            ism_proxy: r.ism_proxy,
            fdfr_proxy: r.fdfr_proxy,
            quality_proxy: r.quality_proxy,
            n: r.n,
        }
    }

    fn record(&self) -> [String; 11] {
        [
            self.identity.clone(),
            self.split.clone(),
            self.defense.clone(),
            self.attack.clone(),
            self.attacker.clone(),
            self.prompt.clone(),
            self.seed.to_string(),
            self.ism_proxy.to_string(),
            self.fdfr_proxy.to_string(),
            self.quality_proxy.to_string(),
            self.n.to_string(),
        ]
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if headers != METRICS_COLUMNS {
        return Err(Error::format(path, format!("unexpected columns {headers:?}")));
    }
    let bad = |what: &str, line: usize| Error::format(path, format!("line {line}: bad {what}"));
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| bad(METRICS_COLUMNS[k], line));
        rows.push(MetricsRow {
            identity: rec[0].into(),
            split: rec[1].into(),
            defense: rec[2].into(),
            attack: rec[3].into(),
            attacker: rec[4].into(),
            prompt: rec[5].into(),
            seed: rec[6].parse().map_err(|_| bad("seed", line))?,
            ism_proxy: num(7)?,
            fdfr_proxy: num(8)?,
            quality_proxy: num(9)?,
            n: rec[10].parse().map_err(|_| bad("n", line))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricMeans {
    pub ism: f64,
    pub fdfr: f64,
    pub quality: f64,
    pub rows: usize,
}

impl MetricMeans {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a MetricsRow>) -> Self {
        let mut m = Self::default();
        for r in rows {
            m.ism += r.ism_proxy;
            m.fdfr += r.fdfr_proxy;
            m.quality += r.quality_proxy;
            m.rows += 1;
        }
        if m.rows > 0 {
            let k = m.rows as f64;
            m.ism /= k;
            m.fdfr /= k;
            m.quality /= k;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub defense: String,
    pub attack: String,
    pub attacker: String,
    pub train: MetricMeans,
    pub test: MetricMeans,
}

/// One row per (defense, attack, attacker), defenses in canonical order.
pub fn comparison_table(rows: &[MetricsRow]) -> Vec<ComparisonRow> {
    let order = |d: &str| Defense::ALL.iter().position(|x| x.name() == d).unwrap_or(usize::MAX);
    let mut groups: BTreeMap<(usize, String, String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((
                order(&r.defense),
                r.defense.clone(),
                r.attack.clone(),
                r.attacker.clone(),
            ))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((_, defense, attack, attacker), rs)| ComparisonRow {
            defense,
            attack,
            attacker,
            train: MetricMeans::of(rs.iter().copied().filter(|r| r.split == "train")),
            test: MetricMeans::of(rs.iter().copied().filter(|r| r.split == "test")),
        })
        .collect()
}

/// Test-split means of the ablation variants present in `rows`, using the
/// same-architecture attacker.
pub fn ablation_table(rows: &[MetricsRow]) -> Vec<(&'static str, Defense, MetricMeans)> {
    ABLATION_VARIANTS
        .iter()
        .filter_map(|&(variant, d)| {
            let m = MetricMeans::of(
                rows.iter()
                    .filter(|r| r.defense == d.name() && r.split == "test" && r.attacker == "same_arch"),
            );
            (m.rows > 0).then_some((variant, d, m))
        })
        .collect()
}

fn find_metrics(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() && depth > 0 {
            find_metrics(&p, depth - 1, out);
        } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
            out.push(p);
        }
    }
}

/// Files written by [`emit_report`] and the tables they hold.
#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub sources: Vec<PathBuf>,
    pub comparison: Vec<ComparisonRow>,
    pub ablation: Vec<(&'static str, Defense, MetricMeans)>,
    pub files: Vec<PathBuf>,
}

/// Collects every `metrics.csv` under `dir` (up to three levels deep) and
/// writes comparison and ablation tables plus per-prompt bar charts into
/// `dir/reports`.
pub fn emit_report(dir: &Path) -> Result<ReportSummary> {
    let mut sources = Vec::new();
    find_metrics(dir, 3, &mut sources);
    let mut rows = Vec::new();
    for s in &sources {
        rows.extend(read_metrics(s)?);
    }
    if rows.is_empty() {
        return Err(Error::data(format!("nothing to report in {}", dir.display())));
    }
    let out = dir.join("reports");
    fs::create_dir_all(&out)?;
    let mut files = Vec::new();

    let comparison = comparison_table(&rows);
    let path = out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(COMPARISON_COLUMNS)?;
    for c in &comparison {
        w.write_record([
            c.defense.clone(),
            c.attack.clone(),
            c.attacker.clone(),
            c.train.ism.to_string(),
            c.test.ism.to_string(),
            c.train.fdfr.to_string(),
            c.test.fdfr.to_string(),
            c.train.quality.to_string(),
            c.test.quality.to_string(),
            (c.train.rows + c.test.rows).to_string(),
        ])?;
    }
    w.flush()?;
    files.push(path);

    let ablation = ablation_table(&rows);
    if !ablation.is_empty() {
        let path = out.join("ablation.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(ABLATION_COLUMNS)?;
        for (variant, d, m) in &ablation {
            w.write_record([
                variant.to_string(),
                d.name().to_string(),
                m.ism.to_string(),
                m.fdfr.to_string(),
                m.quality.to_string(),
                m.rows.to_string(),
            ])?;
        }
        w.flush()?;
        files.push(path);
    }

    for (metric, pick) in [
        ("ism_proxy", (|r: &MetricsRow| r.ism_proxy) as fn(&MetricsRow) -> f64),
        ("fdfr_proxy", |r: &MetricsRow| r.fdfr_proxy),
        ("quality_proxy", |r: &MetricsRow| r.quality_proxy),
    ] {
        for split in ["train", "test"] {
            let chart = prompt_chart(&rows, split, pick);
            if chart.series.is_empty() {
                continue;
            }
            let path = out.join(format!("{metric}_{split}.svg"));
            fs::write(&path, bar_chart_svg(&format!("{metric} ({split} split)"), &chart))?;
            files.push(path);
        }
    }
    Ok(ReportSummary {
        sources,
        comparison,
        ablation,
        files,
    })
}

/// Grouped bar data: one group per prompt, one series per defense.
#[derive(Debug, Clone, Default)]
pub struct BarChart {
    pub groups: Vec<String>,
    pub series: Vec<(String, Vec<f64>)>,
}

fn prompt_chart(rows: &[MetricsRow], split: &str, pick: fn(&MetricsRow) -> f64) -> BarChart {
    let rows: Vec<&MetricsRow> = rows
        .iter()
        .filter(|r| r.split == split && r.attacker == "same_arch")
        .collect();
    let mut groups: Vec<String> = Vec::new();
    for r in &rows {
        if !groups.contains(&r.prompt) {
            groups.push(r.prompt.clone());
        }
    }
    let series = Defense::ALL
        .iter()
        .filter(|d| rows.iter().any(|r| r.defense == d.name()))
        .map(|d| {
            let vals = groups
                .iter()
                .map(|g| {
                    let v: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.defense == d.name() && &r.prompt == g)
                        .map(|r| pick(r))
                        .collect();
                    v.iter().sum::<f64>() / v.len().max(1) as f64
                })
                .collect();
            (d.name().to_string(), vals)
        })
        .collect();
    BarChart { groups, series }
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a grouped bar chart as a standalone SVG document.
pub fn bar_chart_svg(title: &str, chart: &BarChart) -> String {
    let (w, h) = (720.0, 400.0);
    let (left, right, top, bottom) = (60.0, 190.0, 40.0, 70.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let max = chart
        .series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max);
    let top_val = if max > 0.0 { max * 1.1 } else { 1.0 };
    let y = |v: f64| top + plot_h * (1.0 - v.max(0.0) / top_val);
    let ng = chart.groups.len().max(1) as f64;
    let ns = chart.series.len().max(1) as f64;
    let gw = plot_w / ng;
    let bw = gw * 0.8 / ns;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + plot_w / 2.0,
        escape(title)
    );
    for k in 0..=4 {
        let v = top_val * k as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            left + plot_w,
            left - 6.0,
            yy + 4.0
        );
    }
    for (gi, g) in chart.groups.iter().enumerate() {
        let gx = left + gw * gi as f64 + gw * 0.1;
        for (si, (_, vals)) in chart.series.iter().enumerate() {
            let v = vals[gi];
            let x = gx + bw * si as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{v}</title></rect>"#,
                y(v),
                bw * 0.95,
                y(0.0) - y(v),
                PALETTE[si % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + gw * (gi as f64 + 0.5),
            top + plot_h + 18.0,
            escape(&g.replace("{}", "V*"))
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    for (si, (name, _)) in chart.series.iter().enumerate() {
        let ly = top + 16.0 * si as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{ly:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            w - right + 14.0,
            PALETTE[si % PALETTE.len()],
            w - right + 28.0,
            ly + 9.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(defense: Defense, split: &str, prompt: &str, ism: f64) -> MetricsRow {
        MetricsRow {
            identity: "id".into(),
            split: split.into(),
            defense: defense.name().into(),
            attack: "full_finetune".into(),
            attacker: "same_arch".into(),
            prompt: prompt.into(),
            seed: 0,
            ism_proxy: ism,
            fdfr_proxy: 0.1,
            quality_proxy: 0.5,
            n: 30,
        }
    }

    #[test]
    fn csv_roundtrip_keeps_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        let rows = vec![row(Defense::IdCloak, "test", "a photo of {} person", 0.25)];
        write_metrics(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(&METRICS_COLUMNS.join(",")));
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }

    #[test]
    fn single_arm_gives_single_row() {
        let rows = vec![
            row(Defense::None, "train", "p", 0.8),
            row(Defense::None, "test", "p", 0.6),
        ];
        let t = comparison_table(&rows);
        assert_eq!(t.len(), 1);
        assert!((t[0].train.ism - 0.8).abs() < 1e-15);
        assert!((t[0].test.ism - 0.6).abs() < 1e-15);
    }

    #[test]
    fn ablation_has_three_rows_in_order() {
        let rows: Vec<MetricsRow> = Defense::ALL.iter().map(|&d| row(d, "test", "p", 0.5)).collect();
        let a = ablation_table(&rows);
        let names: Vec<&str> = a.iter().map(|r| r.0).collect();
        assert_eq!(names, ["no_objective", "single_point", "subspace"]);
    }

    #[test]
    fn empty_directory_has_nothing_to_report() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_report(dir.path()).unwrap_err();
        assert!(err.to_string().contains("nothing to report"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let chart = BarChart {
            groups: vec!["a <b>".into()],
            series: vec![("none".into(), vec![0.5])],
        };
        let svg = bar_chart_svg("t", &chart);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt;b&gt;"));
    }
}
